//! Seeded synthetic sequence-classification tasks.
//!
//! Sequence lengths count the sequence-start token added at batching time, so
//! generated content is at most `seq_len - 1` tokens long.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Example};
use crate::error::{Error, Result};

/// First id available to task tokens (after pad, unknown, start).
pub const FIRST_TASK_ID: usize = 3;
pub const OPEN_ID: usize = FIRST_TASK_ID;
pub const CLOSE_ID: usize = FIRST_TASK_ID + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Label is the class whose token occurs strictly most often.
    MajorityToken,
    /// Label 1 iff the bracket string is balanced (Dyck-1 membership).
    BracketBalance,
    /// Key/value pairs followed by a query key; label is the queried value's class.
    KeyedLookup,
}

impl SyntheticTask {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticTask::MajorityToken => "majority-token",
            SyntheticTask::BracketBalance => "bracket-balance",
            SyntheticTask::KeyedLookup => "keyed-lookup",
        }
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority-token" => Ok(SyntheticTask::MajorityToken),
            "bracket-balance" => Ok(SyntheticTask::BracketBalance),
            "keyed-lookup" => Ok(SyntheticTask::KeyedLookup),
            other => Err(Error::Config(format!("unknown synthetic task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.dev == 0 || self.test == 0 {
            return Err(Error::Config(
                "every split needs at least one example".into(),
            ));
        }
        if self.vocab_size < 8 {
            return Err(Error::Config(format!("vocab_size {} < 8", self.vocab_size)));
        }
        let min_len = match self.task {
            SyntheticTask::BracketBalance => 5,
            SyntheticTask::MajorityToken => 4,
            SyntheticTask::KeyedLookup => 4,
        };
        if self.seq_len < min_len {
            return Err(Error::Config(format!(
                "seq_len {} too short for {}",
                self.seq_len, self.task
            )));
        }
        match self.task {
            SyntheticTask::BracketBalance if self.n_classes != 2 => Err(Error::Config(
                "bracket-balance is binary (n_classes = 2)".into(),
            )),
            _ if self.n_classes < 2 => Err(Error::Config("n_classes must be >= 2".into())),
            _ if FIRST_TASK_ID + self.n_classes >= self.vocab_size => {
                Err(Error::Config("vocab too small for the class tokens".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Train/dev/test splits as a pure function of the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let split = |stream: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        // Exactly balanced labels, then shuffled.
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
        labels.shuffle(&mut rng);
        labels
            .into_iter()
            .map(|label| Example {
                tokens: generate_one(spec, label, &mut rng),
                label,
            })
            .collect::<Vec<_>>()
    };
    Ok(Dataset {
        train: split(1, spec.train),
        dev: split(2, spec.dev),
        test: split(3, spec.test),
        n_classes: spec.n_classes,
        vocab_size: spec.vocab_size,
    })
}

fn generate_one(spec: &SyntheticSpec, label: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let max_content = spec.seq_len - 1;
    match spec.task {
        SyntheticTask::BracketBalance => bracket_example(max_content & !1, label == 1, rng),
        SyntheticTask::MajorityToken => majority_example(spec, max_content, label, rng),
        SyntheticTask::KeyedLookup => keyed_example(spec, max_content, label, rng),
    }
}

/// Counter-based Dyck-1 check over [`OPEN_ID`]/[`CLOSE_ID`] tokens.
pub fn is_balanced(tokens: &[usize]) -> bool {
    let mut depth: i64 = 0;
    for &t in tokens {
        depth += if t == OPEN_ID { 1 } else { -1 };
        if depth < 0 {
            return false;
        }
    }
    depth == 0
}

fn dyck_word(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    let mut depth = 0usize;
    for i in 0..len {
        let remaining = len - i;
        let can_open = depth + 1 < remaining;
        let can_close = depth > 0;
        let open = match (can_open, can_close) {
            (true, true) => rng.gen_bool(0.5),
            (true, false) => true,
            _ => false,
        };
        if open {
            depth += 1;
            out.push(OPEN_ID);
        } else {
            depth -= 1;
            out.push(CLOSE_ID);
        }
    }
    out
}

fn bracket_example(len: usize, balanced: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if balanced {
        return dyck_word(len, rng);
    }
    match rng.gen_range(0..3) {
        0 => {
            // Count mismatch: flip one bracket of a balanced word.
            let mut w = dyck_word(len, rng);
            let i = rng.gen_range(0..len);
            w[i] = if w[i] == OPEN_ID { CLOSE_ID } else { OPEN_ID };
            w
        }
        1 => {
            // Equal counts, random order.
            let mut w: Vec<usize> = (0..len)
                .map(|i| if i < len / 2 { OPEN_ID } else { CLOSE_ID })
                .collect();
            loop {
                w.shuffle(rng);
                if !is_balanced(&w) {
                    return w;
                }
            }
        }
        _ => {
            // Equal counts, one shallow dip: swap the ends of a top-level pair.
            let mut w = dyck_word(len, rng);
            let mut starts = Vec::new();
            let mut depth = 0usize;
            for (i, &t) in w.iter().enumerate() {
                if t == OPEN_ID {
                    if depth == 0 {
                        starts.push(i);
                    }
                    depth += 1;
                } else {
                    depth -= 1;
                }
            }
            let open = starts[rng.gen_range(0..starts.len())];
            let mut depth = 0usize;
            let close = (open..len)
                .find(|&j| {
                    if w[j] == OPEN_ID {
                        depth += 1;
                    } else {
                        depth -= 1;
                    }
                    depth == 0
                })
                .expect("balanced word closes every pair");
            w.swap(open, close);
            w
        }
    }
}

/// Class with a strict plurality among class tokens, if any.
pub fn majority_label(tokens: &[usize], n_classes: usize) -> Option<usize> {
    let mut counts = vec![0usize; n_classes];
    for &t in tokens {
        if (FIRST_TASK_ID..FIRST_TASK_ID + n_classes).contains(&t) {
            counts[t - FIRST_TASK_ID] += 1;
        }
    }
    let best = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
    let (idx, _) = winners.next()?;
    if winners.next().is_some() {
        None
    } else {
        Some(idx)
    }
}

fn majority_example(
    spec: &SyntheticSpec,
    max_content: usize,
    label: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let c = spec.n_classes;
    let filler_lo = FIRST_TASK_ID + c;
    let has_filler = filler_lo < spec.vocab_size;
    let min_len = (max_content / 2).max(3).min(max_content);
    loop {
        let len = rng.gen_range(min_len..=max_content);
        let tokens: Vec<usize> = (0..len)
            .map(|_| {
                if has_filler && rng.gen_bool(0.2) {
                    rng.gen_range(filler_lo..spec.vocab_size)
                } else {
                    FIRST_TASK_ID + rng.gen_range(0..c)
                }
            })
            .collect();
        if majority_label(&tokens, c) == Some(label) {
            return tokens;
        }
    }
}

fn keyed_example(
    spec: &SyntheticSpec,
    max_content: usize,
    label: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let c = spec.n_classes;
    let key_lo = FIRST_TASK_ID + c;
    let n_keys = (spec.vocab_size - key_lo).min(16);
    let pairs = ((max_content - 1) / 2).min(n_keys).max(1);
    let mut keys: Vec<usize> = (key_lo..key_lo + n_keys).collect();
    keys.shuffle(rng);
    keys.truncate(pairs);
    let target = rng.gen_range(0..pairs);
    let mut tokens = Vec::with_capacity(2 * pairs + 1);
    for (i, &k) in keys.iter().enumerate() {
        let class = if i == target {
            label
        } else {
            rng.gen_range(0..c)
        };
        tokens.push(k);
        tokens.push(FIRST_TASK_ID + class);
    }
    tokens.push(keys[target]);
    tokens
}

/// Reference labeler for keyed-lookup content.
pub fn keyed_label(tokens: &[usize]) -> Option<usize> {
    let (&query, pairs) = tokens.split_last()?;
    pairs
        .chunks_exact(2)
        .find(|kv| kv[0] == query)
        .map(|kv| kv[1] - FIRST_TASK_ID)
}
