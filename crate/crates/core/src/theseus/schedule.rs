use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// Replacement rate as a function of the training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReplacementScheduler {
    Constant {
        p: f64,
    },
    /// `min(1, k·t + b)`
    Linear {
        k: f64,
        b: f64,
    },
    /// `1 − min(1, k·t + b)`
    AntiLinear {
        k: f64,
        b: f64,
    },
}

impl ReplacementScheduler {
    pub fn constant(p: f64) -> Result<Self> {
        check_unit("p", p)?;
        Ok(ReplacementScheduler::Constant { p })
    }

    pub fn linear(k: f64, b: f64) -> Result<Self> {
        check_slope(k, b)?;
        Ok(ReplacementScheduler::Linear { k, b })
    }

    pub fn anti_linear(k: f64, b: f64) -> Result<Self> {
        check_slope(k, b)?;
        Ok(ReplacementScheduler::AntiLinear { k, b })
    }

    /// Linear scheduler starting at `b` and reaching 1 after `steps` steps.
    pub fn linear_reaching(b: f64, steps: u64) -> Result<Self> {
        Self::linear(slope_reaching(b, steps)?, b)
    }

    pub fn rate(&self, t: u64) -> f64 {
        match *self {
            ReplacementScheduler::Constant { p } => p,
            ReplacementScheduler::Linear { k, b } => linear_rate(k, b, t),
            ReplacementScheduler::AntiLinear { k, b } => 1.0 - linear_rate(k, b, t),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ReplacementScheduler::Constant { .. } => "constant",
            ReplacementScheduler::Linear { .. } => "linear",
            ReplacementScheduler::AntiLinear { .. } => "anti-linear",
        }
    }
}

/// Closed form, clamped to `[0, 1]`.
fn linear_rate(k: f64, b: f64, t: u64) -> f64 {
    (k * t as f64 + b).clamp(0.0, 1.0)
}

/// Slope that takes a linear schedule from `b` to 1 in `steps` steps.
pub fn slope_reaching(b: f64, steps: u64) -> Result<f64> {
    if steps == 0 || !(0.0..1.0).contains(&b) {
        return Err(Error::Param(format!(
            "no positive slope reaches 1 from b={b} in {steps} steps"
        )));
    }
    Ok((1.0 - b) / steps as f64)
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Param(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

fn check_slope(k: f64, b: f64) -> Result<()> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::Param(format!("slope k = {k} must be positive")));
    }
    check_unit("b", b)
}

impl fmt::Display for ReplacementScheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplacementScheduler::Constant { p } => write!(f, "constant:{p}"),
            ReplacementScheduler::Linear { k, b } => write!(f, "linear:{k}:{b}"),
            ReplacementScheduler::AntiLinear { k, b } => write!(f, "anti-linear:{k}:{b}"),
        }
    }
}

impl FromStr for ReplacementScheduler {
    type Err = Error;

    /// `constant:P`, `linear:K:B` or `anti-linear:K:B`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse scheduler {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| {
            parts
                .get(i)
                .ok_or_else(bad)?
                .trim()
                .parse::<f64>()
                .map_err(|_| bad())
        };
        match (parts[0].trim(), parts.len()) {
            ("constant", 2) => Self::constant(num(1)?),
            ("linear", 3) => Self::linear(num(1)?, num(2)?),
            ("anti-linear", 3) => Self::anti_linear(num(1)?, num(2)?),
            _ => Err(bad()),
        }
    }
}

/// Expected per-module learning rate when modules are replaced at rate `p_d`.
pub fn equivalent_lr(lr: f64, p_d: f64) -> f64 {
    p_d * lr
}

/// One Bernoulli draw per module, shared by a whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementMask {
    pub r: Vec<bool>,
    pub p_used: f64,
    pub step: u64,
}

impl ReplacementMask {
    /// Every module replaced (`true`) or every module kept (`false`).
    pub fn all(n: usize, replaced: bool) -> Self {
        ReplacementMask {
            r: vec![replaced; n],
            p_used: if replaced { 1.0 } else { 0.0 },
            step: 0,
        }
    }

    /// Only module `i` replaced.
    pub fn only(n: usize, i: usize) -> Self {
        let mut r = vec![false; n];
        r[i] = true;
        ReplacementMask {
            r,
            p_used: f64::NAN,
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn replaced(&self) -> usize {
        self.r.iter().filter(|&&b| b).count()
    }

    /// `0`/`1` string, e.g. `"0110"`.
    pub fn bits(&self) -> String {
        self.r.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

pub fn sample_mask<R: Rng + ?Sized>(
    n: usize,
    p: f64,
    step: u64,
    rng: &mut R,
) -> Result<ReplacementMask> {
    check_unit("replacement rate", p)?;
    let r = (0..n).map(|_| rng.gen_bool(p)).collect();
    Ok(ReplacementMask { r, p_used: p, step })
}
