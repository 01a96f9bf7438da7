//! Tab-separated text classification files (header row, one example per line).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{Example, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TsvSplit {
    pub examples: Vec<Example>,
    pub vocab: Vocab,
    pub n_classes: usize,
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Loads `path`. Without `vocab` a new one is built from this file
/// (capped at `max_vocab` entries); with one, unseen tokens map to the unknown id.
/// Labels must be non-negative integers.
pub fn load_tsv(
    path: &Path,
    text_col: &str,
    label_col: &str,
    vocab: Option<&Vocab>,
    max_vocab: usize,
) -> Result<TsvSplit> {
    let content = fs::read_to_string(path)?;
    let mut lines = content.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?;
    let cols: Vec<&str> = header.split('\t').collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| c.trim() == name)
            .ok_or_else(|| Error::Format(format!("missing column {name:?} in {}", path.display())))
    };
    let (ti, li) = (find(text_col)?, find(label_col)?);

    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let (Some(text), Some(label)) = (fields.get(ti), fields.get(li)) else {
            return Err(Error::Format(format!(
                "row {} has {} fields",
                n + 2,
                fields.len()
            )));
        };
        let label: usize = label.trim().parse().map_err(|_| {
            Error::Format(format!(
                "row {}: label {label:?} is not a class index",
                n + 2
            ))
        })?;
        rows.push((text.to_string(), label));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{} has no examples", path.display())));
    }

    let vocab = match vocab {
        Some(v) => v.clone(),
        None => {
            let mut counts: HashMap<String, usize> = HashMap::new();
            for (text, _) in &rows {
                for tok in tokenize(text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
            Vocab::from_counts(&counts, max_vocab)
        }
    };
    let examples: Vec<Example> = rows
        .iter()
        .map(|(text, label)| Example {
            tokens: tokenize(text).map(|t| vocab.id(&t)).collect(),
            label: *label,
        })
        .collect();
    let n_classes = examples.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    Ok(TsvSplit {
        examples,
        vocab,
        n_classes,
    })
}
