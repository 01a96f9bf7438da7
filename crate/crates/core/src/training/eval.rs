use crate::data::{batches, Example};
use crate::error::{Error, Result};
use crate::model::EncoderModel;
use crate::tensor::AttnMask;
use crate::theseus::{HybridModel, ReplacementMask};

/// Anything that maps a padded batch to logits without recording gradients.
pub trait Classifier {
    fn n_classes(&self) -> usize;
    fn max_len(&self) -> usize;
    fn logits(&self, tokens: &[usize], mask: &AttnMask) -> Result<Vec<f64>>;
}

impl Classifier for EncoderModel {
    fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn max_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn logits(&self, tokens: &[usize], mask: &AttnMask) -> Result<Vec<f64>> {
        EncoderModel::logits(self, tokens, mask)
    }
}

/// A hybrid evaluated under one fixed replacement mask.
pub struct MaskedHybrid<'a> {
    pub hybrid: &'a HybridModel,
    pub mask: ReplacementMask,
}

impl<'a> MaskedHybrid<'a> {
    pub fn new(hybrid: &'a HybridModel, mask: ReplacementMask) -> Self {
        MaskedHybrid { hybrid, mask }
    }

    /// Every module replaced: the successor's view.
    pub fn successor(hybrid: &'a HybridModel) -> Self {
        Self::new(hybrid, ReplacementMask::all(hybrid.n_modules(), true))
    }
}

impl Classifier for MaskedHybrid<'_> {
    fn n_classes(&self) -> usize {
        self.hybrid.config.n_classes
    }

    fn max_len(&self) -> usize {
        self.hybrid.config.max_seq_len
    }

    fn logits(&self, tokens: &[usize], mask: &AttnMask) -> Result<Vec<f64>> {
        self.hybrid.logits(tokens, mask, &self.mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

pub const EVAL_BATCH: usize = 128;

/// Mean cross-entropy and accuracy (first maximal logit wins) over a whole split.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, split: &[Example]) -> Result<EvalResult> {
    if split.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let c = model.n_classes();
    let (mut loss, mut correct) = (0.0, 0usize);
    for batch in batches(split, EVAL_BATCH, model.max_len(), None) {
        let logits = model.logits(&batch.tokens, &batch.mask)?;
        for (row, &label) in logits.chunks_exact(c).zip(&batch.labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            let pred = row.iter().position(|&v| v == max).expect("non-empty row");
            correct += (pred == label) as usize;
        }
    }
    let n = split.len() as f64;
    Ok(EvalResult {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}
