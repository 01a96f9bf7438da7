use std::fmt;
use std::str::FromStr;

use super::{CompressionMap, ReplacementMask};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{
    ClassifierHead, Dropout, Embeddings, EncoderConfig, EncoderModel, TransformerLayer,
};
use crate::tensor::{AttnMask, Parameters, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Predecessor modules, embeddings and head frozen; successor modules train.
    Replacement,
    /// Embeddings, head and successor modules train; predecessor modules stay frozen and unused.
    SuccessorFinetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Replacement => "replacement",
            Phase::SuccessorFinetune => "successor-finetune",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replacement" => Ok(Phase::Replacement),
            "successor-finetune" => Ok(Phase::SuccessorFinetune),
            other => Err(Error::Format(format!("unknown phase {other:?}"))),
        }
    }
}

/// A predecessor layer group and the successor layers that may stand in for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulePair {
    pub prd: Vec<TransformerLayer>,
    pub scc: Vec<TransformerLayer>,
}

/// Predecessor and successor modules sharing one embedding and one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub config: EncoderConfig,
    pub map: CompressionMap,
    pub embeddings: Embeddings,
    pub pairs: Vec<ModulePair>,
    pub head: ClassifierHead,
    phase: Phase,
}

/// Copies `predecessor` into a hybrid in the replacement phase. The
/// predecessor itself is not modified.
pub fn build_hybrid(predecessor: &EncoderModel, map: &CompressionMap) -> Result<HybridModel> {
    let sources = map.init_sources(predecessor.n_layers())?;
    let pairs = map
        .groups()
        .iter()
        .zip(sources)
        .map(|(group, src)| ModulePair {
            prd: group
                .iter()
                .map(|&l| predecessor.layers[l].clone())
                .collect(),
            scc: src.iter().map(|&l| predecessor.layers[l].clone()).collect(),
        })
        .collect();
    let mut hybrid = HybridModel {
        config: predecessor.config.clone(),
        map: map.clone(),
        embeddings: predecessor.embeddings.clone(),
        pairs,
        head: predecessor.head.clone(),
        phase: Phase::Replacement,
    };
    hybrid.set_phase(Phase::Replacement);
    Ok(hybrid)
}

impl HybridModel {
    pub fn n_modules(&self) -> usize {
        self.pairs.len()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.set_phase_with(phase, false)
    }

    /// As [`set_phase`](Self::set_phase); `keep_shared_frozen` leaves embeddings
    /// and head frozen in the fine-tuning phase.
    pub fn set_phase_with(&mut self, phase: Phase, keep_shared_frozen: bool) {
        let shared_frozen = phase == Phase::Replacement || keep_shared_frozen;
        self.embeddings.set_frozen(shared_frozen);
        self.head.set_frozen(shared_frozen);
        for pair in &mut self.pairs {
            pair.prd.iter_mut().for_each(|l| l.set_frozen(true));
            pair.scc.iter_mut().for_each(|l| l.set_frozen(false));
        }
        self.phase = phase;
    }

    /// Embeds, runs module `i` through its successor if `r[i]` else its
    /// predecessor group, then applies the head. Only the chosen branch is recorded.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        mask: &AttnMask,
        r: &ReplacementMask,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        if r.len() != self.pairs.len() {
            return Err(Error::Param(format!(
                "replacement mask has {} entries for {} modules",
                r.len(),
                self.pairs.len()
            )));
        }
        let mut h = self.embeddings.forward(tape, tokens, mask)?;
        for (pair, &replaced) in self.pairs.iter().zip(&r.r) {
            let branch = if replaced { &pair.scc } else { &pair.prd };
            for layer in branch {
                h = layer.forward(tape, h, mask, dropout)?;
            }
        }
        self.head.forward(tape, h)
    }

    pub fn logits(
        &self,
        tokens: &[usize],
        mask: &AttnMask,
        r: &ReplacementMask,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, tokens, mask, r, &mut Dropout::off())?;
        Ok(tape.value(out).to_vec())
    }

    /// True for parameter names (as visited) that belong to a successor module.
    pub fn is_successor_param(name: &str) -> bool {
        name.contains(".scc.")
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut header = vec![
            ("kind".to_string(), "hybrid".to_string()),
            ("map".to_string(), self.map.to_string()),
            ("map_init".to_string(), self.map.init().to_string()),
            ("phase".to_string(), self.phase.to_string()),
        ];
        header.extend(self.config.to_kv());
        let mut ck = Checkpoint::new(header);
        ck.push_params("", self);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header_value("kind") != Some("hybrid") {
            return Err(Error::Format("checkpoint is not a hybrid".into()));
        }
        let field = |k: &str| {
            ck.header_value(k)
                .ok_or_else(|| Error::Format(format!("hybrid checkpoint lacks {k}")))
        };
        let map: CompressionMap = field("map")?.parse()?;
        let map = map.with_init(field("map_init")?.parse()?);
        let phase: Phase = field("phase")?.parse()?;
        let config = EncoderConfig::from_kv(&ck.header)?;
        let skeleton = EncoderModel::init(&config, 0)?;
        let mut hybrid = build_hybrid(&skeleton, &map)?;
        hybrid.set_phase(phase);
        ck.fill_params("", &mut hybrid)?;
        Ok(hybrid)
    }
}

/// Standalone successor: shared embeddings, every successor module in order, shared head.
/// All of its tensors are trainable.
pub fn assemble_successor(hybrid: &HybridModel) -> EncoderModel {
    let layers: Vec<TransformerLayer> = hybrid
        .pairs
        .iter()
        .flat_map(|p| p.scc.iter().cloned())
        .collect();
    let mut model = EncoderModel {
        config: hybrid.config.with_layers(layers.len()),
        embeddings: hybrid.embeddings.clone(),
        layers,
        head: hybrid.head.clone(),
    };
    model.set_frozen(false);
    model
}

impl Parameters for HybridModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.embeddings
            .visit(&mut |n, t| f(&format!("embeddings.{n}"), t));
        for (i, pair) in self.pairs.iter().enumerate() {
            for (j, l) in pair.prd.iter().enumerate() {
                l.visit(&mut |n, t| f(&format!("modules.{i}.prd.{j}.{n}"), t));
            }
            for (j, l) in pair.scc.iter().enumerate() {
                l.visit(&mut |n, t| f(&format!("modules.{i}.scc.{j}.{n}"), t));
            }
        }
        self.head.visit(&mut |n, t| f(&format!("head.{n}"), t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.embeddings
            .visit_mut(&mut |n, t| f(&format!("embeddings.{n}"), t));
        for (i, pair) in self.pairs.iter_mut().enumerate() {
            for (j, l) in pair.prd.iter_mut().enumerate() {
                l.visit_mut(&mut |n, t| f(&format!("modules.{i}.prd.{j}.{n}"), t));
            }
            for (j, l) in pair.scc.iter_mut().enumerate() {
                l.visit_mut(&mut |n, t| f(&format!("modules.{i}.scc.{j}.{n}"), t));
            }
        }
        self.head.visit_mut(&mut |n, t| f(&format!("head.{n}"), t));
    }
}
