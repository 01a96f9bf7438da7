use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a toy encoder classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 256,
            max_seq_len: 32,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_layers: 4,
            n_classes: 2,
            dropout_rate: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn with_layers(&self, n_layers: usize) -> Self {
        EncoderConfig {
            n_layers,
            ..self.clone()
        }
    }

    /// `key=value` lines, in field order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("max_seq_len".into(), self.max_seq_len.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_classes".into(), self.n_classes.to_string()),
            ("dropout_rate".into(), format!("{:?}", self.dropout_rate)),
        ]
    }

    pub fn from_kv(kv: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            kv.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("missing config key {key}")))
        };
        let int = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Format(format!("bad integer for {key}")))
        };
        let cfg = EncoderConfig {
            vocab_size: int("vocab_size")?,
            max_seq_len: int("max_seq_len")?,
            d_model: int("d_model")?,
            n_heads: int("n_heads")?,
            d_ff: int("d_ff")?,
            n_layers: int("n_layers")?,
            n_classes: int("n_classes")?,
            dropout_rate: get("dropout_rate")?
                .parse()
                .map_err(|_| Error::Format("bad float for dropout_rate".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = EncoderConfig {
            d_model: 10,
            n_heads: 4,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn kv_round_trip() {
        let cfg = EncoderConfig {
            dropout_rate: 0.1,
            n_layers: 0,
            ..Default::default()
        };
        assert_eq!(EncoderConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }
}
