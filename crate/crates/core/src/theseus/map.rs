use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Where each successor module takes its initial weights from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SuccessorInit {
    /// Copy the first layers of the group it replaces.
    #[default]
    GroupLeading,
    /// Copy predecessor layers `0, 1, 2, …` in order, regardless of grouping.
    GlobalPrefix,
}

impl FromStr for SuccessorInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "group-leading" => Ok(SuccessorInit::GroupLeading),
            "global-prefix" => Ok(SuccessorInit::GlobalPrefix),
            other => Err(Error::Config(format!("unknown successor init {other:?}"))),
        }
    }
}

impl fmt::Display for SuccessorInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SuccessorInit::GroupLeading => "group-leading",
            SuccessorInit::GlobalPrefix => "global-prefix",
        })
    }
}

/// Partition of the predecessor's layers into contiguous modules, each
/// replaced by `successor_layers_per_group` successor layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressionMap {
    groups: Vec<Vec<usize>>,
    successor_layers_per_group: usize,
    init: SuccessorInit,
}

impl CompressionMap {
    pub fn new(groups: Vec<Vec<usize>>, successor_layers_per_group: usize) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Map("no groups".into()));
        }
        if successor_layers_per_group == 0 {
            return Err(Error::Map("successor_layers_per_group must be >= 1".into()));
        }
        let mut next = 0;
        for (i, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Map(format!("group {i} is empty")));
            }
            for &l in g {
                if l != next {
                    return Err(Error::Map(format!(
                        "group {i}: expected layer {next}, found {l}"
                    )));
                }
                next += 1;
            }
        }
        Ok(CompressionMap {
            groups,
            successor_layers_per_group,
            init: SuccessorInit::GroupLeading,
        })
    }

    /// Groups of `group_size` consecutive layers; the last group absorbs any remainder.
    pub fn uniform(n_layers: usize, group_size: usize) -> Result<Self> {
        if group_size == 0 || n_layers < group_size {
            return Err(Error::Map(format!(
                "cannot split {n_layers} layers into groups of {group_size}"
            )));
        }
        let n = n_layers / group_size;
        let groups = (0..n)
            .map(|i| {
                let end = if i + 1 == n {
                    n_layers
                } else {
                    (i + 1) * group_size
                };
                (i * group_size..end).collect()
            })
            .collect();
        Self::new(groups, 1)
    }

    /// One group per layer: successor modules start as exact copies.
    pub fn identity(n_layers: usize) -> Result<Self> {
        Self::uniform(n_layers, 1)
    }

    pub fn with_init(mut self, init: SuccessorInit) -> Self {
        self.init = init;
        self
    }

    pub fn init(&self) -> SuccessorInit {
        self.init
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn n_modules(&self) -> usize {
        self.groups.len()
    }

    pub fn successor_layers_per_group(&self) -> usize {
        self.successor_layers_per_group
    }

    pub fn predecessor_layers(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn successor_layers(&self) -> usize {
        self.groups.len() * self.successor_layers_per_group
    }

    pub fn validate_for(&self, n_layers: usize) -> Result<()> {
        if self.predecessor_layers() != n_layers {
            return Err(Error::Map(format!(
                "map covers {} layers, predecessor has {n_layers}",
                self.predecessor_layers()
            )));
        }
        Ok(())
    }

    /// Predecessor layer indices each successor module is initialized from.
    pub fn init_sources(&self, n_layers: usize) -> Result<Vec<Vec<usize>>> {
        self.validate_for(n_layers)?;
        let m = self.successor_layers_per_group;
        let mut out = Vec::with_capacity(self.groups.len());
        for (i, g) in self.groups.iter().enumerate() {
            let src: Vec<usize> = match self.init {
                SuccessorInit::GroupLeading => (0..m).map(|j| g[0] + j).collect(),
                SuccessorInit::GlobalPrefix => (i * m..(i + 1) * m).collect(),
            };
            if let Some(&bad) = src.iter().find(|&&l| l >= n_layers) {
                return Err(Error::Map(format!(
                    "module {i} would copy missing layer {bad}"
                )));
            }
            out.push(src);
        }
        Ok(out)
    }
}

impl fmt::Display for CompressionMap {
    /// `0-1,2-3x1` style: inclusive ranges, then `x` and the successor layers per group.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .groups
            .iter()
            .map(|g| match g.len() {
                1 => g[0].to_string(),
                _ => format!("{}-{}", g[0], g[g.len() - 1]),
            })
            .collect();
        write!(f, "{}x{}", parts.join(","), self.successor_layers_per_group)
    }
}

impl FromStr for CompressionMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Map(format!("cannot parse compression map {s:?}"));
        let (groups, per) = match s.rsplit_once('x') {
            Some((g, p)) => (g, p.trim().parse().map_err(|_| bad())?),
            None => (s, 1),
        };
        let mut out = Vec::new();
        for part in groups.split(',') {
            let part = part.trim();
            let (lo, hi) = match part.split_once('-') {
                Some((a, b)) => (
                    a.trim().parse().map_err(|_| bad())?,
                    b.trim().parse().map_err(|_| bad())?,
                ),
                None => {
                    let v: usize = part.parse().map_err(|_| bad())?;
                    (v, v)
                }
            };
            if hi < lo {
                return Err(bad());
            }
            out.push((lo..=hi).collect());
        }
        Self::new(out, per)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_gaps_overlaps_and_empty_groups() {
        assert!(CompressionMap::new(vec![vec![0], vec![2]], 1).is_err());
        assert!(CompressionMap::new(vec![vec![0, 1], vec![1, 2]], 1).is_err());
        assert!(CompressionMap::new(vec![vec![0], vec![]], 1).is_err());
        assert!(CompressionMap::new(vec![vec![1, 2]], 1).is_err());
        let m = CompressionMap::new(vec![vec![0, 1], vec![2, 3]], 1).unwrap();
        assert!(m.validate_for(4).is_ok());
        assert!(matches!(m.validate_for(6), Err(Error::Map(_))));
    }

    #[test]
    fn uniform_remainder_goes_to_last_group() {
        let m = CompressionMap::uniform(7, 3).unwrap();
        assert_eq!(m.groups(), &[vec![0, 1, 2], vec![3, 4, 5, 6]]);
        assert_eq!(CompressionMap::uniform(12, 2).unwrap().n_modules(), 6);
    }

    #[test]
    fn init_sources_by_mode() {
        let m = CompressionMap::uniform(4, 2).unwrap();
        assert_eq!(m.init_sources(4).unwrap(), vec![vec![0], vec![2]]);
        let g = m.with_init(SuccessorInit::GlobalPrefix);
        assert_eq!(g.init_sources(4).unwrap(), vec![vec![0], vec![1]]);
    }

    #[test]
    fn text_round_trip() {
        for m in [
            CompressionMap::uniform(4, 2).unwrap(),
            CompressionMap::identity(3).unwrap(),
            CompressionMap::new(vec![vec![0, 1, 2], vec![3, 4, 5]], 2).unwrap(),
        ] {
            assert_eq!(m.to_string().parse::<CompressionMap>().unwrap(), m);
        }
        assert_eq!(
            "0-1,2-3".parse::<CompressionMap>().unwrap(),
            CompressionMap::uniform(4, 2).unwrap()
        );
        assert!("0-1,3".parse::<CompressionMap>().is_err());
    }
}
