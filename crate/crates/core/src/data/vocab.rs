use std::collections::HashMap;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const START_ID: usize = 2;
pub const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[START]"];

/// Token → id map with three reserved ids (pad, unknown, sequence start).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.push(r);
        }
        v
    }

    fn push(&mut self, tok: &str) -> usize {
        if let Some(&id) = self.index.get(tok) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), id);
        id
    }

    /// Builds from token counts: most frequent first, ties broken lexicographically,
    /// capped at `max_size` entries including the reserved ones.
    pub fn from_counts(counts: &HashMap<String, usize>, max_size: usize) -> Self {
        let mut v = Self::new();
        let mut ranked: Vec<(&String, &usize)> = counts.iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        for (tok, _) in ranked {
            if v.len() >= max_size {
                break;
            }
            v.push(tok);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_stable() {
        let v = Vocab::new();
        assert_eq!(v.id("[PAD]"), PAD_ID);
        assert_eq!(v.id("[UNK]"), UNK_ID);
        assert_eq!(v.id("[START]"), START_ID);
        assert_eq!(v.id("never-seen"), UNK_ID);
    }

    #[test]
    fn frequency_order_with_cap() {
        let counts: HashMap<String, usize> = [("b", 2), ("a", 2), ("c", 5), ("d", 1)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let v = Vocab::from_counts(&counts, 6);
        assert_eq!(v.tokens(), &["[PAD]", "[UNK]", "[START]", "c", "a", "b"]);
    }
}
