//! Character-level vocabulary with padding and terminator ids.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub type TokenId = u32;
pub type TokenSeq = Vec<TokenId>;

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";

/// Characters of the default table, after the two special tokens.
const DEFAULT_CHARS: &str = "\n 0123456789abcdefghijklmnopqrstuvwxyzANS+-*%=,.;:>()[]?!#|";
const DEFAULT_DELIMITERS: &str = ",.;\n";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    /// Symbol for each id; ids 0 and 1 are `<pad>` and `<eos>`.
    pub symbols: Vec<String>,
    pub delimiters: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    char_to_id: [Option<TokenId>; 128],
    delimiters: Vec<TokenId>,
    is_delimiter: Vec<bool>,
}

impl Vocabulary {
    pub fn default_table() -> Self {
        let mut symbols = vec![PAD.to_string(), EOS.to_string()];
        symbols.extend(DEFAULT_CHARS.chars().map(|c| c.to_string()));
        let delimiters = DEFAULT_DELIMITERS.chars().map(|c| c.to_string()).collect();
        Self::from_spec(&TokenizerSpec { symbols, delimiters }).expect("default table is valid")
    }

    pub fn from_spec(spec: &TokenizerSpec) -> Result<Self> {
        ensure!(spec.symbols.len() >= 3, "vocabulary needs at least one character");
        ensure!(
            spec.symbols[0] == PAD && spec.symbols[1] == EOS,
            "ids 0 and 1 must be {PAD} and {EOS}"
        );
        let mut char_to_id = [None; 128];
        for (i, s) in spec.symbols.iter().enumerate().skip(2) {
            let mut chars = s.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return Err(Error::parse(format!("symbol {s:?} is not a single character")));
            };
            ensure!(c.is_ascii(), "symbol {c:?} is not ASCII");
            let slot = &mut char_to_id[c as usize];
            ensure!(slot.is_none(), "duplicate symbol {c:?}");
            *slot = Some(i as TokenId);
        }
        let mut delimiters = Vec::new();
        for d in &spec.delimiters {
            let c = d.chars().next().filter(|_| d.chars().count() == 1);
            let id = c
                .and_then(|c| char_to_id.get(c as usize).copied().flatten())
                .ok_or_else(|| Error::parse(format!("delimiter {d:?} is not in the vocabulary")))?;
            delimiters.push(id);
        }
        ensure!(!delimiters.is_empty(), "delimiter set must be nonempty");
        ensure!(
            delimiters.len() < spec.symbols.len(),
            "delimiter set must be a strict subset of the vocabulary"
        );
        let mut is_delimiter = vec![false; spec.symbols.len()];
        for &d in &delimiters {
            is_delimiter[d as usize] = true;
        }
        Ok(Self {
            symbols: spec.symbols.clone(),
            char_to_id,
            delimiters,
            is_delimiter,
        })
    }

    pub fn spec(&self) -> TokenizerSpec {
        TokenizerSpec {
            symbols: self.symbols.clone(),
            delimiters: self
                .delimiters
                .iter()
                .map(|&d| self.symbols[d as usize].clone())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn pad(&self) -> TokenId {
        0
    }

    pub fn eos(&self) -> TokenId {
        1
    }

    pub fn delimiters(&self) -> &[TokenId] {
        &self.delimiters
    }

    pub fn is_delimiter(&self, id: TokenId) -> bool {
        self.is_delimiter.get(id as usize).copied().unwrap_or(false)
    }

    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        text.chars()
            .map(|c| {
                self.char_to_id
                    .get(c as usize)
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::contract(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Decodes ids to text; special tokens are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| i > 1 && (i as usize) < self.symbols.len())
            .map(|&i| self.symbols[i as usize].as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_shape() {
        let v = Vocabulary::default_table();
        assert!(v.len() <= 64, "vocab size {}", v.len());
        assert_eq!(v.delimiters().len(), 4);
        let ids = v.encode("3+4*2 mod 7>").unwrap();
        assert_eq!(v.decode(&ids), "3+4*2 mod 7>");
        assert!(v.is_delimiter(v.encode(",").unwrap()[0]));
        assert!(!v.is_delimiter(v.encode("a").unwrap()[0]));
    }

    #[test]
    fn unknown_character_is_rejected() {
        assert!(Vocabulary::default_table().encode("é").is_err());
        assert!(Vocabulary::default_table().encode("Z").is_err());
    }

    #[test]
    fn spec_round_trip() {
        let v = Vocabulary::default_table();
        assert_eq!(Vocabulary::from_spec(&v.spec()).unwrap(), v);
    }
}
