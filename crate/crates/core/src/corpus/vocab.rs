use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::labels::{Observation, Status};
use crate::error::{RecapError, Result};

pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const UNK: &str = "[UNK]";
pub const FIRST_VISIT: &str = "[FiV]";
pub const FOLLOW_UP: &str = "[FoV]";
pub const CLS: &str = "[CLS]";

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const FIRST_VISIT_ID: u32 = 4;
pub const FOLLOW_UP_ID: u32 = 5;
pub const CLS_ID: u32 = 6;

/// Splits report text into lowercase word tokens; `.` and `,` become their
/// own tokens and every other non-alphanumeric character separates words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if ch == '.' || ch == ',' {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token table with contiguous ids. Ids below `num_reserved` are special or
/// structural tokens that exist regardless of corpus frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    min_count: usize,
    num_reserved: usize,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

fn reserved_tokens() -> Vec<String> {
    let mut v: Vec<String> = [PAD, BOS, EOS, UNK, FIRST_VISIT, FOLLOW_UP, CLS]
        .iter()
        .map(|s| s.to_string())
        .collect();
    v.push(Status::Pos.token().into());
    v.push(Status::Neg.token().into());
    v.extend(Observation::ALL.iter().map(|o| o.token()));
    v
}

impl Vocabulary {
    /// Keeps training tokens seen at least `min_count` times, ordered lexicographically
    /// after the reserved block.
    pub fn build<S: AsRef<str>>(train_reports: &[Vec<S>], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(RecapError::Validation("min_count must be at least 1".into()));
        }
        let reserved = reserved_tokens();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for report in train_reports {
            for tok in report {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut tokens = reserved.clone();
        tokens.extend(
            counts
                .into_iter()
                .filter(|(t, c)| *c >= min_count && !reserved.iter().any(|r| r == t))
                .map(|(t, _)| t.to_string()),
        );
        Ok(Self::from_parts(tokens, min_count, reserved.len()))
    }

    fn from_parts(tokens: Vec<String>, min_count: usize, num_reserved: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            min_count,
            num_reserved,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn num_reserved(&self) -> usize {
        self.num_reserved
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        (id as usize) < self.num_reserved
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn observation_id(&self, o: Observation) -> u32 {
        self.id(&o.token()).expect("observation tokens are reserved")
    }

    pub fn status_id(&self, s: Status) -> u32 {
        self.id(s.token()).expect("status tokens are reserved")
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        self.encode(&tokenize(text))
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(str::to_string)
                    .ok_or_else(|| RecapError::Validation(format!("token id {i} outside vocabulary")))
            })
            .collect()
    }

    /// Report text for generated ids: reserved tokens are dropped.
    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| !self.is_reserved(i) || i == UNK_ID)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Vocabulary = serde_json::from_str(s)?;
        let reserved = reserved_tokens();
        if raw.tokens.len() < reserved.len() || raw.tokens[..reserved.len()] != reserved[..] {
            return Err(RecapError::Checkpoint(
                "vocabulary does not start with the reserved token block".into(),
            ));
        }
        Ok(Self::from_parts(raw.tokens, raw.min_count, raw.num_reserved))
    }
}
