use std::fs;
use std::path::Path;

use crate::error::{RecapError, Result};

/// Temporal change words (44 entries).
pub const DEFAULT_TEMPORAL: &[&str] = &[
    "bigger", "change", "cleared", "constant", "decrease", "decreased", "decreasing", "elevated",
    "elevation", "enlarged", "enlargement", "enlarging", "expanded", "greater", "growing",
    "improved", "improvement", "improving", "increase", "increased", "increasing", "larger", "new",
    "persistence", "persistent", "persisting", "progression", "progressive", "reduced", "removal",
    "resolution", "resolved", "resolving", "smaller", "stability", "stable", "stably",
    "unchanged", "unfolded", "worse", "worsen", "worsened", "worsening", "unaltered",
];

/// Severity and location modifiers.
pub const DEFAULT_SPATIAL: &[&str] = &[
    "healed", "fractured", "healing", "nondisplaced", "top", "size", "heart", "normal",
    "mediastinum", "widening", "contour", "widened", "consolidative", "collapse", "underlying",
    "developing", "fibrosis", "thickening", "biapical", "blunting", "indistinctness",
    "asymmetrical", "haziness", "asymmetric", "layering", "subpulmonic", "thoracentesis", "trace",
    "small", "adjacent", "tiny", "atypical", "supervening", "multifocal", "correct",
    "superimposed", "patchy", "borderline",
];

/// Temporal and spatial entity lists. Spatial never overlaps temporal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicons {
    pub temporal: Vec<String>,
    pub spatial: Vec<String>,
}

fn dedup(words: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in words {
        let w = w.trim().to_lowercase();
        if !w.is_empty() && !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

impl Lexicons {
    /// Entities listed in both are kept as temporal only.
    pub fn new(temporal: Vec<String>, spatial: Vec<String>) -> Self {
        let temporal = dedup(temporal);
        let spatial = dedup(spatial)
            .into_iter()
            .filter(|w| !temporal.contains(w))
            .collect();
        Lexicons { temporal, spatial }
    }

    pub fn empty() -> Self {
        Lexicons {
            temporal: Vec::new(),
            spatial: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.temporal.is_empty() && self.spatial.is_empty()
    }

    pub fn load(temporal: Option<&Path>, spatial: Option<&Path>) -> Result<Self> {
        let t = match temporal {
            Some(p) => load_lexicon(p)?,
            None => DEFAULT_TEMPORAL.iter().map(|s| s.to_string()).collect(),
        };
        let s = match spatial {
            Some(p) => load_lexicon(p)?,
            None => DEFAULT_SPATIAL.iter().map(|s| s.to_string()).collect(),
        };
        Ok(Lexicons::new(t, s))
    }
}

impl Default for Lexicons {
    fn default() -> Self {
        Lexicons::new(
            DEFAULT_TEMPORAL.iter().map(|s| s.to_string()).collect(),
            DEFAULT_SPATIAL.iter().map(|s| s.to_string()).collect(),
        )
    }
}

/// One entity per line, UTF-8; blank lines ignored.
pub fn load_lexicon(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| RecapError::io(path, e))?;
    Ok(dedup(text.lines().map(str::to_string)))
}

pub fn write_lexicon(path: &Path, words: &[String]) -> Result<()> {
    let mut s = words.join("\n");
    s.push('\n');
    fs::write(path, s).map_err(|e| RecapError::io(path, e))
}
