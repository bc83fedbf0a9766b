//! Script-range language tagging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Language of a text: one of the two configured scripts, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LangTag {
    #[serde(rename = "l1", alias = "th", alias = "L1")]
    L1,
    #[serde(rename = "l2", alias = "en", alias = "L2")]
    L2,
    #[serde(rename = "cs", alias = "CS", alias = "code_switched")]
    CodeSwitched,
}

impl LangTag {
    pub const ALL: [LangTag; 3] = [LangTag::L1, LangTag::L2, LangTag::CodeSwitched];

    pub fn as_str(self) -> &'static str {
        match self {
            LangTag::L1 => "l1",
            LangTag::L2 => "l2",
            LangTag::CodeSwitched => "cs",
        }
    }
}

impl std::fmt::Display for LangTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Unicode ranges identifying the two scripts. Digits, whitespace and
/// punctuation never count as letters, even inside a configured range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRanges {
    pub l1: Vec<(char, char)>,
    pub l2: Vec<(char, char)>,
}

impl Default for ScriptRanges {
    /// Thai block for language 1, Basic Latin letters for language 2.
    fn default() -> Self {
        Self {
            l1: vec![('\u{0E00}', '\u{0E7F}')],
            l2: vec![('A', 'Z'), ('a', 'z')],
        }
    }
}

/// Per-script letter counts of a text.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScriptCounts {
    pub l1: usize,
    pub l2: usize,
}

fn is_letterlike(c: char) -> bool {
    // Thai currency sign and Thai punctuation marks are in-block non-letters.
    !(c.is_numeric()
        || c.is_whitespace()
        || c.is_ascii_punctuation()
        || matches!(c, '\u{0E3F}' | '\u{0E4F}' | '\u{0E5A}' | '\u{0E5B}'))
}

fn in_ranges(c: char, ranges: &[(char, char)]) -> bool {
    ranges.iter().any(|&(lo, hi)| lo <= c && c <= hi)
}

impl ScriptRanges {
    pub fn is_l2(&self, c: char) -> bool {
        in_ranges(c, &self.l2) && is_letterlike(c)
    }

    pub fn count(&self, text: &str) -> ScriptCounts {
        let mut counts = ScriptCounts::default();
        for c in text.chars().filter(|&c| is_letterlike(c)) {
            if in_ranges(c, &self.l1) {
                counts.l1 += 1;
            } else if in_ranges(c, &self.l2) {
                counts.l2 += 1;
            }
        }
        counts
    }

    pub fn tag(&self, text: &str) -> Result<LangTag> {
        if text.trim().is_empty() {
            return Err(Error::Empty("text"));
        }
        match self.count(text) {
            ScriptCounts { l1: 0, l2: 0 } => Err(Error::Untaggable(text.to_string())),
            ScriptCounts { l1: _, l2: 0 } => Ok(LangTag::L1),
            ScriptCounts { l1: 0, l2: _ } => Ok(LangTag::L2),
            _ => Ok(LangTag::CodeSwitched),
        }
    }

    /// Resolves a text to one of the two languages by letter majority; ties
    /// go to L1.
    pub fn dominant(&self, text: &str) -> Result<LangTag> {
        let counts = self.count(text);
        if counts.l1 == 0 && counts.l2 == 0 {
            return Err(Error::Untaggable(text.to_string()));
        }
        Ok(if counts.l1 >= counts.l2 {
            LangTag::L1
        } else {
            LangTag::L2
        })
    }
}

/// Tags `text` with the default script ranges.
pub fn tag_language(text: &str) -> Result<LangTag> {
    ScriptRanges::default().tag(text)
}
