//! Word-level vocabulary shared by the data generator, the victim model and
//! the attack. Four ids are reserved; everything else is ingested from plain
//! word lists in file order, so a (lists, order) pair always produces the
//! same token numbering.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

/// Padding / generic delimiter.
pub const PAD: TokenId = 0;
/// Beginning-of-sequence marker, prepended to every sample.
pub const BOS: TokenId = 1;
/// Opening personal-note marker `<PN>`.
pub const PN_START: TokenId = 2;
/// Closing personal-note marker `</PN>`.
pub const PN_END: TokenId = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<PN>", "</PN>"];
const PUNCT: [&str; 8] = [".", ",", "!", "?", "'s", ":", ";", "-"];
const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

const NAMES_TXT: &str = include_str!("../data/names.txt");
const TOPICS_TXT: &str = include_str!("../data/topics.txt");
const KEYWORDS_TXT: &str = include_str!("../data/keywords.txt");
const COMMON_TXT: &str = include_str!("../data/common.txt");

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("duplicate word {0:?} across lists")]
    DuplicateWord(String),
    #[error("failed to read word list {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Token-id partitions used by the restricted-set filter.
///
/// The three categories are pairwise disjoint by construction: a surface form
/// belongs to the first list that introduces it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordCategories {
    pub names: Vec<TokenId>,
    pub topics: Vec<TokenId>,
    pub keywords: Vec<TokenId>,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
    categories: WordCategories,
    digit_ids: [TokenId; 10],
}

impl Vocab {
    /// Vocabulary built from the word lists bundled with the crate.
    pub fn builtin() -> Self {
        Self::from_lists(NAMES_TXT, TOPICS_TXT, KEYWORDS_TXT, COMMON_TXT)
            .expect("bundled word lists are consistent")
    }

    /// Assemble a vocabulary from raw word-list contents (one surface form
    /// per line, blank lines skipped). Ingestion order: reserved tokens,
    /// punctuation, digits, common words, names, topics, keywords.
    pub fn from_lists(
        names: &str,
        topics: &str,
        keywords: &str,
        common: &str,
    ) -> Result<Self, VocabError> {
        let mut v = Vocab {
            surfaces: Vec::new(),
            index: HashMap::new(),
            categories: WordCategories {
                names: Vec::new(),
                topics: Vec::new(),
                keywords: Vec::new(),
            },
            digit_ids: [0; 10],
        };
        for w in RESERVED {
            v.push(w)?;
        }
        for w in PUNCT {
            v.push(w)?;
        }
        for (i, w) in DIGITS.iter().enumerate() {
            v.digit_ids[i] = v.push(w)?;
        }
        for w in lines(common) {
            v.push(w)?;
        }
        for w in lines(names) {
            let id = v.push(w)?;
            v.categories.names.push(id);
        }
        for w in lines(topics) {
            let id = v.push(w)?;
            v.categories.topics.push(id);
        }
        for w in lines(keywords) {
            let id = v.push(w)?;
            v.categories.keywords.push(id);
        }
        Ok(v)
    }

    /// Load the three category lists from files, with the bundled common
    /// list. Unknown-word handling happens at filter-set resolution, not
    /// here; these files *define* the vocabulary.
    pub fn from_list_files(
        names: &Path,
        topics: &Path,
        keywords: &Path,
    ) -> Result<Self, VocabError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| VocabError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        Self::from_lists(&read(names)?, &read(topics)?, &read(keywords)?, COMMON_TXT)
    }

    fn push(&mut self, surface: &str) -> Result<TokenId, VocabError> {
        if self.index.contains_key(surface) {
            return Err(VocabError::DuplicateWord(surface.to_string()));
        }
        let id = self.surfaces.len() as TokenId;
        self.surfaces.push(surface.to_string());
        self.index.insert(surface.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn token(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    /// Resolve a surface form, failing loudly on typos in templates.
    pub fn expect_token(&self, surface: &str) -> TokenId {
        self.token(surface)
            .unwrap_or_else(|| panic!("word {surface:?} missing from vocabulary"))
    }

    pub fn surface(&self, id: TokenId) -> &str {
        &self.surfaces[id as usize]
    }

    pub fn categories(&self) -> &WordCategories {
        &self.categories
    }

    /// Ids of the plain common words: everything after the reserved,
    /// punctuation and digit blocks and before the category lists.
    pub fn common_words(&self) -> std::ops::Range<TokenId> {
        let start = (RESERVED.len() + PUNCT.len() + DIGITS.len()) as TokenId;
        let end = start
            + (self.len()
                - RESERVED.len()
                - PUNCT.len()
                - DIGITS.len()
                - self.categories.names.len()
                - self.categories.topics.len()
                - self.categories.keywords.len()) as TokenId;
        start..end
    }

    pub fn digit_token(&self, digit: u8) -> TokenId {
        self.digit_ids[digit as usize]
    }

    pub fn is_digit(&self, id: TokenId) -> bool {
        self.digit_ids.contains(&id)
    }

    /// Tokens that terminate a secret span during decoding: sentence-final
    /// punctuation, the PNote close marker and padding.
    pub fn is_secret_delimiter(&self, id: TokenId) -> bool {
        id == PN_END
            || id == PAD
            || matches!(self.surfaces.get(id as usize).map(String::as_str), Some("." | "!" | "?"))
    }

    /// Tokenize a whitespace-separated phrase; every word must be known.
    pub fn render(&self, phrase: &str) -> Result<Vec<TokenId>, VocabError> {
        phrase
            .split_whitespace()
            .map(|w| {
                self.token(w)
                    .ok_or_else(|| VocabError::UnknownWord(w.to_string()))
            })
            .collect()
    }

    /// Human-readable form of a token sequence.
    pub fn text(&self, tokens: &[TokenId]) -> String {
        let words: Vec<&str> = tokens.iter().map(|&t| self.surface(t)).collect();
        words.join(" ")
    }
}

impl fmt::Display for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "vocab({} tokens: {} names, {} topics, {} keywords)",
            self.len(),
            self.categories.names.len(),
            self.categories.topics.len(),
            self.categories.keywords.len()
        )
    }
}

fn lines(raw: &str) -> impl Iterator<Item = &str> {
    raw.lines().map(str::trim).filter(|l| !l.is_empty())
}
