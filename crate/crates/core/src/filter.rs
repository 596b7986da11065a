//! Rule-based removal of structurally uninformative tokens.
//!
//! Five categories are recognised: control/boundary markers, lexical noise
//! (punctuation and whitespace), task boilerplate, stopwords and subword
//! fragments. A token survives only if no rule claims it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Dataset, StepRecord, TokenClass, TokenRecord};

/// The category a filtered token falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterCategory {
    Control,
    LexicalNoise,
    Boilerplate,
    Stopword,
    SubwordFragment,
}

impl FilterCategory {
    pub const ALL: [FilterCategory; 5] = [
        FilterCategory::Control,
        FilterCategory::LexicalNoise,
        FilterCategory::Boilerplate,
        FilterCategory::Stopword,
        FilterCategory::SubwordFragment,
    ];

    fn from_class(class: TokenClass) -> Option<Self> {
        match class {
            TokenClass::Control => Some(FilterCategory::Control),
            TokenClass::LexicalNoise => Some(FilterCategory::LexicalNoise),
            TokenClass::Boilerplate => Some(FilterCategory::Boilerplate),
            TokenClass::Stopword => Some(FilterCategory::Stopword),
            TokenClass::SubwordFragment => Some(FilterCategory::SubwordFragment),
            TokenClass::Semantic => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FilterCategory::Control => "control",
            FilterCategory::LexicalNoise => "lexical_noise",
            FilterCategory::Boilerplate => "boilerplate",
            FilterCategory::Stopword => "stopword",
            FilterCategory::SubwordFragment => "subword_fragment",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Kept,
    Filtered(FilterCategory),
}

/// Markers some tokenizers prepend to word-initial pieces. Stripped before
/// stopword lookup.
const WORD_START_MARKERS: [char; 2] = ['\u{2581}', '\u{0120}'];

pub const DEFAULT_CONTROL_TOKENS: &[&str] = &[
    "<|endoftext|>",
    "<|eot_id|>",
    "<|end_of_text|>",
    "<|begin_of_text|>",
    "<|start_header_id|>",
    "<|end_header_id|>",
    "<|im_start|>",
    "<|im_end|>",
    "<|mdm_mask|>",
    "<|mask|>",
    "<mask>",
    "[MASK]",
    "[PAD]",
    "<pad>",
    "<|pad|>",
    "[CLS]",
    "[SEP]",
    "[UNK]",
    "<unk>",
    "<s>",
    "</s>",
    "<eos>",
    "<bos>",
];

pub const DEFAULT_BOILERPLATE: &[&str] = &[
    "Answer:",
    "Answer",
    "answer:",
    "Question:",
    "Q:",
    "A:",
    "Response:",
    "Final answer:",
    "The answer is",
    "assistant",
    "user",
    "system",
];

/// Classic English stopword list.
pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "aren't", "as", "at", "be", "because", "been", "before", "being", "below", "between", "both",
    "but", "by", "can", "can't", "cannot", "could", "couldn't", "did", "didn't", "do", "does",
    "doesn't", "doing", "don't", "down", "during", "each", "few", "for", "from", "further", "had",
    "hadn't", "has", "hasn't", "have", "haven't", "having", "he", "he'd", "he'll", "he's", "her",
    "here", "here's", "hers", "herself", "him", "himself", "his", "how", "how's", "i", "i'd",
    "i'll", "i'm", "i've", "if", "in", "into", "is", "isn't", "it", "it's", "its", "itself",
    "let's", "me", "more", "most", "mustn't", "my", "myself", "no", "nor", "not", "of", "off",
    "on", "once", "only", "or", "other", "ought", "our", "ours", "ourselves", "out", "over", "own",
    "same", "shan't", "she", "she'd", "she'll", "she's", "should", "shouldn't", "so", "some",
    "such", "than", "that", "that's", "the", "their", "theirs", "them", "themselves", "then",
    "there", "there's", "these", "they", "they'd", "they'll", "they're", "they've", "this",
    "those", "through", "to", "too", "under", "until", "up", "very", "was", "wasn't", "we",
    "we'd", "we'll", "we're", "we've", "were", "weren't", "what", "what's", "when", "when's",
    "where", "where's", "which", "while", "who", "who's", "whom", "why", "why's", "with", "won't",
    "would", "wouldn't", "you", "you'd", "you'll", "you're", "you've", "your", "yours",
    "yourself", "yourselves",
];

/// WordPiece-style continuation prefix.
pub const DEFAULT_SUBWORD_PREFIXES: &[&str] = &["##"];

/// The ignore set. `IgnoreSpec::default()` filters nothing.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IgnoreSpec {
    pub control_tokens: BTreeSet<String>,
    pub boilerplate_phrases: BTreeSet<String>,
    /// Compared against the lowercased token text.
    pub stopwords: BTreeSet<String>,
    /// Drop tokens whose text is entirely punctuation or whitespace.
    pub filter_punctuation: bool,
    /// Continuation-marker prefixes; an empty list disables the rule.
    pub subword_prefixes: Vec<String>,
    /// Trust the capture-time `token_class` tag when it is not `semantic`.
    pub use_token_class: bool,
}

fn owned(words: &[&str]) -> BTreeSet<String> {
    words.iter().map(|s| s.to_string()).collect()
}

impl IgnoreSpec {
    /// An ignore set that filters nothing.
    pub fn empty() -> Self {
        Self::default()
    }

    /// Default English lists for every category, with capture tags honoured.
    pub fn standard() -> Self {
        IgnoreSpec {
            control_tokens: owned(DEFAULT_CONTROL_TOKENS),
            boilerplate_phrases: owned(DEFAULT_BOILERPLATE),
            stopwords: owned(DEFAULT_STOPWORDS),
            filter_punctuation: true,
            subword_prefixes: DEFAULT_SUBWORD_PREFIXES.iter().map(|s| s.to_string()).collect(),
            use_token_class: true,
        }
    }

    /// Same rules as [`IgnoreSpec::standard`] but ignoring capture tags.
    pub fn text_only() -> Self {
        IgnoreSpec {
            use_token_class: false,
            ..Self::standard()
        }
    }

    /// Loads a TOML ignore-set file. Missing keys take their empty value.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("ignore spec: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("ignore spec serializes")
    }

    /// Applies the rules to one token.
    ///
    /// With `use_token_class`, a non-semantic tag wins outright. Otherwise text
    /// rules run in the order control, boilerplate, punctuation, stopword,
    /// subword.
    pub fn classify(&self, token: &TokenRecord) -> Verdict {
        if self.use_token_class {
            if let Some(cat) = FilterCategory::from_class(token.token_class) {
                return Verdict::Filtered(cat);
            }
        }
        self.classify_text(&token.token_text)
    }

    pub fn classify_text(&self, text: &str) -> Verdict {
        let trimmed = text.trim();
        if self.control_tokens.contains(trimmed) {
            return Verdict::Filtered(FilterCategory::Control);
        }
        if self.boilerplate_phrases.contains(trimmed) {
            return Verdict::Filtered(FilterCategory::Boilerplate);
        }
        let bare = trimmed.trim_start_matches(WORD_START_MARKERS);
        // Empty text carries no lexical information (untagged synthetic data).
        if self.filter_punctuation
            && !text.is_empty()
            && text
                .chars()
                .all(|c| c.is_whitespace() || c.is_ascii_punctuation() || is_unicode_punct(c) || WORD_START_MARKERS.contains(&c))
        {
            return Verdict::Filtered(FilterCategory::LexicalNoise);
        }
        if !self.stopwords.is_empty() && self.stopwords.contains(&bare.to_lowercase()) {
            return Verdict::Filtered(FilterCategory::Stopword);
        }
        if self
            .subword_prefixes
            .iter()
            .any(|p| !p.is_empty() && trimmed.starts_with(p.as_str()))
        {
            return Verdict::Filtered(FilterCategory::SubwordFragment);
        }
        Verdict::Kept
    }
}

fn is_unicode_punct(c: char) -> bool {
    matches!(
        c,
        '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{3000}'..='\u{303F}' | '\u{00A1}' | '\u{00A7}' | '\u{00AB}' | '\u{00B6}' | '\u{00B7}' | '\u{00BB}' | '\u{00BF}'
    )
}

pub fn classify_token(token: &TokenRecord, spec: &IgnoreSpec) -> Verdict {
    spec.classify(token)
}

/// Positions of the tokens in `step` that survive filtering, ascending.
pub fn valid_positions(step: &StepRecord, spec: &IgnoreSpec) -> Vec<usize> {
    let mut kept: Vec<usize> = step
        .tokens
        .iter()
        .filter(|t| spec.classify(t) == Verdict::Kept)
        .map(|t| t.position)
        .collect();
    kept.sort_unstable();
    kept
}

/// Entropies of the kept tokens of one step, in storage order.
pub fn kept_entropies(step: &StepRecord, spec: &IgnoreSpec) -> Vec<f64> {
    step.tokens
        .iter()
        .filter(|t| spec.classify(t) == Verdict::Kept)
        .map(|t| t.entropy)
        .collect()
}

/// Token counts per verdict across a whole dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FilterStats {
    pub kept: u64,
    pub filtered: BTreeMap<FilterCategory, u64>,
}

impl FilterStats {
    pub fn total(&self) -> u64 {
        self.kept + self.filtered.values().sum::<u64>()
    }
}

pub fn filter_stats(dataset: &Dataset, spec: &IgnoreSpec) -> FilterStats {
    let mut stats = FilterStats::default();
    for cat in FilterCategory::ALL {
        stats.filtered.insert(cat, 0);
    }
    for tok in dataset
        .trajectories
        .iter()
        .flat_map(|t| &t.steps)
        .flat_map(|s| &s.tokens)
    {
        match spec.classify(tok) {
            Verdict::Kept => stats.kept += 1,
            Verdict::Filtered(c) => *stats.filtered.entry(c).or_default() += 1,
        }
    }
    stats
}
