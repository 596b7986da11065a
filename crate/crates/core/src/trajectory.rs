//! Raw uncertainty trajectories and the line-delimited dataset format.
//!
//! A dataset file is JSON Lines: the first line is a [`DatasetHeader`], every
//! following line one [`RawTrajectory`]. Files whose first two bytes are the
//! gzip magic are decompressed transparently; writing to a path ending in
//! `.gz` compresses. Entropies are in nats. See `docs/FORMAT.md`.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "1";

/// Slack allowed above `ln(vocab_size)` for rounding in captured entropies.
const ENTROPY_BOUND_SLACK: f64 = 1e-9;

/// Shannon entropy in nats of a categorical distribution.
///
/// Zero-probability entries contribute nothing. The input is not renormalized.
pub fn token_entropy(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    // -0.0 for a point mass
    h.max(0.0)
}

/// Entropy of `softmax(logits)`, computed without forming tiny probabilities.
pub fn entropy_from_logits(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return 0.0;
    }
    let mut z = 0.0;
    let mut weighted = 0.0;
    for &x in logits {
        let e = (x - max).exp();
        z += e;
        weighted += e * (x - max);
    }
    (z.ln() - weighted / z).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Control,
    LexicalNoise,
    Boilerplate,
    Stopword,
    SubwordFragment,
    Semantic,
}

impl TokenClass {
    pub const ALL: [TokenClass; 6] = [
        TokenClass::Control,
        TokenClass::LexicalNoise,
        TokenClass::Boilerplate,
        TokenClass::Stopword,
        TokenClass::SubwordFragment,
        TokenClass::Semantic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenClass::Control => "control",
            TokenClass::LexicalNoise => "lexical_noise",
            TokenClass::Boilerplate => "boilerplate",
            TokenClass::Stopword => "stopword",
            TokenClass::SubwordFragment => "subword_fragment",
            TokenClass::Semantic => "semantic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    /// 1-based position in the generated sequence.
    pub position: usize,
    #[serde(default)]
    pub token_text: String,
    pub token_class: TokenClass,
    /// Entropy in nats.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub tokens: Vec<TokenRecord>,
}

/// Ground-truth label. Serialized as `0`, `1`, or `null`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Label {
    Factual,
    Hallucinated,
    #[default]
    Unlabeled,
}

impl Label {
    pub fn as_binary(self) -> Option<u8> {
        match self {
            Label::Factual => Some(0),
            Label::Hallucinated => Some(1),
            Label::Unlabeled => None,
        }
    }

    pub fn from_binary(y: u8) -> Option<Self> {
        match y {
            0 => Some(Label::Factual),
            1 => Some(Label::Hallucinated),
            _ => None,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.as_binary().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Option::<u8>::deserialize(d)? {
            None => Ok(Label::Unlabeled),
            Some(y) => Label::from_binary(y)
                .ok_or_else(|| serde::de::Error::custom(format!("label must be 0, 1 or null, got {y}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrajectory {
    pub id: String,
    #[serde(default)]
    pub question: String,
    #[serde(default)]
    pub response: String,
    pub query_embedding: Vec<f64>,
    #[serde(default)]
    pub label: Label,
    /// Stored from step `T` down to step `0`.
    pub steps: Vec<StepRecord>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub d_q: usize,
    /// Largest denoising step index; trajectories hold `T + 1` steps.
    #[serde(rename = "T")]
    pub max_step: usize,
    /// Generated sequence length.
    #[serde(rename = "l")]
    pub seq_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<u64>,
    pub schema_version: String,
}

impl DatasetHeader {
    pub fn new(d_q: usize, max_step: usize, seq_len: usize) -> Self {
        DatasetHeader {
            d_q,
            max_step,
            seq_len,
            vocab_size: None,
            schema_version: SCHEMA_VERSION.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_q == 0 {
            return Err(Error::invalid("header", "d_q must be positive"));
        }
        if self.max_step < 1 {
            return Err(Error::invalid("header", "T must be at least 1"));
        }
        if self.seq_len < 1 {
            return Err(Error::invalid("header", "l must be at least 1"));
        }
        if self.vocab_size == Some(0) {
            return Err(Error::invalid("header", "vocab_size must be positive"));
        }
        Ok(())
    }

    /// Upper entropy bound implied by the vocabulary size, if declared.
    pub fn max_entropy(&self) -> Option<f64> {
        self.vocab_size.map(|v| (v as f64).ln())
    }
}

impl RawTrajectory {
    /// Checks this trajectory against the dataset header.
    pub fn validate(&self, header: &DatasetHeader) -> Result<()> {
        let what = || format!("trajectory {}", self.id);
        if self.query_embedding.len() != header.d_q {
            return Err(Error::Dimension {
                context: "query_embedding",
                expected: header.d_q,
                actual: self.query_embedding.len(),
            });
        }
        if self.query_embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(what(), "query_embedding has non-finite values"));
        }
        if self.steps.windows(2).any(|w| w[0].step <= w[1].step) {
            return Err(Error::invalid(what(), "steps not descending"));
        }
        if self.steps.len() != header.max_step + 1
            || self.steps.first().map(|s| s.step) != Some(header.max_step)
        {
            return Err(Error::invalid(
                what(),
                format!(
                    "expected exactly one step per t in [0, {}], found {} steps",
                    header.max_step,
                    self.steps.len()
                ),
            ));
        }
        let bound = header.max_entropy();
        let mut seen = HashSet::with_capacity(header.seq_len);
        for step in &self.steps {
            if step.tokens.len() != header.seq_len {
                return Err(Error::invalid(
                    what(),
                    format!(
                        "step {} has {} tokens, header declares l = {}",
                        step.step,
                        step.tokens.len(),
                        header.seq_len
                    ),
                ));
            }
            seen.clear();
            for tok in &step.tokens {
                if tok.position < 1 || tok.position > header.seq_len {
                    return Err(Error::invalid(
                        what(),
                        format!("step {}: position {} outside [1, {}]", step.step, tok.position, header.seq_len),
                    ));
                }
                if !seen.insert(tok.position) {
                    return Err(Error::invalid(
                        what(),
                        format!("step {}: duplicate position {}", step.step, tok.position),
                    ));
                }
                if !tok.entropy.is_finite() || tok.entropy < 0.0 {
                    return Err(Error::invalid(
                        what(),
                        format!("step {}: entropy {} is negative or non-finite", step.step, tok.entropy),
                    ));
                }
                if let Some(b) = bound {
                    if tok.entropy > b + ENTROPY_BOUND_SLACK {
                        return Err(Error::invalid(
                            what(),
                            format!("step {}: entropy {} exceeds ln(vocab_size) = {b}", step.step, tok.entropy),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn max_step(&self) -> usize {
        self.steps.first().map_or(0, |s| s.step)
    }
}

/// A header plus its trajectories, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<RawTrajectory>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, trajectories: Vec<RawTrajectory>) -> Self {
        Dataset { header, trajectories }
    }

    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        self.trajectories.iter().try_for_each(|t| t.validate(&self.header))
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Reads and validates a dataset file. Errors carry the 1-based line number.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = open_maybe_gz(path)?;
    let mut lines = reader.lines().enumerate();

    let header: DatasetHeader = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: 1,
                message: format!("bad header: {e}"),
            })?
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header record".into(),
            })
        }
    };
    header.validate().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;

    let mut trajectories = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let traj: RawTrajectory = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        traj.validate(&header).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        trajectories.push(traj);
    }
    Ok(Dataset { header, trajectories })
}

/// Validates then writes a dataset. A `.gz` extension selects gzip output.
pub fn write_dataset(header: &DatasetHeader, trajectories: &[RawTrajectory], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    header.validate()?;
    for t in trajectories {
        t.validate(header)?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let mut out: Box<dyn Write> = if gz {
        Box::new(BufWriter::new(GzEncoder::new(file, Compression::default())))
    } else {
        Box::new(BufWriter::new(file))
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut out, header).map_err(|e| Error::io(path, e.into()))?;
    out.write_all(b"\n").map_err(io)?;
    for t in trajectories {
        serde_json::to_writer(&mut out, t).map_err(|e| Error::io(path, e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)?;
    Ok(())
}

impl Dataset {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_dataset(path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_dataset(&self.header, &self.trajectories, path)
    }
}
