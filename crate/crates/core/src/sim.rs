//! Synthetic entropy-trajectory generator.
//!
//! Factual samples decay exponentially over the denoising run. Hallucinated
//! samples follow the same law until an onset late in the run, then either
//! stall at a plateau or rebound upward. A fraction of positions are
//! structural tokens whose entropies follow an unrelated random walk, so
//! unfiltered statistics blur the two classes together.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence::build_trajectory;
use crate::filter::{IgnoreSpec, DEFAULT_STOPWORDS};
use crate::trajectory::{Dataset, DatasetHeader, Label, RawTrajectory, StepRecord, TokenClass, TokenRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationMode {
    Stagnation,
    Rebound,
    /// Each hallucinated sample picks stagnation or rebound with equal odds.
    Mixed,
}

/// Parameters of one task regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSpec {
    pub decay_rate: f64,
    pub start_entropy: f64,
    /// Std of the per-token Gaussian noise on semantic tokens.
    pub noise_scale: f64,
    pub hallucination_mode: HallucinationMode,
    /// Fraction of the run, counted from the end, in which hallucinated
    /// samples diverge.
    pub rebound_onset_fraction: f64,
    /// Stagnation floor, and the total height of a rebound rise.
    pub plateau_level: f64,
    /// Expected share of structural (filterable) positions.
    pub padding_fraction: f64,
    pub query_cluster_center: Vec<f64>,
    /// Std of query embeddings around the cluster center.
    #[serde(default = "default_query_spread")]
    pub query_spread: f64,
    /// Per-step std of the random walk followed by structural-token entropy.
    #[serde(default = "default_padding_drift")]
    pub padding_drift: f64,
    /// Per-token std of structural-token entropy around the walk.
    #[serde(default = "default_padding_noise")]
    pub padding_noise: f64,
}

fn default_query_spread() -> f64 {
    0.1
}

fn default_padding_drift() -> f64 {
    0.3
}

fn default_padding_noise() -> f64 {
    0.8
}

impl RegimeSpec {
    pub fn validate(&self, d_q: usize) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("regime", m));
        if !(self.decay_rate > 0.0) {
            return bad(format!("decay_rate must be positive, got {}", self.decay_rate));
        }
        if !(self.start_entropy > 0.0) {
            return bad(format!("start_entropy must be positive, got {}", self.start_entropy));
        }
        if !(self.noise_scale >= 0.0) || !(self.padding_drift >= 0.0) || !(self.padding_noise >= 0.0) {
            return bad("noise scales must be non-negative".into());
        }
        if !(self.rebound_onset_fraction > 0.0 && self.rebound_onset_fraction < 1.0) {
            return bad(format!("rebound_onset_fraction must lie in (0, 1), got {}", self.rebound_onset_fraction));
        }
        if !(self.plateau_level >= 0.0) || self.plateau_level > self.start_entropy {
            return bad(format!(
                "plateau_level must lie in [0, start_entropy], got {}",
                self.plateau_level
            ));
        }
        if !(self.padding_fraction >= 0.0 && self.padding_fraction < 1.0) {
            return bad(format!("padding_fraction must lie in [0, 1), got {}", self.padding_fraction));
        }
        if self.query_cluster_center.len() != d_q {
            return Err(Error::Dimension {
                context: "query_cluster_center",
                expected: d_q,
                actual: self.query_cluster_center.len(),
            });
        }
        if !(self.query_spread >= 0.0) {
            return bad("query_spread must be non-negative".into());
        }
        Ok(())
    }

    /// Noise-free factual entropy at step `t`.
    pub fn decay(&self, t: usize, max_step: usize) -> f64 {
        let progress = 1.0 - t as f64 / max_step as f64;
        self.start_entropy * (-self.decay_rate * progress).exp()
    }

    /// Noise-free semantic-token entropy at step `t` for the given outcome.
    pub fn level(&self, t: usize, max_step: usize, outcome: Outcome) -> f64 {
        let decay = self.decay(t, max_step);
        let progress = 1.0 - t as f64 / max_step as f64;
        let onset = 1.0 - self.rebound_onset_fraction;
        if progress <= onset {
            return decay;
        }
        match outcome {
            Outcome::Factual => decay,
            Outcome::Stagnation => decay.max(self.plateau_level),
            Outcome::Rebound => decay + self.plateau_level * (progress - onset) / (1.0 - onset),
        }
    }
}

/// The generating law a sample was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Factual,
    Stagnation,
    Rebound,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Factual => "factual",
            Outcome::Stagnation => "stagnation",
            Outcome::Rebound => "rebound",
        }
    }
}

/// Everything needed to generate a dataset; the `simulate` regimes file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(rename = "T")]
    pub max_step: usize,
    #[serde(rename = "l")]
    pub seq_len: usize,
    pub d_q: usize,
    pub vocab_size: u64,
    pub factual: usize,
    pub hallucinated: usize,
    pub regimes: Vec<RegimeSpec>,
}

pub const DEFAULT_D_Q: usize = 8;

fn center(d_q: usize, hot: &[usize], value: f64) -> Vec<f64> {
    let mut c = vec![0.0; d_q];
    for &i in hot {
        c[i % d_q] = value;
    }
    c
}

impl SimConfig {
    /// Two regimes with distinct decay laws and query clusters, mixed
    /// hallucination modes, 70% structural padding, 1000 samples per class.
    pub fn default_suite() -> Self {
        let d_q = DEFAULT_D_Q;
        SimConfig {
            max_step: 32,
            seq_len: 32,
            d_q,
            vocab_size: 32_000,
            factual: 1000,
            hallucinated: 1000,
            regimes: vec![
                RegimeSpec {
                    decay_rate: 2.0,
                    start_entropy: 4.0,
                    noise_scale: 0.2,
                    hallucination_mode: HallucinationMode::Mixed,
                    rebound_onset_fraction: 0.25,
                    plateau_level: 0.9,
                    padding_fraction: 0.7,
                    query_cluster_center: center(d_q, &[0, 1, 2], 1.0),
                    query_spread: default_query_spread(),
                    padding_drift: default_padding_drift(),
                    padding_noise: default_padding_noise(),
                },
                RegimeSpec {
                    decay_rate: 1.2,
                    start_entropy: 2.5,
                    noise_scale: 0.2,
                    hallucination_mode: HallucinationMode::Mixed,
                    rebound_onset_fraction: 0.25,
                    plateau_level: 1.0,
                    padding_fraction: 0.7,
                    query_cluster_center: center(d_q, &[4, 5, 6], 1.0),
                    query_spread: default_query_spread(),
                    padding_drift: default_padding_drift(),
                    padding_noise: default_padding_noise(),
                },
            ],
        }
    }

    /// Same as [`SimConfig::default_suite`] with every regime in one mode.
    pub fn with_mode(mut self, mode: HallucinationMode) -> Self {
        for r in &mut self.regimes {
            r.hallucination_mode = mode;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_step < 4 {
            return Err(Error::invalid("sim config", "T must be at least 4"));
        }
        if self.seq_len < 1 || self.d_q < 1 || self.vocab_size < 2 {
            return Err(Error::invalid("sim config", "l, d_q must be positive and vocab_size >= 2"));
        }
        if self.factual < 1 || self.hallucinated < 1 {
            return Err(Error::invalid("sim config", "need at least one sample per class"));
        }
        if self.regimes.is_empty() {
            return Err(Error::invalid("sim config", "need at least one regime"));
        }
        for r in &self.regimes {
            r.validate(self.d_q)?;
            if r.start_entropy > (self.vocab_size as f64).ln() {
                return Err(Error::invalid("regime", "start_entropy exceeds ln(vocab_size)"));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("regimes file: {e}")))
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("sim config serializes")
    }
}

const ENTITY_WORDS: &[&str] = &[
    "Lima", "Paris", "Einstein", "1969", "Danube", "Kepler", "mitochondria", "Everest", "Tolstoy", "Andes",
    "photosynthesis", "Mozart", "Sahara", "Curie", "Byzantium", "oxygen", "Pacific", "Newton", "Nile", "Shakespeare",
];

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

struct SampleRng;

impl SampleRng {
    fn for_sample(seed: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index + 1);
        rng
    }
}

/// Generates one trajectory with its outcome.
fn simulate_one(config: &SimConfig, regime_idx: usize, outcome: Outcome, index: usize, rng: &mut ChaCha8Rng) -> RawTrajectory {
    let regime = &config.regimes[regime_idx];
    let max_step = config.max_step;
    let cap = (config.vocab_size as f64).ln();
    let clip = |x: f64| x.clamp(0.0, cap);

    let query_embedding: Vec<f64> = regime
        .query_cluster_center
        .iter()
        .map(|c| c + regime.query_spread * gauss(rng))
        .collect();

    // Position classes are fixed for the whole run.
    let mut classes: Vec<TokenClass> = (0..config.seq_len)
        .map(|_| {
            if rng.random::<f64>() < regime.padding_fraction {
                let r: f64 = rng.random();
                if r < 0.6 {
                    TokenClass::Control
                } else if r < 0.85 {
                    TokenClass::Stopword
                } else {
                    TokenClass::Boilerplate
                }
            } else {
                TokenClass::Semantic
            }
        })
        .collect();
    if !classes.contains(&TokenClass::Semantic) {
        classes[0] = TokenClass::Semantic;
    }
    let texts: Vec<String> = classes
        .iter()
        .map(|c| match c {
            TokenClass::Control => "<|endoftext|>".to_string(),
            TokenClass::Boilerplate => "Answer:".to_string(),
            TokenClass::Stopword => DEFAULT_STOPWORDS.choose(rng).unwrap().to_string(),
            _ => ENTITY_WORDS.choose(rng).unwrap().to_string(),
        })
        .collect();

    let mut pad_level = regime.start_entropy * rng.random_range(0.3..1.2);
    let mut steps = Vec::with_capacity(max_step + 1);
    for t in (0..=max_step).rev() {
        let level = regime.level(t, max_step, outcome);
        let tokens = classes
            .iter()
            .zip(&texts)
            .enumerate()
            .map(|(i, (&class, text))| {
                let entropy = if class == TokenClass::Semantic {
                    clip(level + regime.noise_scale * gauss(rng))
                } else {
                    clip(pad_level + regime.padding_noise * gauss(rng))
                };
                TokenRecord {
                    position: i + 1,
                    token_text: text.clone(),
                    token_class: class,
                    entropy,
                }
            })
            .collect();
        steps.push(StepRecord { step: t, tokens });
        pad_level = clip(pad_level + regime.padding_drift * gauss(rng));
    }

    let response: Vec<&str> = texts
        .iter()
        .zip(&classes)
        .filter(|(_, c)| **c == TokenClass::Semantic)
        .map(|(t, _)| t.as_str())
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert("source".into(), "synthetic".into());
    meta.insert("regime".into(), regime_idx.to_string());
    meta.insert("outcome".into(), outcome.as_str().into());
    meta.insert("capture_point".into(), "synthetic".into());
    RawTrajectory {
        id: format!("sim-{index:06}"),
        question: format!("synthetic question {index} (regime {regime_idx})"),
        response: response.join(" "),
        query_embedding,
        label: if outcome == Outcome::Factual {
            Label::Factual
        } else {
            Label::Hallucinated
        },
        steps,
        meta,
    }
}

/// Generates a labelled dataset. The same seed always yields the same data.
pub fn simulate_dataset(config: &SimConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let total = config.factual + config.hallucinated;
    let mut plan_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<bool> = std::iter::repeat_n(false, config.factual)
        .chain(std::iter::repeat_n(true, config.hallucinated))
        .collect();
    labels.shuffle(&mut plan_rng);

    let trajectories = labels
        .iter()
        .enumerate()
        .map(|(i, &hallucinated)| {
            let mut rng = SampleRng::for_sample(seed, i as u64);
            let regime_idx = rng.random_range(0..config.regimes.len());
            let outcome = if !hallucinated {
                Outcome::Factual
            } else {
                match config.regimes[regime_idx].hallucination_mode {
                    HallucinationMode::Stagnation => Outcome::Stagnation,
                    HallucinationMode::Rebound => Outcome::Rebound,
                    HallucinationMode::Mixed => {
                        if rng.random::<bool>() {
                            Outcome::Stagnation
                        } else {
                            Outcome::Rebound
                        }
                    }
                }
            };
            simulate_one(config, regime_idx, outcome, i, &mut rng)
        })
        .collect();

    let mut header = DatasetHeader::new(config.d_q, config.max_step, config.seq_len);
    header.vocab_size = Some(config.vocab_size);
    let dataset = Dataset::new(header, trajectories);
    debug_assert!(total == dataset.len());
    Ok(dataset)
}

/// Per-class mean and standard deviation of each evidence component over t.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassCurve {
    pub label: Label,
    pub count: usize,
    /// Descending in t, like the trajectories.
    pub steps: Vec<usize>,
    pub mean: Vec<[f64; 3]>,
    pub std: Vec<[f64; 3]>,
}

pub fn class_curves(dataset: &Dataset, spec: &IgnoreSpec, k: usize) -> Vec<ClassCurve> {
    let mut curves = Vec::new();
    for label in [Label::Factual, Label::Hallucinated, Label::Unlabeled] {
        let evid: Vec<_> = dataset
            .trajectories
            .iter()
            .filter(|t| t.label == label)
            .map(|t| build_trajectory(t, spec, k))
            .collect();
        if evid.is_empty() {
            continue;
        }
        let len = evid[0].len();
        let n = evid.len() as f64;
        let mut mean = vec![[0.0; 3]; len];
        let mut std = vec![[0.0; 3]; len];
        for e in &evid {
            for (j, v) in e.vectors.iter().enumerate() {
                for (d, x) in v.to_array().iter().enumerate() {
                    mean[j][d] += x / n;
                }
            }
        }
        for e in &evid {
            for (j, v) in e.vectors.iter().enumerate() {
                for (d, x) in v.to_array().iter().enumerate() {
                    std[j][d] += (x - mean[j][d]).powi(2) / n;
                }
            }
        }
        for row in &mut std {
            for s in row.iter_mut() {
                *s = s.sqrt();
            }
        }
        curves.push(ClassCurve {
            label,
            count: evid.len(),
            steps: (0..len).rev().collect(),
            mean,
            std,
        });
    }
    curves
}

pub const PLOT_CSV_HEADER: &str = "label,t,count,mean_avg,mean_std,max_avg,max_std,topk_avg,topk_std";

pub fn plot_csv_string(dataset: &Dataset, spec: &IgnoreSpec, k: usize) -> String {
    let mut out = String::from(PLOT_CSV_HEADER);
    out.push('\n');
    for curve in class_curves(dataset, spec, k) {
        let label = match curve.label {
            Label::Factual => "factual",
            Label::Hallucinated => "hallucinated",
            Label::Unlabeled => "unlabeled",
        };
        for (j, &t) in curve.steps.iter().enumerate() {
            let m = curve.mean[j];
            let s = curve.std[j];
            let _ = writeln!(
                out,
                "{label},{t},{},{},{},{},{},{},{}",
                curve.count, m[0], s[0], m[1], s[1], m[2], s[2]
            );
        }
    }
    out
}

/// Writes per-class mean/std evidence curves as CSV.
pub fn emit_plot_csv(dataset: &Dataset, spec: &IgnoreSpec, k: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, plot_csv_string(dataset, spec, k)).map_err(|e| Error::io(path, e))
}
