//! Two-stage training, AUROC evaluation, grid search and cross-set
//! evaluation.
//!
//! Stage 1 fits the reference generator on factual training samples. Stage 2
//! freezes it and trains the deviation detector on the combined objective,
//! updating the EMA margins from each batch's factual samples before the
//! parameter step. The epoch with the best validation AUROC is kept.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, DetectorPass, DeviationDetector, Margins, Objective, PreparedSample};
use crate::diffnet::AdamW;
use crate::error::{Error, Result};
use crate::evidence::{EvidenceSample, EvidenceTrajectory, EvidenceVector, DEFAULT_TOP_K, EVIDENCE_DIM};
use crate::filter::IgnoreSpec;
use crate::reference::{train_reference, ReferenceGenerator, Stage1Config, DEFAULT_GENERATOR_WIDTH, DEFAULT_TIME_DIM};
use crate::trajectory::{Dataset, Label, RawTrajectory};

/// Rank-based AUROC with mid-ranks for ties. Label `1` is the positive
/// (hallucinated) class; higher scores mean more likely positive.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            context: "auroc labels",
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::invalid("label", format!("expected 0 or 1, got {bad}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(format!("{n_pos} positive and {n_neg} negative labels")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average
        let mid = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of stage-2 epochs over which both lambdas ramp up linearly from 0.
    pub warmup_fraction: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 40,
            batch_size: 32,
            warmup_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 1400,
            val: 300,
            test: 300,
        }
    }
}

fn default_ignore() -> IgnoreSpec {
    IgnoreSpec::standard()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub top_k: usize,
    /// Standardize evidence per dimension with factual training statistics.
    pub standardize: bool,
    pub splits: SplitSizes,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub detector: DetectorConfig,
    #[serde(default = "default_ignore")]
    pub ignore: IgnoreSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            top_k: DEFAULT_TOP_K,
            standardize: false,
            splits: SplitSizes::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            detector: DetectorConfig::default(),
            ignore: IgnoreSpec::standard(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.detector.validate()?;
        let s2 = &self.stage2;
        if !(s2.lr > 0.0) || !(s2.weight_decay >= 0.0) || s2.epochs == 0 || s2.batch_size == 0 {
            return Err(Error::Config(format!("invalid stage-2 config {s2:?}")));
        }
        if !(0.0..=1.0).contains(&s2.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        let sp = &self.splits;
        if sp.train == 0 || sp.val == 0 || sp.test == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    /// Lambda multiplier for a 0-based stage-2 epoch under linear warmup.
    pub fn warmup_factor(&self, epoch: usize) -> f64 {
        let ramp = self.stage2.warmup_fraction * self.stage2.epochs as f64;
        if ramp <= 0.0 {
            1.0
        } else {
            (epoch as f64 / ramp).min(1.0)
        }
    }
}

/// Per-dimension affine standardization of evidence vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; EVIDENCE_DIM],
    pub std: [f64; EVIDENCE_DIM],
}

impl Standardizer {
    pub fn fit(trajectories: &[&EvidenceTrajectory]) -> Self {
        let mut mean = [0.0; EVIDENCE_DIM];
        let mut sq = [0.0; EVIDENCE_DIM];
        let mut n = 0.0;
        for v in trajectories.iter().flat_map(|t| &t.vectors) {
            let a = v.to_array();
            for d in 0..EVIDENCE_DIM {
                mean[d] += a[d];
                sq[d] += a[d] * a[d];
            }
            n += 1.0;
        }
        let mut std = [1.0; EVIDENCE_DIM];
        if n > 0.0 {
            for d in 0..EVIDENCE_DIM {
                mean[d] /= n;
                let var = (sq[d] / n - mean[d] * mean[d]).max(0.0);
                std[d] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
            }
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, traj: &EvidenceTrajectory) -> EvidenceTrajectory {
        EvidenceTrajectory {
            vectors: traj
                .vectors
                .iter()
                .map(|v| {
                    let a = v.to_array();
                    EvidenceVector::from_array(std::array::from_fn(|d| (a[d] - self.mean[d]) / self.std[d]))
                })
                .collect(),
            kept_counts: traj.kept_counts.clone(),
        }
    }
}

/// Frozen generator and detector plus everything needed to score new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub max_step: usize,
    pub d_q: usize,
    pub top_k: usize,
    pub ignore: IgnoreSpec,
    pub standardizer: Option<Standardizer>,
    pub generator: ReferenceGenerator,
    pub detector: DeviationDetector,
}

/// Detector output for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub id: String,
    pub label: Label,
    pub probability: f64,
    pub logit: f64,
    pub path_score: f64,
    pub rebound_score: f64,
    /// Attention weights, step `T` first.
    pub weights: Vec<f64>,
}

impl TrainedModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::io(path, e.into()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: TrainedModel = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        model.detector.config.validate()?;
        Ok(model)
    }

    fn prepare(&self, sample: &EvidenceSample) -> Result<PreparedSample> {
        let reference = self.generator.predict_trajectory(&sample.query, sample.evidence.max_step())?;
        prepare_with(&sample.evidence, &reference, self.standardizer.as_ref(), sample.label)
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.header.max_step != self.max_step {
            return Err(Error::Dimension {
                context: "dataset T",
                expected: self.max_step,
                actual: dataset.header.max_step,
            });
        }
        if dataset.header.d_q != self.d_q {
            return Err(Error::Dimension {
                context: "dataset d_q",
                expected: self.d_q,
                actual: dataset.header.d_q,
            });
        }
        Ok(())
    }

    pub fn score_trajectory(&self, raw: &RawTrajectory) -> Result<ScoreRecord> {
        let sample = EvidenceSample::from_raw(raw, &self.ignore, self.top_k);
        let prepared = self.prepare(&sample)?;
        let pass = self.detector.forward(&prepared)?;
        Ok(ScoreRecord {
            id: raw.id.clone(),
            label: raw.label,
            probability: pass.probability(),
            logit: pass.logit,
            path_score: pass.path_score,
            rebound_score: pass.rebound_score,
            weights: pass.weights,
        })
    }

    pub fn score_dataset(&self, dataset: &Dataset) -> Result<Vec<ScoreRecord>> {
        self.check_dataset(dataset)?;
        dataset
            .trajectories
            .par_iter()
            .map(|t| self.score_trajectory(t))
            .collect()
    }
}

fn label_value(label: Label) -> Option<f64> {
    label.as_binary().map(f64::from)
}

fn prepare_with(
    observed: &EvidenceTrajectory,
    reference: &EvidenceTrajectory,
    standardizer: Option<&Standardizer>,
    label: Label,
) -> Result<PreparedSample> {
    match standardizer {
        Some(s) => PreparedSample::new(&s.apply(observed), &s.apply(reference), label_value(label)),
        None => PreparedSample::new(observed, reference, label_value(label)),
    }
}

/// Scores with the given labels, requiring every sample to be labelled.
pub fn auroc_of(records: &[ScoreRecord]) -> Result<f64> {
    let labels = records
        .iter()
        .map(|r| {
            r.label
                .as_binary()
                .ok_or_else(|| Error::Unlabeled(format!("sample {} has no label", r.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = records.iter().map(|r| r.logit).collect();
    auroc(&scores, &labels)
}

/// AUROC of an already trained model on another labelled dataset. No
/// retraining; standardization, if any, uses the training statistics.
pub fn cross_eval(model: &TrainedModel, dataset: &Dataset) -> Result<f64> {
    if let Some(t) = dataset.trajectories.iter().find(|t| t.label == Label::Unlabeled) {
        return Err(Error::Unlabeled(format!(
            "evaluation needs labels; trajectory {} is unlabeled",
            t.id
        )));
    }
    auroc_of(&model.score_dataset(dataset)?)
}

/// Train/validation/test partition of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Seeded permutation of `0..n`, cut into consecutive train/val/test runs.
    pub fn new(sizes: SplitSizes, n: usize, seed: u64) -> Result<Self> {
        let need = sizes.train + sizes.val + sizes.test;
        if need > n {
            return Err(Error::Config(format!("splits need {need} samples, dataset has {n}")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5911));
        let val_end = sizes.train + sizes.val;
        Ok(Splits {
            train: idx[..sizes.train].to_vec(),
            val: idx[sizes.train..val_end].to_vec(),
            test: idx[val_end..need].to_vec(),
        })
    }

    pub fn subset(&self, dataset: &Dataset, which: &[usize]) -> Dataset {
        Dataset::new(dataset.header.clone(), which.iter().map(|&i| dataset.trajectories[i].clone()).collect())
    }
}

/// Metrics logged after each stage-2 epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cls: f64,
    pub path: f64,
    pub rebound: f64,
    pub total: f64,
    pub lambda_path: f64,
    pub lambda_rebound: f64,
    pub margin_path: f64,
    pub margin_rebound: f64,
    pub val_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// The fully resolved configuration this run used.
    pub config: TrainConfig,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub stage1_loss: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    /// 0-based stage-2 epoch with the highest validation AUROC.
    pub selected_epoch: usize,
    pub best_val_auroc: f64,
    pub test_auroc: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub const EPOCH_CSV_HEADER: &'static str =
        "epoch,cls,path,rebound,total,lambda_path,lambda_rebound,margin_path,margin_rebound,val_auroc";

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from(Self::EPOCH_CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.cls,
                e.path,
                e.rebound,
                e.total,
                e.lambda_path,
                e.lambda_rebound,
                e.margin_path,
                e.margin_rebound,
                e.val_auroc
            );
        }
        out
    }
}

pub struct TrainOutcome {
    pub model: TrainedModel,
    pub report: RunReport,
}

/// Evidence for every sample of a dataset, computed once.
pub struct EvidenceSet {
    pub max_step: usize,
    pub d_q: usize,
    pub samples: Vec<EvidenceSample>,
}

impl EvidenceSet {
    pub fn build(dataset: &Dataset, ignore: &IgnoreSpec, k: usize) -> Self {
        EvidenceSet {
            max_step: dataset.header.max_step,
            d_q: dataset.header.d_q,
            samples: dataset
                .trajectories
                .par_iter()
                .map(|t| EvidenceSample::from_raw(t, ignore, k))
                .collect(),
        }
    }
}

fn require_both_classes(name: &str, samples: &[&EvidenceSample]) -> Result<()> {
    let pos = samples.iter().filter(|s| s.label == Label::Hallucinated).count();
    let neg = samples.iter().filter(|s| s.label == Label::Factual).count();
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!(
            "{name} split has {neg} factual and {pos} hallucinated samples"
        )));
    }
    Ok(())
}

fn evaluate(detector: &DeviationDetector, samples: &[PreparedSample]) -> Result<f64> {
    let logits = samples
        .iter()
        .map(|s| detector.forward(s).map(|p| p.logit))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label.unwrap_or(0.0) as u8).collect();
    auroc(&logits, &labels)
}

/// Both training stages on the train split, model selection on validation,
/// final AUROC on test.
pub fn run_two_stage(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if let Some(t) = dataset.trajectories.iter().find(|t| t.label == Label::Unlabeled) {
        return Err(Error::Unlabeled(format!("training needs labels; trajectory {} is unlabeled", t.id)));
    }
    let evidence = EvidenceSet::build(dataset, &config.ignore, config.top_k);
    run_on_evidence(config, &evidence)
}

/// [`run_two_stage`] on precomputed evidence. `config.ignore` and
/// `config.top_k` are assumed to match how `evidence` was built.
pub fn run_on_evidence(config: &TrainConfig, evidence: &EvidenceSet) -> Result<TrainOutcome> {
    config.validate()?;
    let splits = Splits::new(config.splits, evidence.samples.len(), config.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &evidence.samples[i]).collect::<Vec<_>>();
    let (train, val, test) = (pick(&splits.train), pick(&splits.val), pick(&splits.test));
    if let Some(s) = train.iter().chain(&val).chain(&test).find(|s| s.label == Label::Unlabeled) {
        return Err(Error::Unlabeled(format!("training needs labels; sample {} is unlabeled", s.id)));
    }
    require_both_classes("train", &train)?;
    require_both_classes("validation", &val)?;
    require_both_classes("test", &test)?;

    // Stage 1
    let factual: Vec<EvidenceSample> = train
        .iter()
        .filter(|s| s.label == Label::Factual)
        .map(|s| (*s).clone())
        .collect();
    let mut generator = ReferenceGenerator::new(evidence.d_q, DEFAULT_TIME_DIM, DEFAULT_GENERATOR_WIDTH, config.seed.wrapping_add(1));
    let stage1_loss = train_reference(&mut generator, &factual, &config.stage1, config.seed.wrapping_add(2))?;

    let standardizer = config
        .standardize
        .then(|| Standardizer::fit(&factual.iter().map(|s| &s.evidence).collect::<Vec<_>>()));

    let prepare = |set: &[&EvidenceSample]| -> Result<Vec<PreparedSample>> {
        set.par_iter()
            .map(|s| {
                let reference = generator.predict_trajectory(&s.query, s.evidence.max_step())?;
                prepare_with(&s.evidence, &reference, standardizer.as_ref(), s.label)
            })
            .collect()
    };
    let mut train_ordered = train.clone();
    train_ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let train_prep = prepare(&train_ordered)?;
    let val_prep = prepare(&val)?;
    let test_prep = prepare(&test)?;

    // Stage 2
    let mut detector = DeviationDetector::new(config.detector, config.seed.wrapping_add(3))?;
    let mut opt = AdamW::new(config.stage2.lr, config.stage2.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(4));
    let mut order: Vec<usize> = (0..train_prep.len()).collect();
    let mut epochs = Vec::with_capacity(config.stage2.epochs);
    let mut best: Option<(usize, f64, DeviationDetector)> = None;

    for epoch in 0..config.stage2.epochs {
        let ramp = config.warmup_factor(epoch);
        let lambda_path = config.detector.lambda_path * ramp;
        let lambda_rebound = config.detector.lambda_rebound * ramp;
        order.shuffle(&mut rng);
        let mut sums = Objective::default();
        for chunk in order.chunks(config.stage2.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train_prep[i]).collect();
            let passes: Vec<DetectorPass> = batch.iter().map(|s| detector.forward(s)).collect::<Result<_>>()?;
            let (fp, fr): (Vec<f64>, Vec<f64>) = batch
                .iter()
                .zip(&passes)
                .filter(|(s, _)| s.label == Some(0.0))
                .map(|(_, p)| (p.path_score, p.rebound_score))
                .unzip();
            detector.update_margins(&fp, &fr);
            let mut grads = detector.zero_grads();
            let margins: Margins = detector.margins;
            let obj = detector.objective_from_passes(&batch, &passes, margins, lambda_path, lambda_rebound, Some(&mut grads))?;
            if !obj.total.is_finite() {
                return Err(Error::NonFinite("stage-2 loss"));
            }
            let w = batch.len() as f64;
            sums.cls += obj.cls * w;
            sums.path += obj.path * w;
            sums.rebound += obj.rebound * w;
            sums.total += obj.total * w;
            opt.step(&mut detector.params_mut(), &grads)?;
        }
        let n = train_prep.len() as f64;
        let val_auroc = evaluate(&detector, &val_prep)?;
        epochs.push(EpochRecord {
            epoch,
            cls: sums.cls / n,
            path: sums.path / n,
            rebound: sums.rebound / n,
            total: sums.total / n,
            lambda_path,
            lambda_rebound,
            margin_path: detector.margins.path,
            margin_rebound: detector.margins.rebound,
            val_auroc,
        });
        if best.as_ref().is_none_or(|(_, v, _)| val_auroc > *v) {
            best = Some((epoch, val_auroc, detector.clone()));
        }
    }
    let (selected_epoch, best_val_auroc, detector) = best.expect("at least one epoch");
    let test_auroc = evaluate(&detector, &test_prep)?;

    let report = RunReport {
        config: config.clone(),
        train_size: train.len(),
        val_size: val.len(),
        test_size: test.len(),
        stage1_loss,
        epochs,
        selected_epoch,
        best_val_auroc,
        test_auroc,
    };
    let model = TrainedModel {
        max_step: evidence.max_step,
        d_q: evidence.d_q,
        top_k: config.top_k,
        ignore: config.ignore.clone(),
        standardizer,
        generator,
        detector,
    };
    Ok(TrainOutcome { model, report })
}

/// Axes of a hyperparameter grid. An empty axis keeps the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub base: TrainConfig,
    pub stage1_lr: Vec<f64>,
    pub stage2_lr: Vec<f64>,
    pub stage1_wd: Vec<f64>,
    pub stage2_wd: Vec<f64>,
    pub lambda_path: Vec<f64>,
    pub lambda_rebound: Vec<f64>,
    pub warmup: Vec<f64>,
}

/// `0.0, 0.05, ..., 0.4`.
pub fn lambda_axis() -> Vec<f64> {
    (0..=8).map(|i| i as f64 * 0.05).collect()
}

impl GridSpec {
    /// The full published search space around `base`.
    pub fn full(base: TrainConfig) -> Self {
        GridSpec {
            base,
            stage1_lr: vec![3e-4, 1e-3],
            stage2_lr: vec![1e-4, 3e-4, 1e-3],
            stage1_wd: vec![0.0, 0.01, 0.05],
            stage2_wd: vec![0.0, 1e-4, 1e-3],
            lambda_path: lambda_axis(),
            lambda_rebound: lambda_axis(),
            warmup: vec![0.0, 0.3],
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("grid file: {e}")))
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    fn axis(values: &[f64], base: f64) -> Vec<f64> {
        if values.is_empty() {
            vec![base]
        } else {
            values.to_vec()
        }
    }

    /// Every configuration of the grid, last axis varying fastest.
    pub fn configs(&self) -> Vec<TrainConfig> {
        let b = &self.base;
        let mut out = vec![b.clone()];
        let mut expand = |values: Vec<f64>, set: &dyn Fn(&mut TrainConfig, f64)| {
            out = out
                .iter()
                .flat_map(|c| {
                    values.iter().map(move |&v| {
                        let mut c = c.clone();
                        set(&mut c, v);
                        c
                    })
                })
                .collect();
        };
        expand(Self::axis(&self.stage1_lr, b.stage1.lr), &|c, v| c.stage1.lr = v);
        expand(Self::axis(&self.stage2_lr, b.stage2.lr), &|c, v| c.stage2.lr = v);
        expand(Self::axis(&self.stage1_wd, b.stage1.weight_decay), &|c, v| c.stage1.weight_decay = v);
        expand(Self::axis(&self.stage2_wd, b.stage2.weight_decay), &|c, v| c.stage2.weight_decay = v);
        expand(Self::axis(&self.lambda_path, b.detector.lambda_path), &|c, v| c.detector.lambda_path = v);
        expand(Self::axis(&self.lambda_rebound, b.detector.lambda_rebound), &|c, v| {
            c.detector.lambda_rebound = v
        });
        expand(Self::axis(&self.warmup, b.stage2.warmup_fraction), &|c, v| c.stage2.warmup_fraction = v);
        out
    }

    pub fn len(&self) -> usize {
        let n = |v: &[f64]| v.len().max(1);
        n(&self.stage1_lr)
            * n(&self.stage2_lr)
            * n(&self.stage1_wd)
            * n(&self.stage2_wd)
            * n(&self.lambda_path)
            * n(&self.lambda_rebound)
            * n(&self.warmup)
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub struct GridResult {
    pub best_index: usize,
    pub best: TrainConfig,
    pub reports: Vec<RunReport>,
}

/// Exhaustive search. Runs execute in parallel but reports keep grid order.
///
/// Selection maximises validation AUROC; ties go to the smaller
/// `lambda_path + lambda_rebound`, then the lower stage-2 and stage-1
/// learning rates, then grid order.
pub fn grid_search(grid: &GridSpec, dataset: &Dataset) -> Result<GridResult> {
    let base = &grid.base;
    base.validate()?;
    let evidence = EvidenceSet::build(dataset, &base.ignore, base.top_k);
    let configs = grid.configs();
    let reports = configs
        .par_iter()
        .map(|c| run_on_evidence(c, &evidence).map(|o| o.report))
        .collect::<Result<Vec<_>>>()?;
    let key = |r: &RunReport| {
        (
            r.config.detector.lambda_path + r.config.detector.lambda_rebound,
            r.config.stage2.lr,
            r.config.stage1.lr,
        )
    };
    let mut best_index = 0;
    for (i, r) in reports.iter().enumerate().skip(1) {
        let b = &reports[best_index];
        let better = match r.best_val_auroc.total_cmp(&b.best_val_auroc) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => {
                let (ra, rb) = (key(r), key(b));
                (ra.0, ra.1, ra.2) < (rb.0, rb.1, rb.2)
            }
        };
        if better {
            best_index = i;
        }
    }
    Ok(GridResult {
        best_index,
        best: reports[best_index].config.clone(),
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_perfect_and_pairs() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn auroc_errors() {
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass(_))));
        assert!(auroc(&[0.1], &[0, 1]).is_err());
        assert!(auroc(&[f64::NAN, 0.2], &[0, 1]).is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        let s = Splits::new(SplitSizes { train: 5, val: 3, test: 2 }, 12, 7).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 10);
        assert!(Splits::new(SplitSizes { train: 5, val: 3, test: 5 }, 12, 7).is_err());
    }

    #[test]
    fn warmup_ramp() {
        let mut c = TrainConfig::default();
        c.stage2.epochs = 10;
        assert_eq!(c.warmup_factor(0), 1.0);
        c.stage2.warmup_fraction = 0.3;
        assert_eq!(c.warmup_factor(0), 0.0);
        assert!((c.warmup_factor(1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.warmup_factor(5), 1.0);
    }

    #[test]
    fn grid_size_is_axis_product() {
        let g = GridSpec::full(TrainConfig::default());
        assert_eq!(g.len(), 2 * 3 * 3 * 3 * 9 * 9 * 2);
        assert_eq!(g.configs().len(), g.len());
        let single = GridSpec::default();
        assert_eq!(single.configs(), vec![TrainConfig::default()]);
    }

    #[test]
    fn config_toml_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        let partial = TrainConfig::from_toml_str("seed = 9\n[stage2]\nepochs = 3\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.stage2.epochs, 3);
        assert_eq!(partial.stage2.lr, Stage2Config::default().lr);
        assert_eq!(partial.ignore, IgnoreSpec::standard());
    }

    #[test]
    fn standardizer_centers() {
        let a = EvidenceTrajectory::from_arrays(&[[1.0, 2.0, 3.0], [3.0, 2.0, 5.0]]);
        let s = Standardizer::fit(&[&a]);
        assert_eq!(s.mean, [2.0, 2.0, 4.0]);
        assert_eq!(s.std, [1.0, 1.0, 1.0]);
        let z = s.apply(&a);
        assert_eq!(z.vectors[0].to_array(), [-1.0, 0.0, -1.0]);
    }
}
