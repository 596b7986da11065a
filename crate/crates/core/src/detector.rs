//! Deviation-based detector.
//!
//! Every step gets a composite feature `[observed; reference; velocity]`,
//! which a shared projector maps to a hidden state. An additive attention
//! scorer turns the hidden states into step weights; the weighted pool feeds a
//! small classifier head producing a hallucination logit. The same weights
//! drive the path-deviation and rebound scores that the hinge regularizers
//! act on, with margins tracked by an EMA of factual-sample quantiles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{binary_ce, sigmoid, Activation, Dense, Mlp, MlpTrace};
use crate::error::{Error, Result};
use crate::evidence::{EvidenceTrajectory, EvidenceVector, EVIDENCE_DIM};

pub const FEATURE_DIM: usize = 3 * EVIDENCE_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeFeature {
    pub observed: EvidenceVector,
    pub reference: EvidenceVector,
    /// `a_{t-1} - a_t`; zero at the final step.
    pub velocity: [f64; EVIDENCE_DIM],
}

impl CompositeFeature {
    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        let o = self.observed.to_array();
        let r = self.reference.to_array();
        let v = self.velocity;
        [o[0], o[1], o[2], r[0], r[1], r[2], v[0], v[1], v[2]]
    }
}

/// Composite features in storage order (step `T` first).
pub fn composite_features(observed: &EvidenceTrajectory, reference: &EvidenceTrajectory) -> Result<Vec<CompositeFeature>> {
    if observed.len() != reference.len() {
        return Err(Error::Dimension {
            context: "reference trajectory length",
            expected: observed.len(),
            actual: reference.len(),
        });
    }
    let n = observed.len();
    Ok((0..n)
        .map(|j| {
            let a = observed.vectors[j].to_array();
            let velocity = if j + 1 < n {
                let next = observed.vectors[j + 1].to_array();
                [next[0] - a[0], next[1] - a[1], next[2] - a[2]]
            } else {
                [0.0; EVIDENCE_DIM]
            };
            CompositeFeature {
                observed: observed.vectors[j],
                reference: reference.vectors[j],
                velocity,
            }
        })
        .collect())
}

/// Per-step L1 gap between observed and reference evidence.
pub fn path_gaps(features: &[CompositeFeature]) -> Vec<f64> {
    features
        .iter()
        .map(|f| {
            let a = f.observed.to_array();
            let r = f.reference.to_array();
            a.iter().zip(&r).map(|(x, y)| (x - y).abs()).sum()
        })
        .collect()
}

/// Per-step squared positive rises `sum_d max(0, a_{t-1,d} - a_{t,d})^2`;
/// zero at step 0.
pub fn rebound_terms(observed: &EvidenceTrajectory) -> Vec<f64> {
    let n = observed.len();
    (0..n)
        .map(|j| {
            if j + 1 >= n {
                return 0.0;
            }
            let a = observed.vectors[j].to_array();
            let next = observed.vectors[j + 1].to_array();
            a.iter().zip(&next).map(|(cur, nx)| (nx - cur).max(0.0).powi(2)).sum()
        })
        .collect()
}

fn check_weights(n: usize, weights: &[f64]) -> Result<()> {
    if weights.len() != n {
        return Err(Error::Dimension {
            context: "attention weights",
            expected: n,
            actual: weights.len(),
        });
    }
    Ok(())
}

/// Attention-weighted cumulative L1 deviation from the reference.
pub fn path_score(features: &[CompositeFeature], weights: &[f64]) -> Result<f64> {
    check_weights(features.len(), weights)?;
    Ok(path_gaps(features).iter().zip(weights).map(|(d, w)| d * w).sum())
}

/// Attention-weighted squared uncertainty rises along the denoising direction.
pub fn rebound_score(observed: &EvidenceTrajectory, weights: &[f64]) -> Result<f64> {
    check_weights(observed.len(), weights)?;
    Ok(rebound_terms(observed).iter().zip(weights).map(|(r, w)| r * w).sum())
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Linear-interpolation empirical quantile of unsorted data.
pub fn quantile(values: &[f64], level: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * level.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// `(1 - y) s + y max(0, m - s)` and its derivative in `s`. The margin is a
/// constant here.
pub fn hinge(score: f64, margin: f64, label: f64) -> (f64, f64) {
    let slack = margin - score;
    let (h, dh) = if slack > 0.0 { (slack, -1.0) } else { (0.0, 0.0) };
    ((1.0 - label) * score + label * h, (1.0 - label) + label * dh)
}

pub fn total_loss(cls: f64, path: f64, rebound: f64, lambda_path: f64, lambda_rebound: f64) -> f64 {
    cls + lambda_path * path + lambda_rebound * rebound
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub hidden: usize,
    pub attn_dim: usize,
    pub head_hidden: usize,
    pub lambda_path: f64,
    pub lambda_rebound: f64,
    pub beta: f64,
    pub quantile_level: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            hidden: 64,
            attn_dim: 32,
            head_hidden: 32,
            lambda_path: 0.2,
            lambda_rebound: 0.2,
            beta: 0.1,
            quantile_level: 0.9,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("detector: {m}")));
        if self.hidden == 0 || self.attn_dim == 0 || self.head_hidden == 0 {
            return bad("layer widths must be positive");
        }
        if !(self.lambda_path >= 0.0) || !(self.lambda_rebound >= 0.0) {
            return bad("lambda weights must be non-negative");
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta must lie in (0, 1]");
        }
        if !(self.quantile_level > 0.0 && self.quantile_level < 1.0) {
            return bad("quantile level must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Margins {
    pub path: f64,
    pub rebound: f64,
}

/// `u_t = w . tanh(U z_t + b_u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionScorer {
    pub projection: Dense,
    pub w: Vec<f64>,
}

impl AttentionScorer {
    fn score_with(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let (pre, g) = self.projection.forward(z);
        let u = g.iter().zip(&self.w).map(|(a, b)| a * b).sum();
        (pre, g, u)
    }

    pub fn score(&self, z: &[f64]) -> f64 {
        self.score_with(z).2
    }

    pub fn weights(&self, hidden: &[Vec<f64>]) -> Vec<f64> {
        softmax(&hidden.iter().map(|z| self.score(z)).collect::<Vec<_>>())
    }
}

/// Inputs the detector needs for one sample, computed once against the
/// frozen generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub features: Vec<[f64; FEATURE_DIM]>,
    pub gaps: Vec<f64>,
    pub rebounds: Vec<f64>,
    /// `Some(0.0)` factual, `Some(1.0)` hallucinated.
    pub label: Option<f64>,
}

impl PreparedSample {
    pub fn new(observed: &EvidenceTrajectory, reference: &EvidenceTrajectory, label: Option<f64>) -> Result<Self> {
        let feats = composite_features(observed, reference)?;
        Ok(PreparedSample {
            gaps: path_gaps(&feats),
            rebounds: rebound_terms(observed),
            features: feats.iter().map(|f| f.to_array()).collect(),
            label,
        })
    }
}

/// Intermediate values of one detector forward pass.
#[derive(Debug, Clone)]
pub struct DetectorPass {
    projector: Vec<MlpTrace>,
    scorer_pre: Vec<Vec<f64>>,
    scorer_out: Vec<Vec<f64>>,
    head: MlpTrace,
    pub weights: Vec<f64>,
    pub pooled: Vec<f64>,
    pub logit: f64,
    pub path_score: f64,
    pub rebound_score: f64,
}

impl DetectorPass {
    pub fn hidden(&self) -> Vec<Vec<f64>> {
        self.projector.iter().map(|t| t.output().to_vec()).collect()
    }

    pub fn probability(&self) -> f64 {
        sigmoid(self.logit)
    }
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Objective {
    pub cls: f64,
    pub path: f64,
    pub rebound: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationDetector {
    pub config: DetectorConfig,
    pub projector: Mlp,
    pub scorer: AttentionScorer,
    pub head: Mlp,
    pub margins: Margins,
}

impl DeviationDetector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projector = Mlp::new(&[FEATURE_DIM, config.hidden], Activation::Relu, Activation::Relu, &mut rng);
        let projection = Dense::init(config.hidden, config.attn_dim, Activation::Tanh, &mut rng);
        let limit = (3.0 / config.attn_dim as f64).sqrt();
        let w = (0..config.attn_dim)
            .map(|_| rand::Rng::random_range(&mut rng, -limit..limit))
            .collect();
        let head = Mlp::new(
            &[config.hidden, config.head_hidden, 1],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        );
        Ok(DeviationDetector {
            config,
            projector,
            scorer: AttentionScorer { projection, w },
            head,
            margins: Margins::default(),
        })
    }

    pub fn hidden_states(&self, features: &[CompositeFeature]) -> Result<Vec<Vec<f64>>> {
        features.iter().map(|f| self.projector.forward(&f.to_array())).collect()
    }

    /// Returns `(logit, attention weights, hidden states)`.
    pub fn attend_and_classify(&self, features: &[CompositeFeature]) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
        if features.is_empty() {
            return Err(Error::Dimension {
                context: "feature sequence",
                expected: 1,
                actual: 0,
            });
        }
        let z = self.hidden_states(features)?;
        let weights = self.scorer.weights(&z);
        let pooled = pool(&z, &weights);
        let logit = self.head.forward(&pooled)?[0];
        Ok((logit, weights, z))
    }

    pub fn forward(&self, sample: &PreparedSample) -> Result<DetectorPass> {
        if sample.features.is_empty() {
            return Err(Error::Dimension {
                context: "feature sequence",
                expected: 1,
                actual: 0,
            });
        }
        let n = sample.features.len();
        let mut projector = Vec::with_capacity(n);
        let mut scorer_pre = Vec::with_capacity(n);
        let mut scorer_out = Vec::with_capacity(n);
        let mut u = Vec::with_capacity(n);
        for x in &sample.features {
            let trace = self.projector.forward_trace(x)?;
            let (pre, g, score) = self.scorer.score_with(trace.output());
            projector.push(trace);
            scorer_pre.push(pre);
            scorer_out.push(g);
            u.push(score);
        }
        let weights = softmax(&u);
        let mut pooled = vec![0.0; self.config.hidden];
        for (trace, w) in projector.iter().zip(&weights) {
            for (p, z) in pooled.iter_mut().zip(trace.output()) {
                *p += w * z;
            }
        }
        let head = self.head.forward_trace(&pooled)?;
        let logit = head.output()[0];
        let path_score = sample.gaps.iter().zip(&weights).map(|(d, w)| d * w).sum();
        let rebound_score = sample.rebounds.iter().zip(&weights).map(|(r, w)| r * w).sum();
        Ok(DetectorPass {
            projector,
            scorer_pre,
            scorer_out,
            head,
            weights,
            pooled,
            logit,
            path_score,
            rebound_score,
        })
    }

    /// Zeroed gradient buffers in [`DeviationDetector::params_mut`] order.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        let mut g = self.projector.zero_grads();
        g.push(vec![0.0; self.scorer.projection.weights.len()]);
        g.push(vec![0.0; self.scorer.projection.bias.len()]);
        g.push(vec![0.0; self.scorer.w.len()]);
        g.extend(self.head.zero_grads());
        g
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.projector.params_mut();
        p.push(&mut self.scorer.projection.weights);
        p.push(&mut self.scorer.projection.bias);
        p.push(&mut self.scorer.w);
        p.extend(self.head.params_mut());
        p
    }

    /// Backprop of `dlogit * logit + dpath * s_path + dreb * s_reb` for one pass.
    pub fn backward(
        &self,
        sample: &PreparedSample,
        pass: &DetectorPass,
        dlogit: f64,
        dpath: f64,
        drebound: f64,
        grads: &mut [Vec<f64>],
    ) {
        let np = 2 * self.projector.layers.len();
        let (proj_g, rest) = grads.split_at_mut(np);
        let (scorer_g, head_g) = rest.split_at_mut(3);

        let dpooled = self.head.backward_trace(&pass.head, &[dlogit], head_g);

        let n = pass.weights.len();
        let mut dweights = Vec::with_capacity(n);
        for j in 0..n {
            let z = pass.projector[j].output();
            let dp: f64 = dpooled.iter().zip(z).map(|(a, b)| a * b).sum();
            dweights.push(dp + dpath * sample.gaps[j] + drebound * sample.rebounds[j]);
        }
        let mean: f64 = pass.weights.iter().zip(&dweights).map(|(w, d)| w * d).sum();

        let (gu, rest) = scorer_g.split_at_mut(1);
        let (gb, gw) = rest.split_at_mut(1);
        for j in 0..n {
            let du = pass.weights[j] * (dweights[j] - mean);
            let z = pass.projector[j].output();
            let g = &pass.scorer_out[j];
            for (acc, gv) in gw[0].iter_mut().zip(g) {
                *acc += du * gv;
            }
            let grad_g: Vec<f64> = self.scorer.w.iter().map(|w| du * w).collect();
            let mut dz = self
                .scorer
                .projection
                .backward(z, &pass.scorer_pre[j], g, &grad_g, &mut gu[0], &mut gb[0]);
            for (d, p) in dz.iter_mut().zip(&dpooled) {
                *d += pass.weights[j] * p;
            }
            self.projector.backward_trace(&pass.projector[j], &dz, proj_g);
        }
    }

    /// Batch-mean objective for already computed passes, with the margins
    /// held constant. Gradients are accumulated when `grads` is given.
    pub fn objective_from_passes(
        &self,
        batch: &[&PreparedSample],
        passes: &[DetectorPass],
        margins: Margins,
        lambda_path: f64,
        lambda_rebound: f64,
        mut grads: Option<&mut [Vec<f64>]>,
    ) -> Result<Objective> {
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut obj = Objective::default();
        for (sample, pass) in batch.iter().zip(passes) {
            let y = sample
                .label
                .ok_or_else(|| Error::Unlabeled("detector objective needs labelled samples".into()))?;
            let (cls, dcls) = binary_ce(pass.logit, y);
            let (lp, dlp) = hinge(pass.path_score, margins.path, y);
            let (lr, dlr) = hinge(pass.rebound_score, margins.rebound, y);
            obj.cls += cls * scale;
            obj.path += lp * scale;
            obj.rebound += lr * scale;
            if let Some(g) = grads.as_deref_mut() {
                self.backward(
                    sample,
                    pass,
                    dcls * scale,
                    lambda_path * dlp * scale,
                    lambda_rebound * dlr * scale,
                    g,
                );
            }
        }
        obj.total = total_loss(obj.cls, obj.path, obj.rebound, lambda_path, lambda_rebound);
        Ok(obj)
    }

    /// Objective and gradients for a batch at fixed margins.
    pub fn objective(
        &self,
        batch: &[&PreparedSample],
        margins: Margins,
        lambda_path: f64,
        lambda_rebound: f64,
    ) -> Result<(Objective, Vec<Vec<f64>>)> {
        let passes = batch.iter().map(|s| self.forward(s)).collect::<Result<Vec<_>>>()?;
        let mut grads = self.zero_grads();
        let obj = self.objective_from_passes(batch, &passes, margins, lambda_path, lambda_rebound, Some(&mut grads))?;
        Ok((obj, grads))
    }

    /// EMA update of both margins from factual-sample scores. No-op when the
    /// batch has no factual samples.
    pub fn update_margins(&mut self, factual_path: &[f64], factual_rebound: &[f64]) {
        let beta = self.config.beta;
        let q = self.config.quantile_level;
        if let Some(m) = quantile(factual_path, q) {
            self.margins.path = (1.0 - beta) * self.margins.path + beta * m;
        }
        if let Some(m) = quantile(factual_rebound, q) {
            self.margins.rebound = (1.0 - beta) * self.margins.rebound + beta * m;
        }
    }

    pub fn hinge_regularizers(&self, path: f64, rebound: f64, label: f64) -> (f64, f64) {
        (
            hinge(path, self.margins.path, label).0,
            hinge(rebound, self.margins.rebound, label).0,
        )
    }

    pub fn total_loss(&self, logit: f64, label: f64, path: f64, rebound: f64) -> f64 {
        let (lp, lr) = self.hinge_regularizers(path, rebound, label);
        total_loss(
            binary_ce(logit, label).0,
            lp,
            lr,
            self.config.lambda_path,
            self.config.lambda_rebound,
        )
    }
}

fn pool(hidden: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut pooled = vec![0.0; hidden.first().map_or(0, Vec::len)];
    for (z, w) in hidden.iter().zip(weights) {
        for (p, v) in pooled.iter_mut().zip(z) {
            *p += w * v;
        }
    }
    pooled
}
