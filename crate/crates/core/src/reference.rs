//! Question-conditioned reference evidence generator.
//!
//! Maps a query embedding and a sinusoidal timestep code to the evidence a
//! factual response is expected to show at that step. Trained on factual
//! samples only, then frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{smooth_l1, Activation, AdamW, Dense, Mlp};
use crate::error::{Error, Result};
use crate::evidence::{EvidenceSample, EvidenceTrajectory, EvidenceVector, EVIDENCE_DIM};
use crate::trajectory::Label;

pub const DEFAULT_TIME_DIM: usize = 16;
pub const DEFAULT_GENERATOR_WIDTH: usize = 64;

/// Sinusoidal code of the normalized step `t / T`.
///
/// Pairs `(sin(f_i x), cos(f_i x))` are interleaved with `f_i = pi * 2^(i/2)`.
/// The lowest pair alone is injective on `[0, 1]`.
pub fn timestep_embed(t: usize, max_step: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("timestep embedding dim must be even and positive, got {dim}")));
    }
    if max_step == 0 || t > max_step {
        return Err(Error::Config(format!("timestep {t} outside [0, {max_step}]")));
    }
    let x = t as f64 / max_step as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = std::f64::consts::PI * 2f64.powf(i as f64 / 2.0);
        out.push((freq * x).sin());
        out.push((freq * x).cos());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            lr: 1e-3,
            weight_decay: 0.01,
            epochs: 60,
            batch_size: 32,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("invalid stage-1 config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceGenerator {
    pub d_q: usize,
    pub time_dim: usize,
    pub net: Mlp,
    pub epochs_trained: usize,
    pub final_loss: Option<f64>,
}

impl ReferenceGenerator {
    /// Two ReLU hidden layers of `width`; the output layer starts at zero so
    /// an untrained generator predicts the zero vector.
    pub fn new(d_q: usize, time_dim: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(
            &[d_q + time_dim, width, width, EVIDENCE_DIM],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        );
        let last = net.layers.len() - 1;
        net.layers[last] = Dense::zeros(width, EVIDENCE_DIM, Activation::Identity);
        ReferenceGenerator {
            d_q,
            time_dim,
            net,
            epochs_trained: 0,
            final_loss: None,
        }
    }

    pub fn with_defaults(d_q: usize, seed: u64) -> Self {
        Self::new(d_q, DEFAULT_TIME_DIM, DEFAULT_GENERATOR_WIDTH, seed)
    }

    fn input(&self, q: &[f64], time_code: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.d_q {
            return Err(Error::Dimension {
                context: "query embedding",
                expected: self.d_q,
                actual: q.len(),
            });
        }
        let mut x = Vec::with_capacity(self.d_q + self.time_dim);
        x.extend_from_slice(q);
        x.extend_from_slice(time_code);
        Ok(x)
    }

    /// Reference evidence at step `t`, clamped at zero from below.
    pub fn predict(&self, q: &[f64], t: usize, max_step: usize) -> Result<EvidenceVector> {
        let code = timestep_embed(t, max_step, self.time_dim)?;
        let out = self.net.forward(&self.input(q, &code)?)?;
        Ok(EvidenceVector::new(out[0].max(0.0), out[1].max(0.0), out[2].max(0.0)))
    }

    /// Full reference trajectory for steps `max_step` down to `0`.
    pub fn predict_trajectory(&self, q: &[f64], max_step: usize) -> Result<EvidenceTrajectory> {
        let vectors = (0..=max_step)
            .rev()
            .map(|t| self.predict(q, t, max_step))
            .collect::<Result<Vec<_>>>()?;
        let n = vectors.len();
        Ok(EvidenceTrajectory {
            vectors,
            kept_counts: vec![0; n],
        })
    }
}

pub fn predict_reference(gen: &ReferenceGenerator, q: &[f64], t: usize, max_step: usize) -> Result<EvidenceVector> {
    gen.predict(q, t, max_step)
}

/// Per-sample reference loss: SmoothL1 summed over steps and divided by `T`.
fn sample_loss(
    gen: &ReferenceGenerator,
    sample: &EvidenceSample,
    codes: &[Vec<f64>],
    grads: Option<&mut Vec<Vec<f64>>>,
    scale: f64,
) -> Result<f64> {
    let max_step = sample.evidence.max_step();
    let norm = 1.0 / max_step as f64;
    let mut loss = 0.0;
    let mut grads = grads;
    for (j, observed) in sample.evidence.vectors.iter().enumerate() {
        let t = max_step - j;
        let x = gen.input(&sample.query, &codes[t])?;
        let target = observed.to_array();
        match grads.as_deref_mut() {
            Some(g) => {
                let trace = gen.net.forward_trace(&x)?;
                let (l, dl) = smooth_l1(trace.output(), &target);
                loss += l * norm;
                let dl: Vec<f64> = dl.iter().map(|d| d * norm * scale).collect();
                gen.net.backward_trace(&trace, &dl, g);
            }
            None => {
                let out = gen.net.forward(&x)?;
                loss += smooth_l1(&out, &target).0 * norm;
            }
        }
    }
    Ok(loss)
}

fn time_codes(gen: &ReferenceGenerator, max_step: usize) -> Result<Vec<Vec<f64>>> {
    (0..=max_step)
        .map(|t| timestep_embed(t, max_step, gen.time_dim))
        .collect()
}

/// Mean reference loss over `samples` without updating anything.
pub fn reference_loss(gen: &ReferenceGenerator, samples: &[EvidenceSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples {
        let codes = time_codes(gen, s.evidence.max_step())?;
        total += sample_loss(gen, s, &codes, None, 1.0)?;
    }
    Ok(total / samples.len() as f64)
}

/// Loss and parameter gradients of the mean reference loss over a batch.
pub fn reference_loss_and_grads(gen: &ReferenceGenerator, batch: &[&EvidenceSample]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut grads = gen.net.zero_grads();
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut total = 0.0;
    for s in batch {
        let codes = time_codes(gen, s.evidence.max_step())?;
        total += sample_loss(gen, s, &codes, Some(&mut grads), scale)?;
    }
    Ok((total * scale, grads))
}

/// Trains the generator on factual samples; returns the mean loss of each
/// epoch. Any non-factual sample is an error.
///
/// Samples are put in id order before the seeded per-epoch shuffle, so the
/// result does not depend on the order they were passed in.
pub fn train_reference(
    gen: &mut ReferenceGenerator,
    samples: &[EvidenceSample],
    config: &Stage1Config,
    seed: u64,
) -> Result<Vec<f64>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Training("reference training needs at least one factual sample".into()));
    }
    if let Some(bad) = samples.iter().find(|s| s.label != Label::Factual) {
        return Err(Error::Training(format!(
            "reference generator trains on factual samples only; sample {} is {:?}",
            bad.id, bad.label
        )));
    }
    let max_step = samples[0].evidence.max_step();
    if max_step == 0 || samples.iter().any(|s| s.evidence.max_step() != max_step) {
        return Err(Error::Training("all samples must share the same T >= 1".into()));
    }
    let mut ordered: Vec<&EvidenceSample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));

    let codes = time_codes(gen, max_step)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        ordered.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in ordered.chunks(config.batch_size) {
            let mut grads = gen.net.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for s in batch {
                epoch_loss += sample_loss(gen, s, &codes, Some(&mut grads), scale)?;
            }
            opt.step(&mut gen.net.params_mut(), &grads)?;
        }
        let epoch_loss = epoch_loss / ordered.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::NonFinite("reference loss"));
        }
        history.push(epoch_loss);
    }
    gen.epochs_trained += config.epochs;
    gen.final_loss = Some(reference_loss(gen, samples)?);
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_sample(id: &str, q: Vec<f64>, max_step: usize, v: f64, label: Label) -> EvidenceSample {
        EvidenceSample {
            id: id.into(),
            query: q,
            evidence: EvidenceTrajectory::from_arrays(&vec![[v; 3]; max_step + 1]),
            label,
        }
    }

    #[test]
    fn embedding_at_zero_alternates() {
        let e = timestep_embed(0, 10, 8).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn embedding_rejects_bad_args() {
        assert!(timestep_embed(11, 10, 8).is_err());
        assert!(timestep_embed(1, 10, 7).is_err());
    }

    #[test]
    fn adjacent_steps_differ() {
        let a = timestep_embed(64, 64, 16).unwrap();
        let b = timestep_embed(63, 64, 16).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn untrained_predicts_zero() {
        let gen = ReferenceGenerator::with_defaults(4, 7);
        for t in 0..=8 {
            assert_eq!(gen.predict(&[0.3, -1.0, 2.0, 0.1], t, 8).unwrap(), EvidenceVector::ZERO);
        }
        assert!(gen.predict(&[0.0; 3], 0, 8).is_err());
    }

    #[test]
    fn rejects_hallucinated_samples() {
        let mut gen = ReferenceGenerator::with_defaults(2, 0);
        let samples = vec![
            constant_sample("a", vec![0.0, 1.0], 4, 1.0, Label::Factual),
            constant_sample("b", vec![1.0, 0.0], 4, 1.0, Label::Hallucinated),
        ];
        assert!(train_reference(&mut gen, &samples, &Stage1Config::default(), 0).is_err());
        assert!(train_reference(&mut gen, &[], &Stage1Config::default(), 0).is_err());
    }

    #[test]
    fn single_sample_descends() {
        let mut gen = ReferenceGenerator::with_defaults(2, 1);
        let samples = vec![constant_sample("a", vec![0.5, -0.5], 6, 0.8, Label::Factual)];
        let before = reference_loss(&gen, &samples).unwrap();
        let cfg = Stage1Config {
            epochs: 20,
            ..Default::default()
        };
        train_reference(&mut gen, &samples, &cfg, 3).unwrap();
        assert!(reference_loss(&gen, &samples).unwrap() < before);
    }

    #[test]
    fn constant_evidence_fits() {
        let mut gen = ReferenceGenerator::with_defaults(2, 2);
        let samples: Vec<_> = (0..8)
            .map(|i| constant_sample(&format!("s{i}"), vec![i as f64 / 8.0, 1.0 - i as f64 / 8.0], 8, 1.0, Label::Factual))
            .collect();
        let cfg = Stage1Config {
            epochs: 200,
            batch_size: 4,
            ..Default::default()
        };
        let hist = train_reference(&mut gen, &samples, &cfg, 5).unwrap();
        assert_eq!(hist.len(), 200);
        assert!(gen.final_loss.unwrap() < 1e-3, "final loss {:?}", gen.final_loss);
    }

    #[test]
    fn sample_order_does_not_matter() {
        let samples: Vec<_> = (0..6)
            .map(|i| constant_sample(&format!("s{i}"), vec![i as f64, 1.0], 4, 0.5 + 0.1 * i as f64, Label::Factual))
            .collect();
        let mut reversed = samples.clone();
        reversed.reverse();
        let cfg = Stage1Config {
            epochs: 5,
            batch_size: 2,
            ..Default::default()
        };
        let mut a = ReferenceGenerator::with_defaults(2, 9);
        let mut b = a.clone();
        train_reference(&mut a, &samples, &cfg, 11).unwrap();
        train_reference(&mut b, &reversed, &cfg, 11).unwrap();
        assert_eq!(a, b);
    }
}
