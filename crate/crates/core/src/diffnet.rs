//! Small dense networks with hand-written reverse-mode gradients, the two
//! losses the detector needs, and an AdamW optimizer. Double precision.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and activation value.
    #[inline]
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

/// Affine map followed by an elementwise activation. Weights are row-major
/// `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Dense {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// He-uniform for ReLU layers, Glorot-uniform otherwise; zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = match activation {
            Activation::Relu => (6.0 / in_dim as f64).sqrt(),
            _ => (6.0 / (in_dim + out_dim) as f64).sqrt(),
        };
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Dense {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut d = Dense::zeros(dim, dim, Activation::Identity);
        for i in 0..dim {
            d.weights[i * dim + i] = 1.0;
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.in_dim * self.out_dim {
            return Err(Error::Dimension {
                context: "dense weights",
                expected: self.in_dim * self.out_dim,
                actual: self.weights.len(),
            });
        }
        if self.bias.len() != self.out_dim {
            return Err(Error::Dimension {
                context: "dense bias",
                expected: self.out_dim,
                actual: self.bias.len(),
            });
        }
        if self.weights.iter().chain(&self.bias).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameter"));
        }
        Ok(())
    }

    /// Returns `(pre_activation, output)`.
    pub fn forward(&self, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(input.len(), self.in_dim);
        let mut pre = self.bias.clone();
        for (o, p) in pre.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            *p += row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
        let out = pre.iter().map(|&p| self.activation.apply(p)).collect();
        (pre, out)
    }

    /// Accumulates parameter gradients into `grad_w`/`grad_b` and returns the
    /// gradient with respect to `input`.
    pub fn backward(
        &self,
        input: &[f64],
        pre: &[f64],
        out: &[f64],
        grad_out: &[f64],
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let delta = grad_out[o] * self.activation.derivative(pre[o], out[o]);
            if delta == 0.0 {
                continue;
            }
            grad_b[o] += delta;
            let row = o * self.in_dim;
            for i in 0..self.in_dim {
                grad_w[row + i] += delta * input[i];
                grad_in[i] += self.weights[row + i] * delta;
            }
        }
        grad_in
    }
}

/// Intermediate values of one forward pass, needed for backprop.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    #[serde(skip)]
    cache: Option<MlpTrace>,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Dimension {
                    context: "mlp layer chain",
                    expected: pair[0].out_dim,
                    actual: pair[1].in_dim,
                });
            }
        }
        for l in &layers {
            l.validate()?;
        }
        Ok(Mlp { layers, cache: None })
    }

    /// Builds `dims[0] -> dims[1] -> ... -> dims[n]` with `hidden` between
    /// layers and `output` on the last one.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least an input and an output dimension");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::init(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Mlp { layers, cache: None }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.in_dim() {
            return Err(Error::Dimension {
                context: "mlp input",
                expected: self.in_dim(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            x = layer.forward(&x).1;
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<MlpTrace> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for layer in &self.layers {
            let (p, out) = layer.forward(&x);
            inputs.push(x);
            pre.push(p);
            x = out;
        }
        Ok(MlpTrace { inputs, pre, output: x })
    }

    /// Backprop through a recorded pass. `grads` must come from
    /// [`Mlp::zero_grads`] (or the matching slice of a larger buffer).
    pub fn backward_trace(&self, trace: &MlpTrace, grad_out: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        debug_assert_eq!(grads.len(), 2 * self.layers.len());
        let mut g = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = if i + 1 == self.layers.len() {
                &trace.output
            } else {
                &trace.inputs[i + 1]
            };
            let (gw, rest) = grads[2 * i..].split_at_mut(1);
            g = layer.backward(&trace.inputs[i], &trace.pre[i], out, &g, &mut gw[0], &mut rest[0]);
        }
        g
    }

    /// Forward pass that keeps its trace for a later [`Mlp::backward`].
    pub fn forward_cached(&mut self, input: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(input)?;
        let out = trace.output.clone();
        self.cache = Some(trace);
        Ok(out)
    }

    /// Parameter gradients and input gradient for the last cached forward.
    pub fn backward(&self, grad_out: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let trace = self.cache.as_ref().ok_or(Error::NoForward)?;
        if grad_out.len() != self.out_dim() {
            return Err(Error::Dimension {
                context: "mlp output gradient",
                expected: self.out_dim(),
                actual: grad_out.len(),
            });
        }
        let mut grads = self.zero_grads();
        let gin = self.backward_trace(trace, grad_out, &mut grads);
        Ok((grads, gin))
    }

    /// Zeroed gradient buffers in parameter order `[w0, b0, w1, b1, ...]`.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .flat_map(|l| [vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]])
            .collect()
    }

    /// Mutable parameter slices in the same order as [`Mlp::zero_grads`].
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

/// Mean Smooth-L1 (Huber with threshold 1) and its gradient wrt `prediction`.
pub fn smooth_l1(prediction: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(prediction.len(), target.len(), "smooth_l1 dimension mismatch");
    let n = prediction.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                loss += 0.5 * d * d;
                d / n
            } else {
                loss += d.abs() - 0.5;
                d.signum() / n
            }
        })
        .collect();
    (loss / n, grad)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit; returns `(loss, dloss/dlogit)`.
pub fn binary_ce(logit: f64, label: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - label)
}

/// AdamW: adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update. A non-finite gradient aborts the step with an
    /// error and leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension {
                context: "optimizer parameter groups",
                expected: params.len(),
                actual: grads.len(),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Dimension {
                    context: "optimizer parameter group",
                    expected: p.len(),
                    actual: g.len(),
                });
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len() || self.first.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::Training("optimizer state shape does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[gi];
            let v = &mut self.second[gi];
            for j in 0..p.len() {
                p[j] -= self.lr * self.weight_decay * p[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
