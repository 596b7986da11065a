//! Per-step statistical evidence: mean, peak and top-k mean of the kept
//! token entropies.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::filter::{kept_entropies, IgnoreSpec};
use crate::trajectory::{Label, RawTrajectory};

pub const EVIDENCE_DIM: usize = 3;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvidenceVector {
    pub mean_entropy: f64,
    pub max_entropy: f64,
    pub topk_mean_entropy: f64,
}

impl EvidenceVector {
    pub const ZERO: EvidenceVector = EvidenceVector {
        mean_entropy: 0.0,
        max_entropy: 0.0,
        topk_mean_entropy: 0.0,
    };

    pub fn new(mean: f64, max: f64, topk: f64) -> Self {
        EvidenceVector {
            mean_entropy: mean,
            max_entropy: max,
            topk_mean_entropy: topk,
        }
    }

    pub fn to_array(self) -> [f64; EVIDENCE_DIM] {
        [self.mean_entropy, self.max_entropy, self.topk_mean_entropy]
    }

    pub fn from_array(a: [f64; EVIDENCE_DIM]) -> Self {
        EvidenceVector::new(a[0], a[1], a[2])
    }
}

/// Evidence for one trajectory, ordered like its steps (`T` down to `0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceTrajectory {
    pub vectors: Vec<EvidenceVector>,
    pub kept_counts: Vec<usize>,
}

impl EvidenceTrajectory {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn max_step(&self) -> usize {
        self.vectors.len().saturating_sub(1)
    }

    /// Evidence at denoising step `t`.
    pub fn at_step(&self, t: usize) -> EvidenceVector {
        self.vectors[self.max_step() - t]
    }

    pub fn as_arrays(&self) -> Vec<[f64; EVIDENCE_DIM]> {
        self.vectors.iter().map(|v| v.to_array()).collect()
    }

    pub fn from_arrays(arrays: &[[f64; EVIDENCE_DIM]]) -> Self {
        EvidenceTrajectory {
            vectors: arrays.iter().map(|&a| EvidenceVector::from_array(a)).collect(),
            kept_counts: vec![0; arrays.len()],
        }
    }
}

/// One labelled training/evaluation example in evidence space.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceSample {
    pub id: String,
    pub query: Vec<f64>,
    pub evidence: EvidenceTrajectory,
    pub label: Label,
}

impl EvidenceSample {
    pub fn from_raw(raw: &RawTrajectory, spec: &IgnoreSpec, k: usize) -> Self {
        EvidenceSample {
            id: raw.id.clone(),
            query: raw.query_embedding.clone(),
            evidence: build_trajectory(raw, spec, k),
            label: raw.label,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Entropy(f64);

impl Eq for Entropy {}

impl PartialOrd for Entropy {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entropy {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// The `k` largest values, descending, via a size-`k` min-heap.
pub fn top_k_desc(values: &[f64], k: usize) -> Vec<f64> {
    let mut heap: BinaryHeap<Reverse<Entropy>> = BinaryHeap::with_capacity(k + 1);
    for &v in values {
        if heap.len() < k {
            heap.push(Reverse(Entropy(v)));
        } else if let Some(Reverse(min)) = heap.peek() {
            if Entropy(v) > *min {
                heap.pop();
                heap.push(Reverse(Entropy(v)));
            }
        }
    }
    // into_sorted_vec of Reverse is descending in the wrapped value
    heap.into_sorted_vec().into_iter().map(|Reverse(e)| e.0).collect()
}

/// Mean, max and top-k mean of the given entropies. Empty input yields zeros.
///
/// The top-k sum is accumulated in descending order, so any method that
/// selects the same multiset gets a bit-identical result. Rounding can push
/// the top-k mean a few ulps past the max (or the mean past the top-k mean),
/// so each is capped by the next to keep `mean <= topk <= max` exact.
pub fn step_evidence(entropies: &[f64], k: usize) -> EvidenceVector {
    assert!(k >= 1, "top-k requires k >= 1");
    if entropies.is_empty() {
        return EvidenceVector::ZERO;
    }
    let n = entropies.len() as f64;
    let mean = entropies.iter().sum::<f64>() / n;
    let max = entropies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let top = top_k_desc(entropies, k);
    let topk = (top.iter().sum::<f64>() / top.len() as f64).min(max);
    EvidenceVector::new(mean.min(topk), max, topk)
}

/// Condenses a raw trajectory into its evidence trajectory.
pub fn build_trajectory(raw: &RawTrajectory, spec: &IgnoreSpec, k: usize) -> EvidenceTrajectory {
    let mut vectors = Vec::with_capacity(raw.steps.len());
    let mut kept_counts = Vec::with_capacity(raw.steps.len());
    for step in &raw.steps {
        let kept = kept_entropies(step, spec);
        kept_counts.push(kept.len());
        vectors.push(step_evidence(&kept, k));
    }
    EvidenceTrajectory { vectors, kept_counts }
}
