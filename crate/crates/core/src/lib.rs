//! Hallucination detection from the token-entropy trajectories of diffusion
//! language models.
//!
//! The pipeline reads per-step token entropies, drops tokens that carry no
//! semantic content, condenses each step into a three-number evidence
//! vector, learns a query-conditioned reference trajectory from factual
//! samples, and scores deviations from that reference with an attentive
//! classifier.

pub mod detector;
pub mod diffnet;
pub mod error;
pub mod evidence;
pub mod filter;
pub mod reference;
pub mod sim;
pub mod train;
pub mod trajectory;

pub use detector::{CompositeFeature, DetectorConfig, DeviationDetector, Margins, PreparedSample};
pub use error::{Error, Result};
pub use evidence::{build_trajectory, step_evidence, EvidenceSample, EvidenceTrajectory, EvidenceVector};
pub use filter::{FilterCategory, IgnoreSpec, Verdict};
pub use reference::{ReferenceGenerator, Stage1Config};
pub use sim::{simulate_dataset, HallucinationMode, RegimeSpec, SimConfig};
pub use train::{auroc, cross_eval, grid_search, run_two_stage, GridSpec, RunReport, Stage2Config, TrainConfig, TrainedModel};
pub use trajectory::{read_dataset, write_dataset, Dataset, DatasetHeader, Label, RawTrajectory, StepRecord, TokenClass, TokenRecord};
