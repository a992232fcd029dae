//! Synthetic scenes with analytic ground truth, fixtures built from them,
//! and correspondence metrics.

pub mod fixtures;
pub mod metrics;
pub mod scene;

pub use fixtures::{annotate, AnnotatedCorrespondence, FixtureSpec, SyntheticDataset};
pub use metrics::{aepe, evaluate, evaluate_matcher, pck, psnr, EvalResult, PCK_THRESHOLDS};
pub use scene::{analytic_ground_truth, GroundTruth, SyntheticScene};
