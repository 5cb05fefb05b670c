//! Orchestration: the groupwise fit, the bound ledger, segmentation of
//! unseen data, evaluation metrics and the synthetic-data generator.

mod bound;
mod config;
mod fit;
mod ledger;
mod metrics;
mod segment;
mod state;
mod synth;

pub use bound::{compute_lower_bound, dirichlet_term, subject_bound_slice, BoundBreakdown};
pub use config::ModelConfig;
pub use fit::{fit_groupwise, initial_hyperprior, template_grid, FitResult};
pub use ledger::{BoundLedger, LedgerRow};
pub use metrics::{dice_score, pearson_correlation};
pub use segment::{segment_unseen, SegmentResult};
pub use state::{centroid_translation, SubjectData, SubjectState};
pub use synth::{synthesize_dataset, SynthConfig, SynthDataset};
