//! A desk-scale laboratory for weak-to-strong generalization: weak supervisors train
//! stronger students through their labels, and the lab measures how much of the capability
//! gap the students recover.

pub mod cli;
pub mod datagen;
pub mod easy_to_hard;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod supervision;
pub mod training;

pub use datagen::{generate_task, DatasetBundle, FeatureModel, Split, TaskSpec, Teacher};
pub use losses::{LossSpec, LossVariant};
pub use metrics::{agreement, compute_pgr, AgreementBreakdown};
pub use models::{CapacityLadder, ModelSpec, TrainedModel};
pub use numerics::{Matrix, OptimizerSpec, RngStream};
pub use supervision::{ErrorPolicy, ErrorPolicyKind, SoftLabelSet};
pub use training::{run_w2s, RunRecord, TrainConfig};
