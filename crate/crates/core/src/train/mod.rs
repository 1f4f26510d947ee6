//! Loss, optimizer, training loop, evaluation metrics, component ablation
//! and gradient verification.

mod ablation;
mod loss;
mod metrics;
mod optim;
mod trainer;
pub mod verify;

pub use ablation::{run_ablation, thread_budget, AblationReport, AblationRow, AblationVariant};
pub use loss::{loss, loss_value, DICE_SMOOTH};
pub use metrics::{
    argmax_classes, dice, evaluate, f1, predict, score, ClassMetrics, Counts, MetricsAccumulator,
    MetricsReport,
};
pub use optim::{Adam, AdamConfig};
pub use trainer::{step, LossRecord, RngState, TrainConfig, Trainer};
