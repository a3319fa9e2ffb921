//! Per-cell optimization: composite loss, Adam, density control and the
//! training loop.

pub mod adam;
pub mod config;
pub mod densify;
pub mod loss;
pub mod trainer;

pub use adam::Adam;
pub use config::{LearningRates, TrainConfig};
pub use densify::{accumulate_view_gradient, densify_and_prune, DensifyConfig, DensifyReport, DensifyStats};
pub use loss::{compute_loss, compute_loss_with_grad, LossBreakdown, LossGradients, LossWeights};
pub use trainer::{
    cell_trainer, evaluate_field, init_field_from_points, knn_mean_distance, loss_and_gradients, train_cell, view_loss,
    write_losses_csv, CellOutputs, LossRecord, StepGradients, TrainedCell, Trainer, ViewScore,
};
