//! Optimisation of the composite objective, the baselines built on it and
//! the experiment grids.

mod config;
pub mod experiments;
mod fit;
mod pl;
mod step;

pub use config::{Method, TeVariant, TrainConfig, ValMetric};
pub use fit::{
    evaluate, fit, predict, score_predictions, EarlyStopping, EpochRecord, FitResult, StepRecord,
};
pub use pl::{pseudo_label_baseline, PlResult};
pub use step::{SampleLosses, StepOutput, Trainer};
