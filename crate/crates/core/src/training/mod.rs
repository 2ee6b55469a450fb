//! Losses, sampling, cross-validation and the training loop.

pub mod data;
pub mod folds;
pub mod loss;
pub mod trainer;
pub mod weights;

pub use data::{build_samples, split_multiclass, validation_samples, TaskMapping};
pub use folds::{kfold_split, FoldPlan, FoldSplit, DEFAULT_FOLDS};
pub use loss::{combined_loss, cross_entropy_loss, one_hot, soft_dice_loss, DICE_EPS};
pub use trainer::{
    predict_classes, train_run, validation_dice, write_history_csv, EpochRecord, RunSpec, TrainConfig, TrainOutcome,
    Trainer, WeightSpec,
};
pub use weights::dataset_weights;
