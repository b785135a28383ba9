//! Training, evaluation and the cross-validated experiment protocol.
//!
//! A model's total loss is the sum of its task losses (softmax cross-entropy
//! for the classifier, per-pixel binary cross-entropy for the mask) plus
//! `triplet_weight` times the embedding loss selected by [`LossMode`]. The
//! embedding loss acts on the encoder output in every mode.
//!
//! Predicted boxes come from the mask head: probabilities above 0.5 are
//! grouped into 8-connected components and the largest one is boxed.

mod config;
mod experiment;
mod folds;
mod geometry;
mod pca;
mod train;

pub use config::{ExperimentConfig, LossMode, Protocol};
pub use experiment::{
    assign_box_labels, mean_std, run_experiment, summarize, write_fold_csv, write_pca_csv, write_summary_csv,
    Architecture, Cell, CellSummary, ExperimentResults, FoldResult, KeepModels, TrainedModel,
};
pub use folds::{stratified_kfold, stratified_split};
pub use geometry::{iou, mask_to_box};
pub use pca::{pca_export, symmetric_eigen, PcaExport, PcaRow};
pub use train::{
    batch_schedule, embed_tiles, evaluate, predict, score, train, Metrics, Prediction, TrainHistory, TrainOutcome,
    MASK_THRESHOLD,
};
