//! Label disambiguation: merging confusable classes into super categories,
//! and multi-task training against soft labels from a knowledge network.

pub mod confusion;
pub mod loss;
pub mod merge;
pub mod softlabel;

pub use confusion::{confusion_matrix, symmetrize, ConfusionMatrix, SimilarityMatrix};
pub use loss::{hard_loss, multitask_loss, soft_loss, LossTerms, MultiTaskLossConfig, SoftLoss};
pub use merge::{
    merge_categories, merge_with, redistribute, relabel, MergeOptions, MergeOutcome, MergeStep, Partition,
};
pub use softlabel::{generate_soft_labels, load_or_generate_soft_labels, SoftLabelSet};
