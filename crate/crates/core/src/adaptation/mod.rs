//! Losses, target clustering, cycle-consistent consensus matching,
//! pseudo-labeling with unknown rejection, and the training loop.

mod consensus;
mod kmeans;
mod losses;
mod train;

pub use consensus::{assign_pseudo_labels, class_centers, cycle_consistent_match, PseudoLabeling};
pub use kmeans::{kmeans, KMeans};
pub use losses::{
    loss_cdd, loss_ce, loss_rec, loss_reg, total_loss, CddOutput, LossParts, LossWeights,
    CDD_INTER_WEIGHT,
};
pub use train::{
    batch_objective, embed_all, history_csv, refresh_pseudo_labels, train, train_from, Batch,
    EmbeddingSpace, EpochRecord, TrainConfig, TrainOutput, HISTORY_HEADER,
};
