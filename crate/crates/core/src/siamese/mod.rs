//! Siamese networks that score whether two nodule patches show the same
//! nodule, in the eight configurations built from a frozen or unfrozen
//! backbone, one or several feature taps, and a basic, FC, CNN or MFC head.

mod config;
pub mod loss;
mod model;
mod train;

pub use config::{ConfigName, HeadKind, LossKind, PretrainedMode, SiameseConfig, DEFAULT_MARGIN};
pub use model::{abs_diff, Embeddings, FcBlock, Head, SiameseModel, CHECKPOINT_KIND, DEFAULT_DROPOUT, FC_HIDDEN};
pub use train::{
    accuracy, build_pair_dataset, cross_validate, evaluate, mean_std, pair_plan, predict, stratified_folds, train, CasePatches,
    CvReport, FoldResult, PairSample, SiameseEpoch, TrainRecipe, TrainReport,
};
