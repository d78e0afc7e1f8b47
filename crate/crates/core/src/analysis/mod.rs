//! Entropy stratification, activation statistics and ablations.

mod ablation;
mod stratify;

pub use ablation::{
    proxy_model_config, run_ablation, train_and_evaluate, train_proxy, AblationResult, AblationVariant, SeedRun,
};
pub use stratify::{
    activation_stats, equal_partition, sort_by_entropy, spearman, stratify_by_entropy, ActivationStats, DecileBucket,
    DecileReport,
};
