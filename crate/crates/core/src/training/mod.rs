//! Objective, optimizer and the training loop.

mod check;
pub mod loss;
mod fit;
mod metrics;
mod optim;

pub use fit::{
    evaluate, fit, rng_stream, Evaluation, RoutingPolicy, SplitAccuracy, Stream, TrainConfig, TrainObserver,
    TrainState,
};
pub use check::{check_model_gradients, TensorCheck};
pub use loss::{
    attach_objective, load_balance_loss, routing_entropy_loss, task_loss, total_loss, LossBreakdown, Objective,
};
pub use metrics::{accuracy, mean_std, parse_jsonl, to_jsonl, write_jsonl, EpochReport};
pub use optim::{adamw_step, adamw_update, clip_global_norm, AdamWConfig, Moments};
