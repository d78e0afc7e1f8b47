//! The difficulty-aware mixture-of-experts model.

mod checkpoint;
mod config;
mod forward;
mod params;
pub mod routing;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{Backbone, ExpertKind, ExpertLayout, ModelConfig};
pub use forward::{
    expert_forward, forward, route_scores, ForwardPass, LayerTrace, Mode, RoutingTrace, Selection,
};
pub use params::{
    ExpertParams, LayerParams, LinearParams, ModelParams, NormParams, Param, ParamId, ParamRole,
    RouterParams,
};
pub use routing::{
    map_budget, predict, predictive_entropy, renormalize, select_top_k, select_top_p, RoutingState,
};
