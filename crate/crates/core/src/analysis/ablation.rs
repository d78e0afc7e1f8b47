//! Ablation variants and the multi-seed harness.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::moe::{ExpertLayout, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::training::{evaluate, fit, mean_std, rng_stream, Evaluation, RoutingPolicy, Stream, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    StaticTopK { k: usize },
    FixedTopP { p: f64 },
    RandomTopP,
    NoRoutingEntropy,
    NoLoadBalance,
}

impl AblationVariant {
    pub fn validate(&self, experts: usize) -> Result<()> {
        self.policy().validate(experts)
    }

    pub fn policy(&self) -> RoutingPolicy {
        match *self {
            AblationVariant::StaticTopK { k } => RoutingPolicy::StaticTopK { k },
            AblationVariant::FixedTopP { p } => RoutingPolicy::FixedTopP { p },
            AblationVariant::RandomTopP => RoutingPolicy::ShuffledAdaptive,
            _ => RoutingPolicy::Adaptive,
        }
    }

    /// `base` adjusted for this variant.
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.policy = self.policy();
        match self {
            AblationVariant::NoRoutingEntropy => c.lambda_re = 0.0,
            AblationVariant::NoLoadBalance => c.lambda_lb = 0.0,
            _ => {}
        }
        c
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AblationVariant::Full => write!(f, "full"),
            AblationVariant::StaticTopK { k } => write!(f, "static_top_k:{k}"),
            AblationVariant::FixedTopP { p } => write!(f, "fixed_top_p:{p}"),
            AblationVariant::RandomTopP => write!(f, "random_top_p"),
            AblationVariant::NoRoutingEntropy => write!(f, "no_routing_entropy"),
            AblationVariant::NoLoadBalance => write!(f, "no_load_balance"),
        }
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    /// Accepts the [`Display`](fmt::Display) tokens; `static_top_k` and
    /// `fixed_top_p` need a `:value` suffix.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let need = |what: &str| arg.ok_or_else(|| Error::invalid(format!("variant {name} needs :{what}")));
        let bad = |e: &dyn fmt::Display| Error::invalid(format!("variant {s}: {e}"));
        let v = match name {
            "full" => AblationVariant::Full,
            "static_top_k" => AblationVariant::StaticTopK {
                k: need("k")?.parse().map_err(|e| bad(&e))?,
            },
            "fixed_top_p" => AblationVariant::FixedTopP {
                p: need("p")?.parse().map_err(|e| bad(&e))?,
            },
            "random_top_p" => AblationVariant::RandomTopP,
            "no_routing_entropy" => AblationVariant::NoRoutingEntropy,
            "no_load_balance" => AblationVariant::NoLoadBalance,
            _ => return Err(Error::invalid(format!("unknown variant {s:?}"))),
        };
        if arg.is_some() && !matches!(v, AblationVariant::StaticTopK { .. } | AblationVariant::FixedTopP { .. }) {
            return Err(Error::invalid(format!("variant {name} takes no argument")));
        }
        Ok(v)
    }
}

/// Outcome of one trained seed.
pub struct SeedRun<T> {
    pub seed: u64,
    pub params: ModelParams<T>,
    pub evaluation: Evaluation<T>,
    pub best_epoch: usize,
    pub epochs: usize,
}

/// Trains with `config` and evaluates the best-validation parameters
/// under the config's routing policy.
pub fn train_and_evaluate<T: Scalar>(graph: &Graph<T>, model: &ModelConfig, config: &TrainConfig) -> Result<SeedRun<T>> {
    let state = fit(graph, model, config, &mut ())?;
    let mut rng = rng_stream(config.seed, Stream::Routing);
    let evaluation = evaluate(&state.best, graph, config.policy, &mut rng)?;
    Ok(SeedRun {
        seed: config.seed,
        params: state.best,
        evaluation,
        best_epoch: state.best_epoch,
        epochs: state.epoch,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: String,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

/// Test accuracy of `variant` over `seeds`, trained in parallel.
pub fn run_ablation<T: Scalar>(
    graph: &Graph<T>,
    model: &ModelConfig,
    base: &TrainConfig,
    variant: AblationVariant,
    seeds: &[u64],
) -> Result<AblationResult> {
    variant.validate(model.experts)?;
    let config = variant.train_config(base);
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let c = TrainConfig { seed, ..config.clone() };
            let run = train_and_evaluate(graph, model, &c)?;
            run.evaluation
                .accuracy
                .test
                .ok_or_else(|| Error::invalid("ablation needs a non-empty test mask"))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, std) = mean_std(&per_seed);
    Ok(AblationResult {
        variant: variant.to_string(),
        mean,
        std,
        per_seed,
    })
}

/// Single-expert model of the same depth, used as a fixed difficulty proxy.
pub fn proxy_model_config(model: &ModelConfig) -> ModelConfig {
    ModelConfig {
        experts: 1,
        layout: ExpertLayout::AllOneHop,
        ..model.clone()
    }
}

/// Trains the proxy teacher and returns its eval-mode run.
pub fn train_proxy<T: Scalar>(graph: &Graph<T>, model: &ModelConfig, base: &TrainConfig) -> Result<SeedRun<T>> {
    let config = TrainConfig {
        policy: RoutingPolicy::StaticTopK { k: 1 },
        ..base.clone()
    };
    train_and_evaluate(graph, &proxy_model_config(model), &config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_tokens_round_trip() {
        let all = [
            AblationVariant::Full,
            AblationVariant::StaticTopK { k: 2 },
            AblationVariant::FixedTopP { p: 0.5 },
            AblationVariant::RandomTopP,
            AblationVariant::NoRoutingEntropy,
            AblationVariant::NoLoadBalance,
        ];
        for v in all {
            assert_eq!(v.to_string().parse::<AblationVariant>().unwrap(), v);
        }
        assert!("static_top_k".parse::<AblationVariant>().is_err());
        assert!("full:3".parse::<AblationVariant>().is_err());
        assert!("mystery".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn variant_configs() {
        let base = TrainConfig::default();
        let c = AblationVariant::NoRoutingEntropy.train_config(&base);
        assert_eq!((c.lambda_re, c.lambda_lb), (0.0, base.lambda_lb));
        let c = AblationVariant::NoLoadBalance.train_config(&base);
        assert_eq!((c.lambda_re, c.lambda_lb), (base.lambda_re, 0.0));
        assert_eq!(AblationVariant::RandomTopP.policy(), RoutingPolicy::ShuffledAdaptive);
        assert!(AblationVariant::StaticTopK { k: 5 }.validate(4).is_err());
        assert!(AblationVariant::FixedTopP { p: 0.0 }.validate(4).is_err());
    }
}
