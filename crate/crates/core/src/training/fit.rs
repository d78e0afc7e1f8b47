//! The epoch loop: budget mapping, routed forward, optimization and the
//! bootstrap entropy update, plus two-pass evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Split};
use crate::moe::routing::{map_budget_around, mean, predictive_entropy, RoutingState};
use crate::moe::{forward, ModelConfig, ModelParams, Mode, RoutingTrace, Selection};
use crate::numerics::Matrix;
use crate::scalar::Scalar;
use crate::training::loss::attach_objective;
use crate::training::metrics::{accuracy, EpochReport};
use crate::training::optim::{adamw_step, clip_global_norm, AdamWConfig, Moments};

/// Independent random streams derived from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Dropout = 1,
    Data = 2,
    Routing = 3,
    Eval = 4,
}

pub fn rng_stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// How per-node thresholds are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoutingPolicy {
    /// Entropy-driven thresholds from the previous epoch's predictions.
    Adaptive,
    /// The fixed `k` highest-scoring experts at every epoch.
    StaticTopK { k: usize },
    /// One global threshold after the cold-start epoch.
    FixedTopP { p: f64 },
    /// Adaptive thresholds permuted across nodes every epoch.
    ShuffledAdaptive,
}

impl RoutingPolicy {
    pub fn validate(&self, experts: usize) -> Result<()> {
        match *self {
            RoutingPolicy::StaticTopK { k } if k == 0 || k > experts => {
                Err(Error::invalid(format!("top-k budget {k} outside [1, {experts}]")))
            }
            RoutingPolicy::FixedTopP { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::invalid(format!("top-p threshold {p} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_re: f64,
    pub lambda_lb: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub bn_momentum: f64,
    /// Recompute bootstrap probabilities without dropout.
    pub strict_proxy: bool,
    pub policy: RoutingPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        TrainConfig {
            max_epochs: 500,
            patience: 100,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            lambda_re: 1e-4,
            lambda_lb: 1e-3,
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            clip_norm: 5.0,
            bn_momentum: 0.9,
            strict_proxy: false,
            policy: RoutingPolicy::Adaptive,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::invalid("max_epochs and patience must be at least 1"));
        }
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !(nonneg(self.lambda_re) && nonneg(self.lambda_lb)) {
            return Err(Error::invalid("regularizer weights must be finite and non-negative"));
        }
        if !(self.lr > 0.0 && nonneg(self.weight_decay) && self.clip_norm > 0.0) {
            return Err(Error::invalid("lr and clip_norm must be positive, weight_decay non-negative"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::invalid("betas must lie in [0, 1) and eps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("bn_momentum must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Hooks into the epoch loop. All methods default to no-ops.
pub trait TrainObserver<T> {
    /// Called before the epoch's forward pass. `applied` holds the
    /// thresholds actually used (`None` under top-k).
    fn on_epoch_start(&mut self, _epoch: usize, _state: &RoutingState, _applied: Option<&[f64]>) {}
    fn on_forward(&mut self, _epoch: usize, _trace: &RoutingTrace<T>) {}
    fn on_epoch_end(&mut self, _report: &EpochReport) {}
}

impl<T> TrainObserver<T> for () {}

pub struct TrainState<T> {
    /// Parameters after the last completed epoch.
    pub params: ModelParams<T>,
    pub moments: Moments<T>,
    pub routing: RoutingState,
    /// Parameters at the best validation accuracy.
    pub best: ModelParams<T>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochReport>,
    pub stopped_early: bool,
}

struct SplitNodes {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

fn split_nodes<T: Scalar>(graph: &Graph<T>) -> Result<SplitNodes> {
    let masks = graph.masks();
    let nodes = SplitNodes {
        train: masks.nodes(Split::Train),
        val: masks.nodes(Split::Val),
        test: masks.nodes(Split::Test),
    };
    if nodes.train.is_empty() || nodes.val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation masks"));
    }
    Ok(nodes)
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(detail) => Error::Diverged { epoch, detail },
        other => other,
    }
}

/// Trains a fresh model on `graph`.
pub fn fit<T: Scalar>(
    graph: &Graph<T>,
    model: &ModelConfig,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainState<T>> {
    model.validate()?;
    config.validate()?;
    config.policy.validate(model.experts)?;
    let nodes = split_nodes(graph)?;
    let n = graph.num_nodes();
    let labels = graph.labels();

    let params = ModelParams::init(model, &mut rng_stream(config.seed, Stream::Init))?;
    let mut dropout_rng = rng_stream(config.seed, Stream::Dropout);
    let mut routing_rng = rng_stream(config.seed, Stream::Routing);
    let mut eval_rng = rng_stream(config.seed, Stream::Eval);
    let adam = config.adamw();

    let mut state = TrainState {
        moments: Moments::for_params(&params),
        best: params.clone(),
        params,
        routing: RoutingState::cold_start(n),
        best_epoch: 0,
        best_val: f64::NEG_INFINITY,
        epoch: 0,
        history: Vec::new(),
        stopped_early: false,
    };
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        debug_assert_eq!(state.routing.epoch, epoch);
        let applied = match config.policy {
            RoutingPolicy::Adaptive => Some(state.routing.thresholds.clone()),
            RoutingPolicy::ShuffledAdaptive => {
                let mut t = state.routing.thresholds.clone();
                t.shuffle(&mut routing_rng);
                Some(t)
            }
            RoutingPolicy::FixedTopP { p } => Some(vec![if epoch == 0 { 1.0 } else { p }; n]),
            RoutingPolicy::StaticTopK { .. } => None,
        };
        observer.on_epoch_start(epoch, &state.routing, applied.as_deref());
        let selection = match (&applied, config.policy) {
            (Some(t), _) => Selection::TopP(t),
            (None, RoutingPolicy::StaticTopK { k }) => Selection::TopK(k),
            (None, _) => unreachable!("only top-k runs without thresholds"),
        };

        // Phase 2: routed forward and objective.
        let on_err = diverged(epoch);
        let mut pass = forward(&state.params, graph, selection, Mode::Train, &mut dropout_rng).map_err(&on_err)?;
        observer.on_forward(epoch, &pass.trace);
        let (objective, losses) =
            attach_objective(&mut pass, labels, &nodes.train, config.lambda_re, config.lambda_lb).map_err(&on_err)?;
        if !losses.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("loss {}", losses.total),
            });
        }

        // Phase 3: optimization.
        let grads = pass.tape.backward(objective.total).map_err(&on_err)?;
        let mut grads: Vec<Matrix<T>> = pass.params.iter().map(|&v| grads.wrt(v)).collect();
        let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("gradient norm {grad_norm}"),
            });
        }
        adamw_step(&mut state.params, &grads, &mut state.moments, &adam)?;
        state.params.update_running_stats(&pass.batch_stats, config.bn_momentum)?;

        // Phase 4: bootstrap entropy for the next epoch.
        if config.strict_proxy {
            let clean = forward(&state.params, graph, selection, Mode::Eval, &mut dropout_rng).map_err(&on_err)?;
            state.routing.advance(clean.probs(), model.gamma).map_err(&on_err)?;
        } else {
            state.routing.advance(pass.probs(), model.gamma).map_err(&on_err)?;
        }

        // Metrics under the same protocol as the final evaluation.
        let eval = evaluate(&state.params, graph, config.policy, &mut eval_rng).map_err(&on_err)?;
        let predictions = eval.predictions;

        let report = EpochReport {
            epoch,
            loss_task: losses.task,
            loss_re: losses.routing_entropy,
            loss_lb: losses.load_balance,
            loss_total: losses.total,
            acc_train: accuracy(&predictions, labels, &nodes.train),
            acc_val: accuracy(&predictions, labels, &nodes.val),
            acc_test: accuracy(&predictions, labels, &nodes.test),
            mean_active_experts: pass.trace.mean_active_experts(),
            per_expert_load: pass.trace.per_expert_load(),
        };
        observer.on_epoch_end(&report);
        let val = report.acc_val.unwrap_or(0.0);
        state.history.push(report);
        state.epoch = epoch + 1;

        if val > state.best_val {
            state.best_val = val;
            state.best_epoch = epoch;
            state.best = state.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                state.stopped_early = true;
                log::info!("early stop at epoch {epoch}, best epoch {}", state.best_epoch);
                break;
            }
        }
    }
    Ok(state)
}

/// Accuracy per split; `None` for empty splits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub train: Option<f64>,
    pub val: Option<f64>,
    pub test: Option<f64>,
}

impl SplitAccuracy {
    pub fn compute<T: Scalar>(graph: &Graph<T>, predictions: &[usize]) -> Self {
        let masks = graph.masks();
        let acc = |s| accuracy(predictions, graph.labels(), &masks.nodes(s));
        SplitAccuracy {
            train: acc(Split::Train),
            val: acc(Split::Val),
            test: acc(Split::Test),
        }
    }
}

pub struct Evaluation<T> {
    pub probs: Matrix<T>,
    pub predictions: Vec<usize>,
    /// Entropy that set the budgets (first pass), or of the output when
    /// the policy needs no budgets.
    pub entropy: Vec<f64>,
    /// Thresholds of the reported pass; `None` under top-k.
    pub thresholds: Option<Vec<f64>>,
    pub trace: RoutingTrace<T>,
    pub accuracy: SplitAccuracy,
}

/// Eval-mode prediction. Entropy-driven policies run a full-activation
/// pass, map its entropy to thresholds centred on the mean over all nodes
/// and report a second, routed pass. `rng` is used only to permute
/// thresholds under [`RoutingPolicy::ShuffledAdaptive`].
pub fn evaluate<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    graph: &Graph<T>,
    policy: RoutingPolicy,
    rng: &mut R,
) -> Result<Evaluation<T>> {
    let config = params.config();
    policy.validate(config.experts)?;
    let n = graph.num_nodes();
    // Eval mode never draws dropout masks.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let (entropy, thresholds) = match policy {
        RoutingPolicy::Adaptive | RoutingPolicy::ShuffledAdaptive => {
            let full = vec![1.0; n];
            let first = forward(params, graph, Selection::TopP(&full), Mode::Eval, &mut unused)?;
            let entropy = predictive_entropy(first.probs())?;
            let mut t = map_budget_around(&entropy, mean(&entropy), config.gamma);
            if policy == RoutingPolicy::ShuffledAdaptive {
                t.shuffle(rng);
            }
            (Some(entropy), Some(t))
        }
        RoutingPolicy::FixedTopP { p } => (None, Some(vec![p; n])),
        RoutingPolicy::StaticTopK { .. } => (None, None),
    };
    let selection = match (&thresholds, policy) {
        (Some(t), _) => Selection::TopP(t),
        (None, RoutingPolicy::StaticTopK { k }) => Selection::TopK(k),
        (None, _) => unreachable!("only top-k evaluates without thresholds"),
    };
    let pass = forward(params, graph, selection, Mode::Eval, &mut unused)?;
    let probs = pass.probs().clone();
    let predictions = probs.argmax_rows();
    let entropy = match entropy {
        Some(e) => e,
        None => predictive_entropy(&probs)?,
    };
    Ok(Evaluation {
        accuracy: SplitAccuracy::compute(graph, &predictions),
        probs,
        predictions,
        entropy,
        thresholds,
        trace: pass.trace,
    })
}
