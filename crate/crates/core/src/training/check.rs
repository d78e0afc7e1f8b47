//! Finite-difference check of the full training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::moe::{forward, ModelParams, Mode, Selection};
use crate::numerics::Matrix;
use crate::scalar::Scalar;
use crate::training::loss::attach_objective;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    /// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)` over the tensor's entries.
    pub rel_error: f64,
}

struct Eval<T> {
    loss: f64,
    grads: Vec<Matrix<T>>,
    selected: Vec<Vec<Vec<usize>>>,
}

fn evaluate_objective<T: Scalar>(
    params: &ModelParams<T>,
    graph: &Graph<T>,
    selection: Selection<'_>,
    train_nodes: &[usize],
    lambdas: (f64, f64),
    with_grads: bool,
) -> Result<Eval<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pass = forward(params, graph, selection, Mode::Train, &mut rng)?;
    let (objective, losses) = attach_objective(&mut pass, graph.labels(), train_nodes, lambdas.0, lambdas.1)?;
    let grads = if with_grads {
        let g = pass.tape.backward(objective.total)?;
        pass.params.iter().map(|&v| g.wrt(v)).collect()
    } else {
        Vec::new()
    };
    Ok(Eval {
        loss: losses.total,
        grads,
        selected: pass.trace.layers.into_iter().map(|l| l.selected).collect(),
    })
}

/// Compares reverse-mode gradients of the total objective with central
/// differences of step `step`, for every trainable tensor. The model must
/// have dropout and batch normalization disabled; a perturbation that
/// changes any expert selection is reported as an error.
pub fn check_model_gradients<T: Scalar>(
    params: &ModelParams<T>,
    graph: &Graph<T>,
    selection: Selection<'_>,
    train_nodes: &[usize],
    lambda_re: f64,
    lambda_lb: f64,
    step: f64,
) -> Result<Vec<TensorCheck>> {
    let config = params.config();
    if config.dropout != 0.0 || config.batch_norm {
        return Err(Error::invalid("gradient check needs dropout 0 and no batch normalization"));
    }
    let lambdas = (lambda_re, lambda_lb);
    let base = evaluate_objective(params, graph, selection, train_nodes, lambdas, true)?;
    let mut work = params.clone();
    let mut out = Vec::new();
    for id in params.ids() {
        let tensor = &params.tensors()[id.index()];
        if !tensor.role.trainable() {
            continue;
        }
        let analytic = &base.grads[id.index()];
        let (mut diff, mut a_norm, mut n_norm) = (0.0, 0.0, 0.0);
        for j in 0..tensor.value.len() {
            let original = tensor.value.as_slice()[j];
            let mut probe = |delta: f64| -> Result<f64> {
                work.get_mut(id).as_mut_slice()[j] = original + T::from_f64_lossy(delta);
                let e = evaluate_objective(&work, graph, selection, train_nodes, lambdas, false)?;
                if e.selected != base.selected {
                    return Err(Error::invalid(format!(
                        "perturbing {}[{j}] changed the expert selection",
                        tensor.name
                    )));
                }
                Ok(e.loss)
            };
            let plus = probe(step)?;
            let minus = probe(-step)?;
            work.get_mut(id).as_mut_slice()[j] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.as_slice()[j].as_f64();
            diff += (a - numeric).powi(2);
            a_norm += a * a;
            n_norm += numeric * numeric;
        }
        let denom = a_norm.sqrt().max(n_norm.sqrt()).max(1e-8);
        out.push(TensorCheck {
            name: tensor.name.clone(),
            rel_error: diff.sqrt() / denom,
        });
    }
    Ok(out)
}
