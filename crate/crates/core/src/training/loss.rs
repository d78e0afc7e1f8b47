//! Classification loss and the two routing regularizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{ForwardPass, RoutingTrace};
use crate::numerics::{Matrix, Var};
use crate::scalar::Scalar;

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub routing_entropy: f64,
    pub load_balance: f64,
    pub total: f64,
    pub lambda_re: f64,
    pub lambda_lb: f64,
}

/// `task + λ1 · routing_entropy + λ2 · load_balance`.
pub fn total_loss(task: f64, routing_entropy: f64, load_balance: f64, lambda_re: f64, lambda_lb: f64) -> LossBreakdown {
    LossBreakdown {
        task,
        routing_entropy,
        load_balance,
        total: task + lambda_re * routing_entropy + lambda_lb * load_balance,
        lambda_re,
        lambda_lb,
    }
}

/// Mean cross-entropy over `nodes`, log clamped at `1e-12`.
pub fn task_loss<T: Scalar>(probs: &Matrix<T>, labels: &[usize], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::invalid("task loss over an empty training set"));
    }
    let mut total = 0.0;
    for &v in nodes {
        total -= probs.get(v, labels[v]).as_f64().max(PROB_FLOOR).ln();
    }
    Ok(total / nodes.len() as f64)
}

/// Shannon entropy (natural log) of the router distributions, averaged over
/// nodes and layers.
pub fn routing_entropy_loss<T: Scalar>(trace: &RoutingTrace<T>) -> f64 {
    let layers = trace.layers.len().max(1) as f64;
    let mut total = 0.0;
    for layer in &trace.layers {
        let n = layer.probs.rows().max(1) as f64;
        let h: f64 = layer
            .probs
            .as_slice()
            .iter()
            .map(|p| p.as_f64())
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        total += h / n;
    }
    total / layers
}

/// `Σ_l K Σ_i f_i Q_i` with `f` the selection frequency and `Q` the mean
/// router probability of each expert.
pub fn load_balance_loss<T: Scalar>(trace: &RoutingTrace<T>) -> f64 {
    trace
        .layers
        .iter()
        .map(|layer| {
            let k = layer.probs.cols() as f64;
            let n = layer.probs.rows().max(1) as f64;
            let q: Vec<f64> = layer.probs.sum_rows().as_slice().iter().map(|s| s.as_f64() / n).collect();
            k * layer
                .selection_frequency()
                .iter()
                .zip(&q)
                .map(|(f, q)| f * q)
                .sum::<f64>()
        })
        .sum()
}

/// Handles of the objective recorded on a forward tape.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub task: Var,
    pub routing_entropy: Var,
    pub load_balance: Var,
    pub total: Var,
}

/// Records the full objective on the pass's tape. Selection frequencies
/// enter the load-balance term as constants, so its gradient flows through
/// the mean router probabilities only.
pub fn attach_objective<T: Scalar>(
    pass: &mut ForwardPass<T>,
    labels: &[usize],
    train_nodes: &[usize],
    lambda_re: f64,
    lambda_lb: f64,
) -> Result<(Objective, LossBreakdown)> {
    let frequencies: Vec<Vec<f64>> = pass.trace.layers.iter().map(|l| l.selection_frequency()).collect();
    attach_objective_with_frequencies(pass, labels, train_nodes, lambda_re, lambda_lb, &frequencies)
}

/// [`attach_objective`] with explicit per-layer selection frequencies.
pub fn attach_objective_with_frequencies<T: Scalar>(
    pass: &mut ForwardPass<T>,
    labels: &[usize],
    train_nodes: &[usize],
    lambda_re: f64,
    lambda_lb: f64,
    frequencies: &[Vec<f64>],
) -> Result<(Objective, LossBreakdown)> {
    if frequencies.len() != pass.router_probs.len() {
        return Err(Error::shape(
            "attach_objective",
            format!("{} frequency vectors for {} layers", frequencies.len(), pass.router_probs.len()),
        ));
    }
    let targets: Vec<(usize, usize)> = train_nodes.iter().map(|&v| (v, labels[v])).collect();
    let tape = &mut pass.tape;
    let task = tape.nll(pass.probs, targets, T::from_f64_lossy(PROB_FLOOR))?;

    let mut re_sum: Option<Var> = None;
    let mut lb_sum: Option<Var> = None;
    for (&pi, freq) in pass.router_probs.iter().zip(frequencies) {
        let k = freq.len() as f64;
        let e = tape.entropy_mean(pi)?;
        let coeffs = freq.iter().map(|&f| T::from_f64_lossy(k * f)).collect();
        let b = tape.col_mean_dot(pi, coeffs)?;
        re_sum = Some(match re_sum {
            None => e,
            Some(acc) => tape.add(acc, e)?,
        });
        lb_sum = Some(match lb_sum {
            None => b,
            Some(acc) => tape.add(acc, b)?,
        });
    }
    let re_sum = re_sum.ok_or_else(|| Error::invalid("model has no layers"))?;
    let lb = lb_sum.ok_or_else(|| Error::invalid("model has no layers"))?;
    let layers = pass.router_probs.len() as f64;
    let re = tape.scale(re_sum, T::from_f64_lossy(1.0 / layers))?;
    let weighted_re = tape.scale(re, T::from_f64_lossy(lambda_re))?;
    let weighted_lb = tape.scale(lb, T::from_f64_lossy(lambda_lb))?;
    let total = tape.add(task, weighted_re)?;
    let total = tape.add(total, weighted_lb)?;

    let breakdown = LossBreakdown {
        task: tape.scalar(task).as_f64(),
        routing_entropy: tape.scalar(re).as_f64(),
        load_balance: tape.scalar(lb).as_f64(),
        total: tape.scalar(total).as_f64(),
        lambda_re,
        lambda_lb,
    };
    Ok((
        Objective {
            task,
            routing_entropy: re,
            load_balance: lb,
            total,
        },
        breakdown,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::LayerTrace;

    fn trace(rows: &[Vec<f64>], selected: Vec<Vec<usize>>) -> RoutingTrace<f64> {
        let probs = Matrix::from_rows(rows).unwrap();
        let weights = Matrix::zeros(probs.rows(), probs.cols());
        RoutingTrace {
            layers: vec![LayerTrace {
                probs,
                selected,
                weights,
            }],
        }
    }

    #[test]
    fn task_loss_examples() {
        let perfect = Matrix::<f64>::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(task_loss(&perfect, &[0, 1], &[0, 1]).unwrap(), 0.0);
        let uniform = Matrix::<f64>::filled(3, 4, 0.25);
        assert!((task_loss(&uniform, &[0, 1, 2], &[0, 1, 2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let two = Matrix::<f64>::from_rows(&[[0.5, 0.5, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]]).unwrap();
        let expected = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((task_loss(&two, &[0, 3], &[0, 1]).unwrap() - expected).abs() < 1e-12);
        assert!(task_loss(&two, &[0, 3], &[]).is_err());
    }

    #[test]
    fn routing_entropy_examples() {
        let onehot = trace(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], vec![vec![0], vec![1]]);
        assert_eq!(routing_entropy_loss(&onehot), 0.0);
        let uniform = trace(&[vec![0.25; 4], vec![0.25; 4]], vec![vec![0], vec![1]]);
        assert!((routing_entropy_loss(&uniform) - 4f64.ln()).abs() < 1e-12);
        let half = trace(&[vec![0.5, 0.5]], vec![vec![0]]);
        assert!((routing_entropy_loss(&half) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn load_balance_examples() {
        let k = 4;
        let uniform = vec![vec![0.25; k]; 8];
        let balanced = trace(&uniform, (0..8).map(|v| vec![v % k]).collect());
        assert!((load_balance_loss(&balanced) - 1.0).abs() < 1e-15);
        let dense = trace(&uniform, vec![(0..k).collect(); 8]);
        assert!((load_balance_loss(&dense) - k as f64).abs() < 1e-15);
        let collapsed = trace(&vec![vec![1.0, 0.0, 0.0, 0.0]; 8], vec![vec![0]; 8]);
        assert!((load_balance_loss(&collapsed) - k as f64).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.7, 3.0, 9.0, 0.0, 0.0).total, 0.7);
        assert!((total_loss(1.0, 2.0, 3.0, 0.0001, 0.1).total - 1.3002).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0001, 0.1).total, 0.0);
    }
}
