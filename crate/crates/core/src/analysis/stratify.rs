//! Entropy-decile stratification and expert-activation statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::RoutingTrace;
use crate::scalar::Scalar;

/// Splits `len` items into `parts` contiguous chunks whose sizes differ by
/// at most one, larger chunks first.
pub fn equal_partition(len: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let base = len / parts;
    let extra = len % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

/// `nodes` ordered by ascending `entropy`; equal values keep input order.
pub fn sort_by_entropy(nodes: &[usize], entropy: &[f64]) -> Vec<usize> {
    let mut sorted = nodes.to_vec();
    sorted.sort_by(|&a, &b| entropy[a].total_cmp(&entropy[b]));
    sorted
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecileBucket {
    pub decile: usize,
    pub entropy_min: f64,
    pub entropy_max: f64,
    pub count: usize,
    pub accuracy: f64,
    /// Mean activated experts per layer.
    pub mean_active: Vec<f64>,
}

impl DecileBucket {
    /// Mean activated experts averaged over layers.
    pub fn mean_active_overall(&self) -> f64 {
        self.mean_active.iter().sum::<f64>() / self.mean_active.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecileReport {
    pub buckets: Vec<DecileBucket>,
}

impl DecileReport {
    pub fn total_count(&self) -> usize {
        self.buckets.iter().map(|b| b.count).sum()
    }

    pub fn mean_active_series(&self) -> Vec<f64> {
        self.buckets.iter().map(DecileBucket::mean_active_overall).collect()
    }

    /// Rank correlation between decile index and mean activated experts.
    pub fn activation_trend(&self) -> f64 {
        let idx: Vec<f64> = (0..self.buckets.len()).map(|i| i as f64).collect();
        spearman(&idx, &self.mean_active_series())
    }
}

/// Stratifies `eval_nodes` into ten equal buckets of ascending proxy
/// entropy and reports accuracy and expert activation per bucket.
pub fn stratify_by_entropy<T: Scalar>(
    proxy_entropy: &[f64],
    eval_nodes: &[usize],
    predictions: &[usize],
    labels: &[usize],
    trace: &RoutingTrace<T>,
) -> Result<DecileReport> {
    const DECILES: usize = 10;
    if eval_nodes.len() < DECILES {
        return Err(Error::invalid(format!(
            "{} evaluation nodes, need at least {DECILES}",
            eval_nodes.len()
        )));
    }
    let n = proxy_entropy.len();
    if predictions.len() != n || labels.len() != n || trace.layers.iter().any(|l| l.selected.len() != n) {
        return Err(Error::shape("stratify_by_entropy", "entropy, predictions, labels and trace disagree on N"));
    }
    let sorted = sort_by_entropy(eval_nodes, proxy_entropy);
    let counts: Vec<Vec<usize>> = trace.layers.iter().map(|l| l.active_counts()).collect();
    let buckets = equal_partition(sorted.len(), DECILES)
        .into_iter()
        .enumerate()
        .map(|(decile, range)| {
            let members = &sorted[range];
            let size = members.len() as f64;
            let hits = members.iter().filter(|&&v| predictions[v] == labels[v]).count();
            DecileBucket {
                decile,
                entropy_min: proxy_entropy[members[0]],
                entropy_max: proxy_entropy[*members.last().expect("buckets are non-empty")],
                count: members.len(),
                accuracy: hits as f64 / size,
                mean_active: counts
                    .iter()
                    .map(|c| members.iter().map(|&v| c[v] as f64).sum::<f64>() / size)
                    .collect(),
            }
        })
        .collect();
    Ok(DecileReport { buckets })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    /// Mean activated experts (averaged over layers) per entropy decile.
    pub decile_active: Vec<f64>,
    /// `heat[i][q]`: mean routing weight of expert `i` over nodes in
    /// entropy quartile `q`, averaged over layers.
    pub heat: Vec<Vec<f64>>,
    /// Mean routing weight per expert over all considered nodes.
    pub global_weight: Vec<f64>,
}

/// Activation counts per entropy decile and the expert-by-quartile
/// routing-weight matrix over `nodes`.
pub fn activation_stats<T: Scalar>(trace: &RoutingTrace<T>, entropy: &[f64], nodes: &[usize]) -> Result<ActivationStats> {
    if nodes.len() < 10 {
        return Err(Error::invalid(format!("{} nodes, need at least 10", nodes.len())));
    }
    let first = trace.layers.first().ok_or_else(|| Error::invalid("empty routing trace"))?;
    let k = first.weights.cols();
    let sorted = sort_by_entropy(nodes, entropy);
    let active = trace.active_per_node();
    let layers = trace.layers.len() as f64;
    let weight = |v: usize, i: usize| -> f64 {
        trace.layers.iter().map(|l| l.weights.get(v, i).as_f64()).sum::<f64>() / layers
    };
    let mean_over = |members: &[usize], f: &dyn Fn(usize) -> f64| -> f64 {
        members.iter().map(|&v| f(v)).sum::<f64>() / members.len() as f64
    };

    let decile_active = equal_partition(sorted.len(), 10)
        .into_iter()
        .map(|r| mean_over(&sorted[r], &|v| active[v]))
        .collect();
    let quartiles = equal_partition(sorted.len(), 4);
    let heat = (0..k)
        .map(|i| {
            quartiles
                .iter()
                .map(|r| mean_over(&sorted[r.clone()], &|v| weight(v, i)))
                .collect()
        })
        .collect();
    let global_weight = (0..k).map(|i| mean_over(&sorted, &|v| weight(v, i))).collect();
    Ok(ActivationStats {
        decile_active,
        heat,
        global_weight,
    })
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Zero when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs equal-length inputs");
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::LayerTrace;
    use crate::numerics::Matrix;

    fn full_trace(n: usize, k: usize, layers: usize) -> RoutingTrace<f64> {
        let layer = LayerTrace {
            probs: Matrix::filled(n, k, 1.0 / k as f64),
            selected: vec![(0..k).collect(); n],
            weights: Matrix::filled(n, k, 1.0 / k as f64),
        };
        RoutingTrace {
            layers: vec![layer; layers],
        }
    }

    #[test]
    fn partition_sizes() {
        let sizes: Vec<usize> = equal_partition(23, 10).into_iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);
        assert!(equal_partition(100, 10).iter().all(|r| r.len() == 10));
    }

    #[test]
    fn ties_keep_node_order() {
        let entropy = vec![0.5; 25];
        let nodes: Vec<usize> = (0..25).collect();
        let trace = full_trace(25, 3, 2);
        let report = stratify_by_entropy(&entropy, &nodes, &vec![0; 25], &vec![0; 25], &trace).unwrap();
        assert_eq!(report.total_count(), 25);
        let counts: Vec<usize> = report.buckets.iter().map(|b| b.count).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert!(report.buckets.iter().all(|b| b.accuracy == 1.0));
        assert!(report.buckets.iter().all(|b| b.mean_active == vec![3.0, 3.0]));
        assert_eq!(sort_by_entropy(&nodes, &entropy), nodes);
    }

    #[test]
    fn too_few_nodes() {
        let trace = full_trace(5, 2, 1);
        assert!(stratify_by_entropy(&[0.1; 5], &[0, 1, 2, 3, 4], &[0; 5], &[0; 5], &trace).is_err());
    }

    #[test]
    fn heat_quartiles_average_to_global() {
        let n = 40;
        let k = 3;
        let weights = Matrix::from_fn(n, k, |v, i| {
            let raw = [1.0 + (v % 7) as f64, 2.0 + (v % 3) as f64, 0.5 + (v % 5) as f64];
            raw[i] / raw.iter().sum::<f64>()
        });
        let trace = RoutingTrace {
            layers: vec![LayerTrace {
                probs: weights.clone(),
                selected: vec![(0..k).collect(); n],
                weights,
            }],
        };
        let entropy: Vec<f64> = (0..n).map(|v| ((v * 17) % n) as f64 / n as f64).collect();
        let nodes: Vec<usize> = (0..n).collect();
        let stats = activation_stats(&trace, &entropy, &nodes).unwrap();
        for i in 0..k {
            let avg = stats.heat[i].iter().sum::<f64>() / 4.0;
            assert!((avg - stats.global_weight[i]).abs() < 1e-12);
        }
        for q in 0..4 {
            let col: f64 = (0..k).map(|i| stats.heat[i][q]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
        assert!(stats.decile_active.iter().all(|&a| a == k as f64));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
        // Ties: ranks of y are [1.5, 1.5, 3, 4].
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]);
        assert!((r - 0.9486832980505138).abs() < 1e-12);
    }
}
