use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Masks, Split};
use crate::scalar::Scalar;

/// Assigns train/val/test masks, stratified by class.
///
/// Within each class the members are shuffled and cut into consecutive runs
/// whose sizes follow `fractions` under largest-remainder rounding. A class
/// too small to place a node in every requested split falls back to the
/// plain proportional counts and logs a warning.
pub fn split_nodes<T: Scalar>(g: Graph<T>, fractions: (f64, f64, f64), seed: u64) -> Result<Graph<T>> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || fr.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to at most 1"
        )));
    }
    let requested = fr.iter().filter(|&&f| f > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![None; g.num_nodes()];
    for class in 0..g.num_classes() {
        let mut members: Vec<usize> = (0..g.num_nodes())
            .filter(|&v| g.labels()[v] == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        if members.len() < requested {
            log::warn!(
                "class {class} has {} nodes for {requested} splits; using proportional counts",
                members.len()
            );
        }
        let counts = allocate(members.len(), &fr);
        let mut cursor = 0;
        for (split, count) in Split::ALL.into_iter().zip(counts) {
            for &v in &members[cursor..cursor + count] {
                assignment[v] = Some(split);
            }
            cursor += count;
        }
    }
    g.with_masks(Masks::from_assignment(assignment))
}

/// Largest-remainder apportionment of `round(n · Σ fractions)` slots.
fn allocate(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let total = ((n as f64) * fractions.iter().sum::<f64>()).round().min(n as f64) as usize;
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    // stable: ties favor the earlier split
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut assigned: usize = counts.iter().sum();
    for &i in order.iter().cycle().take(3) {
        if assigned >= total {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            assigned += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, SbmSpec};

    fn graph(n: usize, classes: usize) -> Graph<f32> {
        generate_sbm(&SbmSpec {
            n,
            classes,
            feature_dim: 2,
            p_in: 0.1,
            p_out: 0.05,
            signal: 1.0,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn standard_split_sizes() {
        let g = split_nodes(graph(100, 4), (0.48, 0.32, 0.20), 0).unwrap();
        let m = g.masks();
        assert_eq!(
            (m.count(Split::Train), m.count(Split::Val), m.count(Split::Test)),
            (48, 32, 20)
        );
    }

    #[test]
    fn all_train() {
        let g = split_nodes(graph(30, 3), (1.0, 0.0, 0.0), 0).unwrap();
        assert_eq!(g.masks().count(Split::Train), 30);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = split_nodes(graph(50, 2), (0.5, 0.25, 0.25), 7).unwrap();
        let b = split_nodes(graph(50, 2), (0.5, 0.25, 0.25), 7).unwrap();
        assert_eq!(a.masks(), b.masks());
        let c = split_nodes(graph(50, 2), (0.5, 0.25, 0.25), 8).unwrap();
        assert_ne!(a.masks(), c.masks());
    }

    #[test]
    fn tiny_classes_fall_back() {
        let g = split_nodes(graph(4, 2), (0.48, 0.32, 0.20), 1).unwrap();
        let m = g.masks();
        let placed = m.count(Split::Train) + m.count(Split::Val) + m.count(Split::Test);
        assert!(placed <= 4);
    }

    #[test]
    fn invalid_fractions_rejected() {
        assert!(split_nodes(graph(10, 2), (0.6, 0.6, 0.0), 0).is_err());
        assert!(split_nodes(graph(10, 2), (-0.1, 0.5, 0.0), 0).is_err());
    }

    #[test]
    fn allocation_preserves_rounded_total() {
        assert_eq!(allocate(25, &[0.48, 0.32, 0.20]), [12, 8, 5]);
        assert_eq!(allocate(10, &[1.0, 0.0, 0.0]), [10, 0, 0]);
        assert_eq!(allocate(7, &[0.5, 0.25, 0.25]).iter().sum::<usize>(), 7);
    }
}
