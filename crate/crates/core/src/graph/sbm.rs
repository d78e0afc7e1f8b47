use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Stochastic block model with Gaussian class-conditional features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub n: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Radius of the sphere the class means are drawn from.
    pub signal: f64,
    pub seed: u64,
}

impl SbmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("SBM needs at least one node"));
        }
        if self.classes == 0 || self.n < self.classes {
            return Err(Error::invalid(format!(
                "SBM needs 1 <= classes <= n, got {} classes for {} nodes",
                self.classes, self.n
            )));
        }
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.signal.is_finite() && self.signal >= 0.0) {
            return Err(Error::invalid(format!("signal strength {} must be >= 0", self.signal)));
        }
        Ok(())
    }
}

/// Samples a graph from `spec`. Nodes are assigned to classes in contiguous,
/// near-equal blocks; each unordered pair is connected independently with
/// `p_in` (same class) or `p_out` (different classes).
pub fn generate_sbm<T: Scalar>(spec: &SbmSpec) -> Result<Graph<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let c = spec.classes;
    let base = n / c;
    let extra = n % c;
    let mut labels = Vec::with_capacity(n);
    for class in 0..c {
        let size = base + usize::from(class < extra);
        labels.extend(std::iter::repeat_n(class, size));
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] { spec.p_in } else { spec.p_out };
            // consume one draw per pair regardless of p so edge sets stay
            // aligned across probability settings
            let u: f64 = rng.random();
            if u < p {
                edges.push((i, j));
            }
        }
    }

    let d = spec.feature_dim;
    let mut means = Matrix::<f64>::zeros(c, d);
    for class in 0..c {
        let raw: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (j, v) in raw.iter().enumerate() {
            means.set(class, j, v / norm * spec.signal);
        }
    }
    let features = Matrix::from_fn(n, d, |i, j| {
        let noise: f64 = rng.sample(StandardNormal);
        T::from_f64_lossy(means.get(labels[i], j) + noise)
    });
    Graph::new(&edges, features, labels, Some(c))
}
