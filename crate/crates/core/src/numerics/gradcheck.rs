//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::scalar::Scalar;

/// Norms below this are treated as zero when forming relative errors.
const NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct LeafCheck {
    pub leaf: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares reverse-mode gradients of a scalar computation against central
/// differences with the given step, for every entry of every leaf.
///
/// `f` receives a fresh tape and the leaf handles (in `params` order) and
/// must return a 1x1 output. It is evaluated `2·Σ|params| + 2` times and has
/// to be deterministic: two evaluations at the base point must agree bit for
/// bit, otherwise the check is rejected.
pub fn grad_check<T, F>(params: &[Matrix<T>], step: f64, tol: f64, mut f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut eval = |values: &[Matrix<T>]| -> Result<(Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        if tape.value(out).shape() != (1, 1) {
            return Err(Error::shape("grad_check", "objective must be 1x1"));
        }
        if !tape.scalar(out).is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok((tape, leaves, out))
    };

    let (tape, leaves, out) = eval(params)?;
    let base = tape.scalar(out);
    let again = {
        let (t2, _, o2) = eval(params)?;
        t2.scalar(o2)
    };
    if base != again {
        return Err(Error::NonDeterministic(format!(
            "objective evaluated to {base} and then {again} at identical inputs"
        )));
    }
    let grads = tape.backward(out)?;

    let mut working: Vec<Matrix<T>> = params.to_vec();
    let h = T::from_f64_lossy(step);
    let mut report = Vec::with_capacity(params.len());
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(*leaf);
        if !analytic.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of leaf {li}")));
        }
        let mut numeric = Matrix::<f64>::zeros(analytic.rows(), analytic.cols());
        for e in 0..working[li].len() {
            let orig = working[li].as_slice()[e];
            working[li].as_mut_slice()[e] = orig + h;
            let (t, _, o) = eval(&working)?;
            let plus = t.scalar(o).as_f64();
            working[li].as_mut_slice()[e] = orig - h;
            let (t, _, o) = eval(&working)?;
            let minus = t.scalar(o).as_f64();
            working[li].as_mut_slice()[e] = orig;
            // divide by the realized step, which differs from `step` in f32
            let realized = (orig + h).as_f64() - (orig - h).as_f64();
            numeric.as_mut_slice()[e] = (plus - minus) / realized;
        }
        let analytic = analytic.cast::<f64>();
        let diff = analytic.sub(&numeric)?;
        let an = analytic.frobenius_norm();
        let nn = numeric.frobenius_norm();
        let rel = diff.frobenius_norm() / an.max(nn).max(NORM_FLOOR);
        report.push(LeafCheck {
            leaf: li,
            rel_error: rel,
            max_abs_error: diff.as_slice().iter().fold(0.0, |m, v| m.max(v.abs())),
            analytic_norm: an,
            numeric_norm: nn,
        });
    }
    let max_rel_error = report.iter().map(|l| l.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        leaves: report,
        max_rel_error,
        tolerance: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    use crate::numerics::SparseCsr;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    fn check<F>(params: &[Matrix<f64>], f: F)
    where
        F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let r = grad_check(params, 1e-4, 1e-4, f).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn quadratic_matches_analytic() {
        let w = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let r = grad_check(&[w], 1e-4, 1e-8, |t, l| {
            let sq = t.mul(l[0], l[0])?;
            t.sum(sq)
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::from_rows(&[[1.0f64, 2.0]]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(w).as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_and_affine_ops() {
        check(&[random(5, 3, 1), random(3, 4, 2)], |t, l| {
            let c = t.matmul(l[0], l[1])?;
            t.sum(c)
        });
        check(&[random(4, 3, 6), random(1, 3, 7)], |t, l| {
            let x = t.add_row(l[0], l[1])?;
            let r = t.relu(x)?;
            let y = t.scale(r, 1.7)?;
            let z = t.add(y, l[0])?;
            let w = t.mul(z, l[0])?;
            t.sum(w)
        });
    }

    #[test]
    fn softmax_and_entropy() {
        let weights = random(3, 4, 4);
        check(&[random(3, 4, 3)], move |t, l| {
            let s = t.softmax_rows(l[0])?;
            let w = t.constant(weights.clone());
            let ws = t.mul(s, w)?;
            let a = t.sum(ws)?;
            let e = t.entropy_mean(s)?;
            t.add(a, e)
        });
    }

    #[test]
    fn sigmoid_row_norm_col_mean() {
        check(&[random(4, 3, 5)], |t, l| {
            let s = t.sigmoid(l[0])?;
            let n = t.row_norm(s)?;
            t.col_mean_dot(n, vec![0.5, -1.0, 2.0])
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let edges: Vec<(usize, usize)> = (0..12)
            .map(|_| (rng.random_range(0..6), rng.random_range(0..6)))
            .collect();
        let adj = Arc::new(SparseCsr::<f64>::mean_normalized(6, &edges).unwrap());
        let mask = vec![
            true, false, true, true, true, false, false, true, true, true, true, true, true, false,
            false, false, true, false,
        ];
        check(
            &[random(6, 3, 10), random(6, 3, 11), random(1, 3, 12), random(1, 3, 13)],
            |t, l| {
                let h = t.spmm(&adj, l[0])?;
                let (bn, _) = t.batch_norm(h, l[2], l[3])?;
                let pi = t.softmax_rows(l[1])?;
                let w = t.masked_renorm(pi, mask.clone())?;
                let doubled = t.add(bn, bn)?;
                let mixed = t.mix(w, &[bn, doubled, h])?;
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                let d = t.dropout(mixed, 0.7, &mut rng)?;
                let s = t.softmax_rows(d)?;
                t.nll(s, vec![(0, 1), (1, 2), (3, 0), (5, 1)], 1e-12)
            },
        );
    }

    #[test]
    fn frozen_norm_matches_finite_differences() {
        let mean = random(1, 3, 30);
        let var = random(1, 3, 31).map(|v| v.abs() + 0.1);
        check(&[random(5, 3, 32), random(1, 3, 33), random(1, 3, 34)], |t, l| {
            let y = t.batch_norm_frozen(l[0], l[1], l[2], &mean, &var)?;
            let s = t.softmax_rows(y)?;
            t.entropy_mean(s)
        });
    }

    #[test]
    fn reseeded_dropout_is_flagged() {
        let mut calls = 0u64;
        let result = grad_check(&[random(4, 4, 1)], 1e-4, 1e-4, |t, l| {
            calls += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(calls);
            let d = t.dropout(l[0], 0.5, &mut rng)?;
            t.sum(d)
        });
        assert!(matches!(result, Err(Error::NonDeterministic(_))));
    }
}
