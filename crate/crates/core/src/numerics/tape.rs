//! Reverse-mode differentiation over rank-2 values.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Calling
//! [`Tape::backward`] walks the record in reverse and returns [`Gradients`]
//! for every node. The tape is never mutated by `backward`, so replaying it
//! yields identical gradients.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SparseCsr};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const BATCH_NORM_EPS: f64 = 1e-5;
const ROW_NORM_EPS: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    SpMM(Arc<SparseCsr<T>>, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    MulConst(Var, Matrix<T>),
    SoftmaxRows(Var),
    RowNorm(Var),
    MaskedRenorm {
        probs: Var,
        mask: Vec<bool>,
        totals: Vec<T>,
    },
    Mix {
        weights: Var,
        experts: Vec<Var>,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        normalized: Matrix<T>,
        inv_std: Vec<T>,
    },
    FrozenNorm {
        x: Var,
        scale: Var,
        shift: Var,
        normalized: Matrix<T>,
        inv_std: Vec<T>,
    },
    Nll {
        probs: Var,
        targets: Vec<(usize, usize)>,
        floor: T,
    },
    EntropyMean(Var),
    ColMeanDot {
        x: Var,
        coeffs: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Batch statistics produced by [`Tape::batch_norm`], used to update running
/// averages outside the tape.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Matrix<T>,
    pub var: Matrix<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("tape node {}", self.nodes.len())));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.get(0, 0)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b))
    }

    /// Sparse-dense product; the sparse operand is treated as constant.
    pub fn spmm(&mut self, adj: &Arc<SparseCsr<T>>, x: Var) -> Result<Var> {
        let value = adj.spmm(self.value(x))?;
        self.push(value, Op::SpMM(Arc::clone(adj), x))
    }

    /// `x + bias` with a 1 x cols bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row_vector(self.value(bias))?;
        self.push(value, Op::AddRow(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push(value, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).scale(s);
        self.push(value, Op::Scale(x, s))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        self.push(value, Op::Mul(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// Inverted dropout: survivors are scaled by `1 / keep`. `keep = 1`
    /// returns `x` unchanged without touching the RNG.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, keep: f64, rng: &mut R) -> Result<Var> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::invalid(format!("dropout keep-probability {keep} outside (0, 1]")));
        }
        if keep == 1.0 {
            return Ok(x);
        }
        let (r, c) = self.value(x).shape();
        let survivor = T::from_f64_lossy(1.0 / keep);
        let mask = Matrix::from_fn(r, c, |_, _| {
            if rng.random::<f64>() < keep {
                survivor
            } else {
                T::zero()
            }
        });
        let value = self.value(x).hadamard(&mask)?;
        self.push(value, Op::MulConst(x, mask))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = softmax_rows(self.value(x));
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Scales each row to unit Euclidean length.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let mut value = src.clone();
        for r in 0..src.rows() {
            let n = row_l2(src.row(r));
            for v in value.row_mut(r) {
                *v = *v / n;
            }
        }
        self.push(value, Op::RowNorm(x))
    }

    /// Keeps the masked entries of each probability row and rescales them to
    /// sum to one; everything else becomes exactly zero.
    pub fn masked_renorm(&mut self, probs: Var, mask: Vec<bool>) -> Result<Var> {
        let src = self.value(probs);
        let (rows, cols) = src.shape();
        if mask.len() != rows * cols {
            return Err(Error::shape(
                "masked_renorm",
                format!("mask of {} for {rows}x{cols} probabilities", mask.len()),
            ));
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut totals = Vec::with_capacity(rows);
        for r in 0..rows {
            let m = &mask[r * cols..(r + 1) * cols];
            let total: f64 = src
                .row(r)
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(p, _)| p.as_f64())
                .sum();
            if total <= 0.0 {
                return Err(Error::invalid(format!("row {r} keeps zero routing mass")));
            }
            let total = T::from_f64_lossy(total);
            for ((o, &p), &keep) in value.row_mut(r).iter_mut().zip(src.row(r)).zip(m) {
                if keep {
                    *o = p / total;
                }
            }
            totals.push(total);
        }
        self.push(
            value,
            Op::MaskedRenorm {
                probs,
                mask,
                totals,
            },
        )
    }

    /// `Σ_k diag(weights[:, k]) · experts[k]`.
    pub fn mix(&mut self, weights: Var, experts: &[Var]) -> Result<Var> {
        let w = self.value(weights);
        if w.cols() != experts.len() || experts.is_empty() {
            return Err(Error::shape(
                "mix",
                format!("{} weight columns for {} experts", w.cols(), experts.len()),
            ));
        }
        let shape = self.value(experts[0]).shape();
        if w.rows() != shape.0 {
            return Err(Error::shape("mix", format!("weights {:?} vs experts {shape:?}", w.shape())));
        }
        let mut value = Matrix::zeros(shape.0, shape.1);
        for (k, &e) in experts.iter().enumerate() {
            let z = self.value(e);
            if z.shape() != shape {
                return Err(Error::shape("mix", format!("expert {k} has shape {:?}", z.shape())));
            }
            for r in 0..shape.0 {
                let wk = w.get(r, k);
                if wk == T::zero() {
                    continue;
                }
                for (o, &zv) in value.row_mut(r).iter_mut().zip(z.row(r)) {
                    *o += wk * zv;
                }
            }
        }
        self.push(
            value,
            Op::Mix {
                weights,
                experts: experts.to_vec(),
            },
        )
    }

    /// Batch normalization over rows using the batch's own (biased)
    /// statistics. Returns the output and the statistics.
    pub fn batch_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<(Var, BatchStats<T>)> {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        if self.value(scale).shape() != (1, cols) || self.value(shift).shape() != (1, cols) {
            return Err(Error::shape("batch_norm", "scale/shift must be 1 x features"));
        }
        if rows == 0 {
            return Err(Error::shape("batch_norm", "empty batch"));
        }
        let n = rows as f64;
        let mut mean = vec![0.0f64; cols];
        for r in src.row_iter() {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; cols];
        for r in src.row_iter() {
            for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
                let d = v.as_f64() - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        let inv_std: Vec<T> = var
            .iter()
            .map(|&s| T::from_f64_lossy(1.0 / (s + BATCH_NORM_EPS).sqrt()))
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
        let normalized = Matrix::from_fn(rows, cols, |r, c| (src.get(r, c) - mean_t[c]) * inv_std[c]);
        let gamma = self.value(scale);
        let beta = self.value(shift);
        let value = Matrix::from_fn(rows, cols, |r, c| {
            normalized.get(r, c) * gamma.get(0, c) + beta.get(0, c)
        });
        let stats = BatchStats {
            mean: Matrix::from_vec(1, cols, mean_t)?,
            var: Matrix::from_vec(1, cols, var.iter().map(|&s| T::from_f64_lossy(s)).collect())?,
        };
        let out = self.push(
            value,
            Op::BatchNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            },
        )?;
        Ok((out, stats))
    }

    /// Batch normalization with externally supplied statistics (inference).
    pub fn batch_norm_frozen(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &Matrix<T>,
        var: &Matrix<T>,
    ) -> Result<Var> {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        for (name, m) in [("scale", self.value(scale)), ("shift", self.value(shift)), ("mean", mean), ("var", var)] {
            if m.shape() != (1, cols) {
                return Err(Error::shape("batch_norm_frozen", format!("{name} is {:?}", m.shape())));
            }
        }
        let inv_std: Vec<T> = var
            .as_slice()
            .iter()
            .map(|&s| T::from_f64_lossy(1.0 / (s.as_f64() + BATCH_NORM_EPS).sqrt()))
            .collect();
        let normalized = Matrix::from_fn(rows, cols, |r, c| (src.get(r, c) - mean.get(0, c)) * inv_std[c]);
        let gamma = self.value(scale);
        let beta = self.value(shift);
        let value = Matrix::from_fn(rows, cols, |r, c| {
            normalized.get(r, c) * gamma.get(0, c) + beta.get(0, c)
        });
        self.push(
            value,
            Op::FrozenNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            },
        )
    }

    /// Mean negative log-likelihood of `(row, class)` targets, with
    /// probabilities clamped below at `floor`.
    pub fn nll(&mut self, probs: Var, targets: Vec<(usize, usize)>, floor: T) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::invalid("negative log-likelihood over zero targets"));
        }
        let p = self.value(probs);
        let mut total = 0.0f64;
        for &(r, c) in &targets {
            if r >= p.rows() || c >= p.cols() {
                return Err(Error::shape("nll", format!("target ({r}, {c}) outside {:?}", p.shape())));
            }
            total -= p.get(r, c).max(floor).as_f64().ln();
        }
        let value = Matrix::filled(1, 1, T::from_f64_lossy(total / targets.len() as f64));
        self.push(
            value,
            Op::Nll {
                probs,
                targets,
                floor,
            },
        )
    }

    /// `-(1/rows) Σ p ln p` over all entries, with `0 ln 0 = 0`.
    pub fn entropy_mean(&mut self, probs: Var) -> Result<Var> {
        let p = self.value(probs);
        let rows = p.rows().max(1) as f64;
        let total: f64 = p
            .as_slice()
            .iter()
            .map(|v| v.as_f64())
            .filter(|&v| v > 0.0)
            .map(|v| -v * v.ln())
            .sum();
        let value = Matrix::filled(1, 1, T::from_f64_lossy(total / rows));
        self.push(value, Op::EntropyMean(probs))
    }

    /// `Σ_j coeffs[j] · mean_i x[i, j]`. The coefficients are constants.
    pub fn col_mean_dot(&mut self, x: Var, coeffs: Vec<T>) -> Result<Var> {
        let m = self.value(x);
        if coeffs.len() != m.cols() {
            return Err(Error::shape(
                "col_mean_dot",
                format!("{} coefficients for {} columns", coeffs.len(), m.cols()),
            ));
        }
        let rows = m.rows().max(1) as f64;
        let mut total = 0.0f64;
        for r in m.row_iter() {
            for (&v, &c) in r.iter().zip(&coeffs) {
                total += v.as_f64() * c.as_f64();
            }
        }
        let value = Matrix::filled(1, 1, T::from_f64_lossy(total / rows));
        self.push(value, Op::ColMeanDot { x, coeffs })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Matrix::filled(1, 1, T::from_f64_lossy(self.value(x).sum_f64()));
        self.push(value, Op::Sum(x))
    }

    /// Reverse sweep from a 1x1 output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::shape("backward", "output must be a 1x1 scalar"));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_t(false, self.value(*b), true)?;
                let db = self.value(*a).matmul_t(true, g, false)?;
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::SpMM(adj, x) => accumulate(grads, *x, adj.spmm_transposed(g)?)?,
            Op::AddRow(x, bias) => {
                accumulate(grads, *x, g.clone())?;
                accumulate(grads, *bias, g.sum_rows())?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.scale(*s))?,
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
            }
            Op::Relu(x) => {
                let dx = g.zip_map(&node.value, "relu'", |gv, y| if y > T::zero() { gv } else { T::zero() })?;
                accumulate(grads, *x, dx)?;
            }
            Op::Sigmoid(x) => {
                let dx = g.zip_map(&node.value, "sigmoid'", |gv, y| gv * y * (T::one() - y))?;
                accumulate(grads, *x, dx)?;
            }
            Op::MulConst(x, mask) => accumulate(grads, *x, g.hadamard(mask)?)?,
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = y.row(r).iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(grads, *x, dx)?;
            }
            Op::RowNorm(x) => {
                let src = self.value(*x);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    let n = row_l2(src.row(r));
                    let xg: T = src.row(r).iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
                    let n3 = n * n * n;
                    for ((d, &xv), &gv) in dx.row_mut(r).iter_mut().zip(src.row(r)).zip(g.row(r)) {
                        *d = gv / n - xv * xg / n3;
                    }
                }
                accumulate(grads, *x, dx)?;
            }
            Op::MaskedRenorm {
                probs,
                mask,
                totals,
            } => {
                let y = &node.value;
                let cols = y.cols();
                let mut dx = Matrix::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let dot: T = y.row(r).iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
                    let m = &mask[r * cols..(r + 1) * cols];
                    for ((d, &gv), &keep) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(m) {
                        if keep {
                            *d = (gv - dot) / totals[r];
                        }
                    }
                }
                accumulate(grads, *probs, dx)?;
            }
            Op::Mix { weights, experts } => {
                let w = self.value(*weights);
                let mut dw = Matrix::zeros(w.rows(), w.cols());
                for (k, &e) in experts.iter().enumerate() {
                    let z = self.value(e);
                    let mut dz = Matrix::zeros(z.rows(), z.cols());
                    for r in 0..z.rows() {
                        let dot: T = z.row(r).iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
                        dw.set(r, k, dot);
                        let wk = w.get(r, k);
                        for (d, &gv) in dz.row_mut(r).iter_mut().zip(g.row(r)) {
                            *d = wk * gv;
                        }
                    }
                    accumulate(grads, e, dz)?;
                }
                accumulate(grads, *weights, dw)?;
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            } => {
                let gamma = self.value(*scale);
                let (rows, cols) = normalized.shape();
                let n = T::from_usize_lossy(rows);
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let gv = g.get(r, c);
                        dgamma.set(0, c, dgamma.get(0, c) + gv * normalized.get(r, c));
                        dbeta.set(0, c, dbeta.get(0, c) + gv);
                    }
                }
                // dxhat = g * gamma; dx = inv_std / n * (n dxhat - Σ dxhat - xhat Σ dxhat xhat)
                let mut dx = Matrix::zeros(rows, cols);
                for c in 0..cols {
                    let gm = gamma.get(0, c);
                    let sum_dxhat = dbeta.get(0, c) * gm;
                    let sum_dxhat_xhat = dgamma.get(0, c) * gm;
                    for r in 0..rows {
                        let dxhat = g.get(r, c) * gm;
                        let v = inv_std[c] / n
                            * (n * dxhat - sum_dxhat - normalized.get(r, c) * sum_dxhat_xhat);
                        dx.set(r, c, v);
                    }
                }
                accumulate(grads, *x, dx)?;
                accumulate(grads, *scale, dgamma)?;
                accumulate(grads, *shift, dbeta)?;
            }
            Op::FrozenNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            } => {
                let gamma = self.value(*scale);
                let (rows, cols) = normalized.shape();
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let gv = g.get(r, c);
                        dgamma.set(0, c, dgamma.get(0, c) + gv * normalized.get(r, c));
                        dbeta.set(0, c, dbeta.get(0, c) + gv);
                        dx.set(r, c, gv * gamma.get(0, c) * inv_std[c]);
                    }
                }
                accumulate(grads, *x, dx)?;
                accumulate(grads, *scale, dgamma)?;
                accumulate(grads, *shift, dbeta)?;
            }
            Op::Nll {
                probs,
                targets,
                floor,
            } => {
                let p = self.value(*probs);
                let upstream = g.get(0, 0);
                let inv_n = T::one() / T::from_usize_lossy(targets.len());
                let mut dp = Matrix::zeros(p.rows(), p.cols());
                for &(r, c) in targets {
                    let pv = p.get(r, c);
                    if pv > *floor {
                        dp.set(r, c, dp.get(r, c) - upstream * inv_n / pv);
                    }
                }
                accumulate(grads, *probs, dp)?;
            }
            Op::EntropyMean(probs) => {
                let p = self.value(*probs);
                let upstream = g.get(0, 0);
                let inv_rows = T::one() / T::from_usize_lossy(p.rows().max(1));
                let dp = p.map(|v| {
                    if v > T::zero() {
                        -upstream * inv_rows * (v.ln() + T::one())
                    } else {
                        T::zero()
                    }
                });
                accumulate(grads, *probs, dp)?;
            }
            Op::ColMeanDot { x, coeffs } => {
                let m = self.value(*x);
                let upstream = g.get(0, 0);
                let inv_rows = T::one() / T::from_usize_lossy(m.rows().max(1));
                let dx = Matrix::from_fn(m.rows(), m.cols(), |_, c| upstream * coeffs[c] * inv_rows);
                accumulate(grads, *x, dx)?;
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                accumulate(grads, *x, Matrix::filled(r, c, g.get(0, 0)))?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, delta: Matrix<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

fn row_l2<T: Scalar>(row: &[T]) -> T {
    let ss: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum();
    T::from_f64_lossy((ss + ROW_NORM_EPS).sqrt())
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; exact zeros when `v` did not influence
    /// the output.
    pub fn wrt(&self, v: Var) -> Matrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn touched(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax with max subtraction, outside any tape.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += v.as_f64();
        }
        let total = T::from_f64_lossy(total);
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}
