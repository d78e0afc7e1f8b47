use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Compressed sparse row matrix. Column indices within a row are sorted and
/// unique.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCsr<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> SparseCsr<T> {
    /// Validates raw CSR arrays.
    pub fn new(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<T>,
    ) -> Result<Self> {
        if row_ptr.len() != rows + 1 {
            return Err(Error::invalid(format!(
                "row_ptr has length {}, expected {}",
                row_ptr.len(),
                rows + 1
            )));
        }
        if row_ptr[0] != 0 || row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("row_ptr must start at 0 and be nondecreasing"));
        }
        let nnz = row_ptr[rows];
        if col_idx.len() != nnz || values.len() != nnz {
            return Err(Error::invalid(format!(
                "row_ptr declares {nnz} entries but col_idx/values have {}/{}",
                col_idx.len(),
                values.len()
            )));
        }
        if let Some(&c) = col_idx.iter().find(|&&c| c >= cols) {
            return Err(Error::invalid(format!("column index {c} out of range for {cols} columns")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sparse values".into()));
        }
        Ok(SparseCsr {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, T)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, T)> = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(Error::invalid(format!(
                    "entry ({r}, {c}) outside a {rows}x{cols} matrix"
                )));
            }
        }
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<T> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for i in 0..rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self::new(rows, cols, row_ptr, col_idx, values)
    }

    pub fn identity(n: usize) -> Self {
        SparseCsr {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![T::one(); n],
        }
    }

    /// `D̃^{-1/2} (A + I) D̃^{-1/2}` for an undirected edge list.
    ///
    /// Edges are symmetrized and deduplicated; explicit self-loops collapse
    /// into the added identity.
    pub fn gcn_normalized(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let pattern = Self::self_looped_pattern(n, edges)?;
        let degree: Vec<f64> = pattern.iter().map(|nbrs| nbrs.len() as f64).collect();
        let mut triplets = Vec::new();
        for (i, nbrs) in pattern.iter().enumerate() {
            for &j in nbrs {
                let w = 1.0 / (degree[i] * degree[j]).sqrt();
                triplets.push((i, j, T::from_f64_lossy(w)));
            }
        }
        Self::from_triplets(n, n, &triplets)
    }

    /// `D̃^{-1} (A + I)`: row-stochastic mean over the closed neighborhood.
    pub fn mean_normalized(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let pattern = Self::self_looped_pattern(n, edges)?;
        let mut triplets = Vec::new();
        for (i, nbrs) in pattern.iter().enumerate() {
            let w = 1.0 / nbrs.len() as f64;
            for &j in nbrs {
                triplets.push((i, j, T::from_f64_lossy(w)));
            }
        }
        Self::from_triplets(n, n, &triplets)
    }

    fn self_looped_pattern(n: usize, edges: &[(usize, usize)]) -> Result<Vec<Vec<usize>>> {
        let mut nbrs: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::invalid(format!("edge ({a}, {b}) with only {n} nodes")));
            }
            if a != b {
                nbrs[a].push(b);
                nbrs[b].push(a);
            }
        }
        for list in &mut nbrs {
            list.sort_unstable();
            list.dedup();
        }
        Ok(nbrs)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// `(col, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                m.set(r, c, m.get(r, c) + v);
            }
        }
        m
    }

    /// Sparse-dense product `self * dense`.
    pub fn spmm(&self, dense: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != dense.rows() {
            return Err(Error::shape(
                "spmm",
                format!("{}x{} sparse times {:?}", self.rows, self.cols, dense.shape()),
            ));
        }
        let width = dense.cols();
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            let out_row = out.row_mut(r);
            for (c, v) in self.row(r) {
                for (o, &x) in out_row.iter_mut().zip(dense.row(c)) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ * dense`, without materializing the transpose.
    pub fn spmm_transposed(&self, dense: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != dense.rows() {
            return Err(Error::shape(
                "spmm_transposed",
                format!("({}x{})ᵀ sparse times {:?}", self.rows, self.cols, dense.shape()),
            ));
        }
        let width = dense.cols();
        let mut out = Matrix::zeros(self.cols, width);
        for r in 0..self.rows {
            let src = dense.row(r);
            for (c, v) in self.row(r) {
                for (o, &x) in out.row_mut(c).iter_mut().zip(src) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> SparseCsr<U> {
        SparseCsr {
            rows: self.rows,
            cols: self.cols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: self.values.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}
