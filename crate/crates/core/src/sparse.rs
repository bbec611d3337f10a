//! Compressed sparse row matrices with real values.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Real-valued CSR matrix. Column indices within a row are sorted and unique.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicate positions are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= nrows || c >= ncols {
                return Err(Error::DimensionMismatch(format!(
                    "entry ({r}, {c}) outside a {nrows}x{ncols} matrix"
                )));
            }
        }
        sorted.sort_by_key(|t| (t.0, t.1));

        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..nrows {
            indptr[i + 1] += indptr[i];
        }
        Ok(Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        })
    }

    pub(crate) fn from_raw(
        nrows: usize,
        ncols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(indptr.len(), nrows + 1);
        debug_assert_eq!(indices.len(), values.len());
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn from_dense(dense: &Array2<f64>) -> Self {
        let (nrows, ncols) = dense.dim();
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in dense.rows() {
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self::from_raw(nrows, ncols, indptr, indices, values)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.ncols {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {} against {} columns",
                x.len(),
                self.ncols
            )));
        }
        Ok(Array1::from_iter((0..self.nrows).map(|i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum::<f64>()
        })))
    }

    /// Computes `self * dense` for a dense right-hand side with one row per column of `self`.
    pub fn matmul_dense(&self, dense: &Array2<f64>) -> Result<Array2<f64>> {
        if dense.nrows() != self.ncols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} sparse times {}x{} dense",
                self.nrows,
                self.ncols,
                dense.nrows(),
                dense.ncols()
            )));
        }
        let mut out = Array2::zeros((self.nrows, dense.ncols()));
        for (i, mut out_row) in out.rows_mut().into_iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                out_row.scaled_add(v, &dense.row(c));
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                let slot = next[c];
                indices[slot] = i;
                values[slot] = v;
                next[c] += 1;
            }
        }
        Self::from_raw(self.ncols, self.nrows, indptr, indices, values)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.nrows, self.ncols));
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                out[[i, c]] = v;
            }
        }
        out
    }
}
