use crate::error::{Error, Result};

/// Row-compressed (CSR) sparse real matrix. Column indices are sorted and
/// unique within each row. Used for the attributed-graph adjacency, the
/// mask matrices, and the normalized propagation matrix, all of which are
/// constants during training.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from (row, col, value) triplets. Duplicate coordinates are
    /// summed; explicit zeros are dropped.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::Shape(format!(
                    "entry ({r}, {c}) outside {rows}x{cols} matrix"
                )));
            }
            entries.push((r, c, v));
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));

        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_ptr[r + 1] += 1;
                col_idx.push(c);
                values.push(v);
                last = Some((r, c));
            }
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let mut out = Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        };
        out.drop_zeros();
        Ok(out)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    fn drop_zeros(&mut self) {
        if self.values.iter().all(|&v| v != 0.0) {
            return;
        }
        let mut row_ptr = vec![0usize; self.rows + 1];
        let mut col_idx = Vec::with_capacity(self.col_idx.len());
        let mut values = Vec::with_capacity(self.values.len());
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.values[k] != 0.0 {
                    col_idx.push(self.col_idx[k]);
                    values.push(self.values[k]);
                    row_ptr[r + 1] += 1;
                }
            }
        }
        for r in 0..self.rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        self.row_ptr = row_ptr;
        self.col_idx = col_idx;
        self.values = values;
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

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).1.iter().sum())
            .collect()
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals.iter()).map(move |(&c, &v)| (r, c, v))
        })
    }

    /// self * dense, where dense is row-major `[cols x n]`; returns `[rows x n]`.
    pub fn mul_dense(&self, dense: &[f64], n: usize) -> Result<Vec<f64>> {
        if dense.len() != self.cols * n {
            return Err(Error::Shape(format!(
                "sparse {}x{} times dense of {} values with {} columns",
                self.rows,
                self.cols,
                dense.len(),
                n
            )));
        }
        let mut out = vec![0.0; self.rows * n];
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let out_row = &mut out[r * n..(r + 1) * n];
            for (&c, &v) in cols.iter().zip(vals.iter()) {
                let src = &dense[c * n..(c + 1) * n];
                for (o, s) in out_row.iter_mut().zip(src.iter()) {
                    *o += v * s;
                }
            }
        }
        Ok(out)
    }

    /// self^T * dense, accumulated into `acc` (`[cols x n]`). Used by the
    /// backward pass of the sparse-dense product.
    pub fn mul_dense_transpose_into(&self, dense: &[f64], n: usize, acc: &mut [f64]) {
        debug_assert_eq!(dense.len(), self.rows * n);
        debug_assert_eq!(acc.len(), self.cols * n);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let src = &dense[r * n..(r + 1) * n];
            for (&c, &v) in cols.iter().zip(vals.iter()) {
                let dst = &mut acc[c * n..(c + 1) * n];
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d += v * s;
                }
            }
        }
    }

    /// Keep entries of self whose coordinates are nonzero in `mask`
    /// (Hadamard product with a 0/1 pattern).
    pub fn hadamard_mask(&self, mask: &SparseMatrix) -> Result<SparseMatrix> {
        if self.rows != mask.rows || self.cols != mask.cols {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match matrix {}x{}",
                mask.rows, mask.cols, self.rows, self.cols
            )));
        }
        let mut triplets = Vec::new();
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let (mcols, _) = mask.row(r);
            let mut mi = 0;
            for (&c, &v) in cols.iter().zip(vals.iter()) {
                while mi < mcols.len() && mcols[mi] < c {
                    mi += 1;
                }
                if mi < mcols.len() && mcols[mi] == c {
                    triplets.push((r, c, v));
                }
            }
        }
        SparseMatrix::from_triplets(self.rows, self.cols, triplets)
    }

    /// Scale row r by `diag[r]`.
    pub fn scale_rows(&self, diag: &[f64]) -> Result<SparseMatrix> {
        if diag.len() != self.rows {
            return Err(Error::Shape("row scaling vector length mismatch".into()));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            let span = out.row_ptr[r]..out.row_ptr[r + 1];
            for v in &mut out.values[span] {
                *v *= diag[r];
            }
        }
        Ok(out)
    }

    /// Scale column c by `diag[c]`.
    pub fn scale_cols(&self, diag: &[f64]) -> Result<SparseMatrix> {
        if diag.len() != self.cols {
            return Err(Error::Shape("column scaling vector length mismatch".into()));
        }
        let mut out = self.clone();
        for (v, &c) in out.values.iter_mut().zip(out.col_idx.iter()) {
            *v *= diag[c];
        }
        Ok(out)
    }

    /// Entrywise sum of two matrices with the same dimensions.
    pub fn add(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let triplets = self.iter_entries().chain(other.iter_entries());
        SparseMatrix::from_triplets(self.rows, self.cols, triplets)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for (r, c, v) in self.iter_entries() {
            out[r * self.cols + c] += v;
        }
        out
    }

    pub(crate) fn raw_parts(&self) -> (&[usize], &[usize], &[f64]) {
        (&self.row_ptr, &self.col_idx, &self.values)
    }

    pub(crate) fn from_raw_parts(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != rows + 1
            || col_idx.len() != values.len()
            || row_ptr.last().copied().unwrap_or(0) != col_idx.len()
        {
            return Err(Error::Format("inconsistent sparse matrix arrays".into()));
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }
}
