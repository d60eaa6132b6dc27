use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{SparseMatrix, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Reverse-mode autodiff tape over a static per-batch graph. Operations
/// append nodes; `backward` walks them in reverse and accumulates gradients
/// for every node that transitively depends on a tracked leaf. The tape is
/// intended to be built, differentiated, read, and dropped once per batch.
///
/// All recorded values are 2-D matrices (scalars are 1x1, vectors 1xN).
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
        mode: MatmulMode,
    },
    Spmm {
        matrix: Arc<SparseMatrix>,
        dense: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    AddBiasRow {
        x: TensorId,
        bias: TensorId,
    },
    Affine {
        x: TensorId,
        scale: f64,
    },
    Sigmoid {
        x: TensorId,
    },
    Tanh {
        x: TensorId,
    },
    Exp {
        x: TensorId,
    },
    Ln {
        x: TensorId,
    },
    Clamp {
        x: TensorId,
        lo: f64,
        hi: f64,
    },
    RowSoftmax {
        x: TensorId,
    },
    LseRows {
        x: TensorId,
    },
    RowwiseDot {
        a: TensorId,
        b: TensorId,
    },
    L2NormalizeRows {
        x: TensorId,
        norms: Vec<f64>,
    },
    Dropout {
        x: TensorId,
        mask: Vec<f64>,
    },
    GatherRows {
        x: TensorId,
        indices: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<TensorId>,
    },
    ConcatCols {
        a: TensorId,
        b: TensorId,
    },
    Reshape {
        x: TensorId,
    },
    SumAll {
        x: TensorId,
    },
}

#[derive(Clone, Copy)]
enum MatmulMode {
    /// a[m,k] * b[k,n]
    Nn,
    /// a[m,k] * b[n,k]^T
    Bt,
    /// a[k,m]^T * b[k,n]
    At,
}

// Raw row-major matrix products used by forward and backward passes.

fn mat_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

fn mat_bt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                s += av * bv;
            }
            out[i * n + j] += s;
        }
    }
}

fn mat_at(a: &[f64], k: usize, m: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, needs: bool, op: Op) -> TensorId {
        debug_assert_eq!(rows * cols, values.len());
        self.nodes.push(Node {
            rows,
            cols,
            values,
            needs_grad: needs,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn dims(&self, id: TensorId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.node(id).values
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        let n = self.node(id);
        Tensor::new(vec![n.rows, n.cols], n.values.clone()).expect("tape node is consistent")
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.node(id).values.len(), 1);
        self.node(id).values[0]
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Record a tensor as a leaf; gradient tracking follows the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Result<TensorId> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.values().to_vec(), t.requires_grad(), Op::Leaf))
    }

    /// Untracked constant.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> TensorId {
        assert_eq!(rows * cols, values.len(), "constant shape mismatch");
        self.push(rows, cols, values, false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> TensorId {
        self.push(1, 1, vec![v], false, Op::Leaf)
    }

    // ── Matrix products ─────────────────────────────────────────────────

    /// `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {m}x{ka} vs {kb}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        mat_nn(self.values(a), m, ka, self.values(b), n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            m,
            n,
            out,
            needs,
            Op::Matmul {
                a,
                b,
                mode: MatmulMode::Nn,
            },
        ))
    }

    /// `a[m,k] * b[n,k]^T`.
    pub fn matmul_bt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims(a);
        let (n, kb) = self.dims(b);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul_bt inner dimensions disagree: {m}x{ka} vs ({n}x{kb})^T"
            )));
        }
        let mut out = vec![0.0; m * n];
        mat_bt(self.values(a), m, ka, self.values(b), n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            m,
            n,
            out,
            needs,
            Op::Matmul {
                a,
                b,
                mode: MatmulMode::Bt,
            },
        ))
    }

    /// `a[k,m]^T * b[k,n]`.
    pub fn matmul_at(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ka, m) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul_at inner dimensions disagree: ({ka}x{m})^T vs {kb}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        mat_at(self.values(a), ka, m, self.values(b), n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            m,
            n,
            out,
            needs,
            Op::Matmul {
                a,
                b,
                mode: MatmulMode::At,
            },
        ))
    }

    /// Sparse-dense product. The sparse matrix is a constant and carries no
    /// gradient; the backward pass accumulates matrix^T * grad into `dense`.
    pub fn spmm(&mut self, matrix: &Arc<SparseMatrix>, dense: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims(dense);
        if matrix.cols() != r {
            return Err(Error::Shape(format!(
                "spmm: sparse {}x{} times dense {r}x{c}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        let out = matrix.mul_dense(self.values(dense), c)?;
        let needs = self.needs(dense);
        Ok(self.push(
            matrix.rows(),
            c,
            out,
            needs,
            Op::Spmm {
                matrix: Arc::clone(matrix),
                dense,
            },
        ))
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(&mut self, a: TensorId, b: TensorId, name: &str) -> Result<(usize, usize)> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::Shape(format!(
                "{name}: {ra}x{ca} vs {rb}x{cb}"
            )));
        }
        Ok((ra, ca))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.binary_same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b).iter())
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, needs, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.binary_same_shape(a, b, "sub")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b).iter())
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, needs, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.binary_same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b).iter())
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, needs, Op::Mul { a, b }))
    }

    /// `x[m,n]` plus a bias row broadcast over rows (bias is 1xN).
    pub fn add_bias_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims(x);
        let (br, bc) = self.dims(bias);
        if br != 1 || bc != c {
            return Err(Error::Shape(format!(
                "add_bias_row: {r}x{c} with bias {br}x{bc}"
            )));
        }
        let bvals = self.values(bias).to_vec();
        let out: Vec<f64> = self
            .values(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bvals[i % c])
            .collect();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(r, c, out, needs, Op::AddBiasRow { x, bias }))
    }

    /// scale * x + shift, elementwise.
    pub fn affine(&mut self, x: TensorId, scale: f64, shift: f64) -> TensorId {
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self.values(x).iter().map(|v| scale * v + shift).collect();
        let needs = self.needs(x);
        self.push(r, c, out, needs, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: TensorId, scale: f64) -> TensorId {
        self.affine(x, scale, 0.0)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self
            .values(x)
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let needs = self.needs(x);
        self.push(r, c, out, needs, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self.values(x).iter().map(|v| v.tanh()).collect();
        let needs = self.needs(x);
        self.push(r, c, out, needs, Op::Tanh { x })
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self.values(x).iter().map(|v| v.exp()).collect();
        let needs = self.needs(x);
        self.push(r, c, out, needs, Op::Exp { x })
    }

    /// Natural log; the input must be strictly positive.
    pub fn ln(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims(x);
        if self.values(x).iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("ln of a non-positive value".into()));
        }
        let out: Vec<f64> = self.values(x).iter().map(|v| v.ln()).collect();
        let needs = self.needs(x);
        Ok(self.push(r, c, out, needs, Op::Ln { x }))
    }

    /// Clamp into [lo, hi]; gradient is gated to the interior.
    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self.values(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let needs = self.needs(x);
        self.push(r, c, out, needs, Op::Clamp { x, lo, hi })
    }

    // ── Row-structured ops ──────────────────────────────────────────────

    /// Numerically stable softmax over each row.
    pub fn row_softmax(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.dims(x);
        let xv = self.values(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row.iter()) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.needs(x);
        self.push(r, c, out, needs, Op::RowSoftmax { x })
    }

    /// Stable log-sum-exp of each row; returns an Rx1 column.
    pub fn lse_rows(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.dims(x);
        let xv = self.values(x);
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            out[i] = max + sum.ln();
        }
        let needs = self.needs(x);
        self.push(r, 1, out, needs, Op::LseRows { x })
    }

    /// Row-by-row inner product of two same-shape matrices; returns Rx1.
    pub fn rowwise_dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.binary_same_shape(a, b, "rowwise_dot")?;
        let av = self.values(a);
        let bv = self.values(b);
        let out: Vec<f64> = (0..r)
            .map(|i| {
                av[i * c..(i + 1) * c]
                    .iter()
                    .zip(bv[i * c..(i + 1) * c].iter())
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(r, 1, out, needs, Op::RowwiseDot { a, b }))
    }

    /// Scale each row to unit Euclidean norm. Rows with norm below 1e-12
    /// are rejected as degenerate.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims(x);
        let xv = self.values(x);
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let n: f64 = xv[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(Error::DegenerateRow(format!(
                    "row {i} has norm {n:e}, cannot normalize"
                )));
            }
            norms[i] = n;
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xv[i * c + j] / norms[i];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(r, c, out, needs, Op::L2NormalizeRows { x, norms }))
    }

    /// Inverted dropout. In training each element is zeroed with
    /// probability `rate` and survivors are scaled by 1/(1-rate); in
    /// evaluation the op is the identity. The mask is recorded and reused
    /// by the backward pass.
    pub fn dropout(
        &mut self,
        x: TensorId,
        rate: f64,
        training: bool,
        rng: &mut Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let (r, c) = self.dims(x);
        if !training || rate == 0.0 {
            let out = self.values(x).to_vec();
            let needs = self.needs(x);
            let mask = vec![1.0; r * c];
            return Ok(self.push(r, c, out, needs, Op::Dropout { x, mask }));
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep_scale })
            .collect();
        let out: Vec<f64> = self
            .values(x)
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| v * m)
            .collect();
        let needs = self.needs(x);
        Ok(self.push(r, c, out, needs, Op::Dropout { x, mask }))
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    /// Select rows by index (repeats allowed); gradient scatter-adds.
    pub fn gather_rows(&mut self, x: TensorId, indices: Vec<usize>) -> Result<TensorId> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        let xv = self.values(x);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let needs = self.needs(x);
        let rows = indices.len();
        Ok(self.push(rows, c, out, needs, Op::GatherRows { x, indices }))
    }

    /// Stack parts vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of zero parts".into()));
        }
        let (_, c0) = self.dims(parts[0]);
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != c0 {
                return Err(Error::Shape(format!(
                    "concat_rows: column mismatch {c} vs {c0}"
                )));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c0);
        let mut needs = false;
        for &p in parts {
            out.extend_from_slice(self.values(p));
            needs |= self.needs(p);
        }
        Ok(self.push(
            rows,
            c0,
            out,
            needs,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Concatenate two matrices side by side; row counts must match.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(Error::Shape(format!(
                "concat_cols: row mismatch {ra} vs {rb}"
            )));
        }
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(ra, ca + cb, out, needs, Op::ConcatCols { a, b }))
    }

    /// Reinterpret the value buffer with a new (rows, cols); element count
    /// must be preserved.
    pub fn reshape(&mut self, x: TensorId, rows: usize, cols: usize) -> Result<TensorId> {
        let (r, c) = self.dims(x);
        if r * c != rows * cols {
            return Err(Error::Shape(format!(
                "reshape {r}x{c} to {rows}x{cols}"
            )));
        }
        let out = self.values(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(rows, cols, out, needs, Op::Reshape { x }))
    }

    /// Sum of all elements, as a 1x1 scalar.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.values(x).iter().sum();
        let needs = self.needs(x);
        self.push(1, 1, vec![s], needs, Op::SumAll { x })
    }

    /// Mean of all elements, as a 1x1 scalar.
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.values(x).len();
        let s = self.sum_all(x);
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Gradients become available through
    /// [`Tape::grad`]; nodes that do not influence the root keep `None`.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        let root_node = self.node(root);
        if root_node.values.len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {}x{}",
                root_node.rows, root_node.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !root_node.needs_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: TensorId,
        contribution: impl FnOnce(&mut [f64]),
    ) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.node(id).values.len()]);
        }
        contribution(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, mode } => {
                let (ar, ac) = self.dims(*a);
                let (_br, bc) = self.dims(*b);
                let av = self.values(*a);
                let bv = self.values(*b);
                match mode {
                    MatmulMode::Nn => {
                        // C = A B: dA = G B^T, dB = A^T G
                        let (m, k, n) = (ar, ac, bc);
                        self.accumulate(grads, *a, |ga| mat_bt(g, m, n, bv, k, ga));
                        self.accumulate(grads, *b, |gb| mat_at(av, m, k, g, n, gb));
                    }
                    MatmulMode::Bt => {
                        // C = A B^T: dA = G B, dB = G^T A
                        let (m, k) = (ar, ac);
                        let n = node.cols;
                        self.accumulate(grads, *a, |ga| mat_nn(g, m, n, bv, k, ga));
                        self.accumulate(grads, *b, |gb| mat_at(g, m, n, av, k, gb));
                    }
                    MatmulMode::At => {
                        // C = A^T B: dA = B G^T, dB = A G
                        let (k, m) = (ar, ac);
                        let n = bc;
                        self.accumulate(grads, *a, |ga| mat_bt(bv, k, n, g, m, ga));
                        self.accumulate(grads, *b, |gb| mat_nn(av, k, m, g, n, gb));
                    }
                }
            }
            Op::Spmm { matrix, dense } => {
                let n = node.cols;
                self.accumulate(grads, *dense, |gd| {
                    matrix.mul_dense_transpose_into(g, n, gd);
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| {
                    for (o, &gi) in ga.iter_mut().zip(g.iter()) {
                        *o += gi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (o, &gi) in gb.iter_mut().zip(g.iter()) {
                        *o += gi;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |ga| {
                    for (o, &gi) in ga.iter_mut().zip(g.iter()) {
                        *o += gi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (o, &gi) in gb.iter_mut().zip(g.iter()) {
                        *o -= gi;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.values(*a);
                let bv = self.values(*b);
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g.iter()).zip(bv.iter()) {
                        *o += gi * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g.iter()).zip(av.iter()) {
                        *o += gi * x;
                    }
                });
            }
            Op::AddBiasRow { x, bias } => {
                let c = node.cols;
                self.accumulate(grads, *x, |gx| {
                    for (o, &gi) in gx.iter_mut().zip(g.iter()) {
                        *o += gi;
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % c] += gi;
                    }
                });
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.accumulate(grads, *x, |gx| {
                    for (o, &gi) in gx.iter_mut().zip(g.iter()) {
                        *o += s * gi;
                    }
                });
            }
            Op::Sigmoid { x } => {
                let yv = &node.values;
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &y) in gx.iter_mut().zip(g.iter()).zip(yv.iter()) {
                        *o += gi * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh { x } => {
                let yv = &node.values;
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &y) in gx.iter_mut().zip(g.iter()).zip(yv.iter()) {
                        *o += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Exp { x } => {
                let yv = &node.values;
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &y) in gx.iter_mut().zip(g.iter()).zip(yv.iter()) {
                        *o += gi * y;
                    }
                });
            }
            Op::Ln { x } => {
                let xv = self.values(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &v) in gx.iter_mut().zip(g.iter()).zip(xv.iter()) {
                        *o += gi / v;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.values(*x);
                let (lo, hi) = (*lo, *hi);
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &v) in gx.iter_mut().zip(g.iter()).zip(xv.iter()) {
                        if v >= lo && v <= hi {
                            *o += gi;
                        }
                    }
                });
            }
            Op::RowSoftmax { x } => {
                let (r, c) = (node.rows, node.cols);
                let yv = &node.values;
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        let y = &yv[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        let gxr = &mut gx[i * c..(i + 1) * c];
                        for ((o, &yi), &gi) in gxr.iter_mut().zip(y.iter()).zip(gr.iter()) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LseRows { x } => {
                let (r, c) = self.dims(*x);
                let xv = self.values(*x);
                let yv = &node.values;
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let lse = yv[i];
                        let row = &xv[i * c..(i + 1) * c];
                        let gxr = &mut gx[i * c..(i + 1) * c];
                        for (o, &v) in gxr.iter_mut().zip(row.iter()) {
                            *o += gi * (v - lse).exp();
                        }
                    }
                });
            }
            Op::RowwiseDot { a, b } => {
                let (r, c) = self.dims(*a);
                let av = self.values(*a);
                let bv = self.values(*b);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        let gi = g[i];
                        for j in 0..c {
                            ga[i * c + j] += gi * bv[i * c + j];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..r {
                        let gi = g[i];
                        for j in 0..c {
                            gb[i * c + j] += gi * av[i * c + j];
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let (r, c) = (node.rows, node.cols);
                let yv = &node.values;
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        let y = &yv[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        let inv_n = 1.0 / norms[i];
                        let gxr = &mut gx[i * c..(i + 1) * c];
                        for ((o, &yi), &gi) in gxr.iter_mut().zip(y.iter()).zip(gr.iter()) {
                            *o += (gi - yi * dot) * inv_n;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &m) in gx.iter_mut().zip(g.iter()).zip(mask.iter()) {
                        *o += gi * m;
                    }
                });
            }
            Op::GatherRows { x, indices } => {
                let c = node.cols;
                self.accumulate(grads, *x, |gx| {
                    for (row, &src) in indices.iter().enumerate() {
                        let gr = &g[row * c..(row + 1) * c];
                        let dst = &mut gx[src * c..(src + 1) * c];
                        for (o, &gi) in dst.iter_mut().zip(gr.iter()) {
                            *o += gi;
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let c = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let (pr, _) = self.dims(p);
                    let span = offset * c..(offset + pr) * c;
                    self.accumulate(grads, p, |gp| {
                        for (o, &gi) in gp.iter_mut().zip(g[span].iter()) {
                            *o += gi;
                        }
                    });
                    offset += pr;
                }
            }
            Op::ConcatCols { a, b } => {
                let (r, ca) = self.dims(*a);
                let (_, cb) = self.dims(*b);
                let c = ca + cb;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..ca {
                            ga[i * ca + j] += g[i * c + j];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..r {
                        for j in 0..cb {
                            gb[i * cb + j] += g[i * c + ca + j];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, |gx| {
                    for (o, &gi) in gx.iter_mut().zip(g.iter()) {
                        *o += gi;
                    }
                });
            }
            Op::SumAll { x } => {
                let gi = g[0];
                self.accumulate(grads, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o += gi;
                    }
                });
            }
        }
    }

    /// Gradient of the last backward pass with respect to `id`, if any.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0)?.as_deref()
    }
}
