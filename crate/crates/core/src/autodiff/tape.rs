use std::sync::Arc;

use super::kernels::{dot, mm_acc, mm_at_acc, mm_bt_acc, sigmoid, softmax_into, strides};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Constant sparse matrix in CSR layout, used for graph propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// Dense product `self · x` where `x` is `n_cols × d` row-major.
    pub fn matmul_dense(&self, x: &[f64], d: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows * d];
        for r in 0..self.n_rows {
            let out_row = &mut out[r * d..(r + 1) * d];
            for (c, v) in self.row(r) {
                for (o, xv) in out_row.iter_mut().zip(&x[c * d..(c + 1) * d]) {
                    *o += v * xv;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pool: (usize, usize),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Affine(Var, f64),
    MulConst(Var, Arc<Vec<f64>>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    BatchMatMul(Var, Var),
    BatchMatMulBt(Var, Var),
    Gather(Var, Vec<usize>),
    SpMM(Arc<Csr>, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    SumLastDim(Var),
    RowCombine(Var, Arc<Vec<Vec<(usize, f64)>>>),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    SoftmaxRows(Var),
    NormalizeRows(Var, f64),
    L2NormalizeRows(Var),
    RowDot(Var, Var),
    SoftmaxXent(Var, Arc<Vec<f64>>),
    BceLogits(Var, Arc<Vec<f64>>),
    Conv2dMaxPool {
        input: Var,
        kernels: Var,
        spec: ConvSpec,
        /// For each pooled output element, the flat (b, ho, wo) conv position that won.
        argmax: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Append-only record of tensor operations. Nodes are pushed in evaluation
/// order, so every op's inputs precede it and a reverse scan is a valid
/// backward schedule.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch(format!("{op}: {a:?} vs {b:?}"))
}

/// `b` broadcasts onto `a` when it equals a trailing suffix of `a`'s shape.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite(format!(
                "{} produced {} at index {bad}",
                op_name(&op),
                data[bad]
            )));
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad: needs_grad,
                grad: None,
            },
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var, AutodiffError> {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite("leaf input".into()));
        }
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: Tensor {
                grad: None,
                ..t
            },
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var, AutodiffError> {
        self.leaf(Tensor {
            requires_grad: false,
            ..t
        })
    }

    fn binary_broadcast(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        if !broadcastable(&sa, sb) {
            return Err(mismatch(name, &sa, sb));
        }
        let (da, db) = (self.data(a), self.data(b));
        let nb = db.len().max(1);
        let out = da.iter().enumerate().map(|(i, &x)| f(x, db[i % nb])).collect();
        self.push(sa, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_broadcast(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_broadcast(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_broadcast(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(shape, out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, AutodiffError> {
        self.unary(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, AutodiffError> {
        self.affine(a, s, 0.0)
    }

    /// Elementwise product with a constant of the same length (dropout masks, step masks).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var, AutodiffError> {
        if c.len() != self.data(a).len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "mul_const: {} values for tensor of {}",
                c.len(),
                self.data(a).len()
            )));
        }
        let shape = self.shape(a).to_vec();
        let out = self.data(a).iter().zip(&c).map(|(x, m)| x * m).collect();
        self.push(shape, out, Op::MulConst(a, Arc::new(c)), &[a])
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize), AutodiffError> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(AutodiffError::ShapeMismatch(format!("{op}: expected rank 2, got {s:?}"))),
        }
    }

    fn dims3(&self, v: Var, op: &str) -> Result<(usize, usize, usize), AutodiffError> {
        match self.shape(v) {
            [b, m, n] => Ok((*b, *m, *n)),
            s => Err(AutodiffError::ShapeMismatch(format!("{op}: expected rank 3, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(mismatch("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        mm_bt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        self.push(vec![m, n], out, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (bs, m, k) = self.dims3(a, "batch_matmul")?;
        let (bs2, k2, n) = self.dims3(b, "batch_matmul")?;
        if bs != bs2 || k != k2 {
            return Err(mismatch("batch_matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bs {
            mm_acc(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(vec![bs, m, n], out, Op::BatchMatMul(a, b), &[a, b])
    }

    /// Batched `a · bᵀ` for `a: B×m×k`, `b: B×n×k`.
    pub fn batch_matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (bs, m, k) = self.dims3(a, "batch_matmul_bt")?;
        let (bs2, n, k2) = self.dims3(b, "batch_matmul_bt")?;
        if bs != bs2 || k != k2 {
            return Err(mismatch("batch_matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bs {
            mm_bt_acc(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(vec![bs, m, n], out, Op::BatchMatMulBt(a, b), &[a, b])
    }

    /// Row lookup into a `V×d` table.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let (v, d) = self.dims2(table, "gather")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "gather: index {bad} out of range for {v} rows"
            )));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(vec![indices.len(), d], out, Op::Gather(table, indices.to_vec()), &[table])
    }

    pub fn spmm(&mut self, a: Arc<Csr>, x: Var) -> Result<Var, AutodiffError> {
        let (n, d) = self.dims2(x, "spmm")?;
        if a.n_cols != n {
            return Err(mismatch("spmm", &[a.n_rows, a.n_cols], self.shape(x)));
        }
        let out = a.matmul_dense(self.data(x), d);
        let rows = a.n_rows;
        self.push(vec![rows, d], out, Op::SpMM(a, x), &[x])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let n: usize = shape.iter().product();
        if n != self.data(a).len() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(a), &[a])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, AutodiffError> {
        let in_shape = self.shape(a).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if perm.len() != in_shape.len() || perm.iter().any(|&p| p >= in_shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(AutodiffError::ShapeMismatch(format!("permute: {perm:?} for {in_shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let map = permute_map(&in_shape, perm);
        let src = self.data(a);
        let out = map.iter().map(|&i| src[i]).collect();
        self.push(out_shape, out, Op::Permute(a, perm.to_vec()), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.data(a).iter().sum();
        self.push(vec![], vec![s], Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let d = self.data(a);
        if d.is_empty() {
            return Err(AutodiffError::ShapeMismatch("mean of empty tensor".into()));
        }
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![], vec![s], Op::MeanAll(a), &[a])
    }

    /// Sums the trailing axis away.
    pub fn sum_last_dim(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().ok_or_else(|| AutodiffError::ShapeMismatch("sum_last_dim on scalar".into()))?;
        let out: Vec<f64> = self.data(a).chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        self.push(shape[..shape.len() - 1].to_vec(), out, Op::SumLastDim(a), &[a])
    }

    /// `out[g] = Σ w · a[row]` over `(row, w)` pairs of group `g`; `a` is treated as rows × last-dim.
    pub fn row_combine(&mut self, a: Var, groups: Vec<Vec<(usize, f64)>>) -> Result<Var, AutodiffError> {
        let shape = self.shape(a);
        let d = *shape.last().unwrap_or(&1);
        let rows = self.data(a).len() / d.max(1);
        if groups.iter().flatten().any(|&(r, _)| r >= rows) {
            return Err(AutodiffError::ShapeMismatch("row_combine: row out of range".into()));
        }
        let src = self.data(a);
        let mut out = vec![0.0; groups.len() * d];
        for (g, members) in groups.iter().enumerate() {
            let o = &mut out[g * d..(g + 1) * d];
            for &(r, w) in members {
                for (ov, sv) in o.iter_mut().zip(&src[r * d..(r + 1) * d]) {
                    *ov += w * sv;
                }
            }
        }
        let g = groups.len();
        self.push(vec![g, d], out, Op::RowCombine(a, Arc::new(groups)), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, p) = self.dims2(a, "concat_cols")?;
        let (m2, q) = self.dims2(b, "concat_cols")?;
        if m != m2 {
            return Err(mismatch("concat_cols", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&da[i * p..(i + 1) * p]);
            out.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        self.push(vec![m, p + q], out, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start >= end || end > n {
            return Err(AutodiffError::ShapeMismatch(format!("slice_cols {start}..{end} of {n}")));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        self.push(vec![m, end - start], out, Op::SliceCols(a, start, end), &[a])
    }

    /// Softmax over the trailing axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().unwrap_or(&1);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for (row, o) in src.chunks(c).zip(out.chunks_mut(c)) {
            softmax_into(row, o);
        }
        self.push(shape, out, Op::SoftmaxRows(a), &[a])
    }

    /// `(x - mean) / sqrt(var + eps)` per row of the trailing axis.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().unwrap_or(&1);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for (row, o) in src.chunks(c).zip(out.chunks_mut(c)) {
            let (mean, inv) = row_moments(row, eps);
            for (ov, &x) in o.iter_mut().zip(row) {
                *ov = (x - mean) * inv;
            }
        }
        self.push(shape, out, Op::NormalizeRows(a, eps), &[a])
    }

    /// Scales each row of the trailing axis to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().unwrap_or(&1);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for (row, o) in src.chunks(c).zip(out.chunks_mut(c)) {
            let norm = dot(row, row).sqrt();
            if norm == 0.0 {
                return Err(AutodiffError::NonFinite("l2 normalisation of a zero row".into()));
            }
            for (ov, &x) in o.iter_mut().zip(row) {
                *ov = x / norm;
            }
        }
        self.push(shape, out, Op::L2NormalizeRows(a), &[a])
    }

    /// Per-row dot product of two `m×d` tensors → `m`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, d) = self.dims2(a, "row_dot")?;
        if self.shape(b) != [m, d] {
            return Err(mismatch("row_dot", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.data(a), self.data(b));
        let out = (0..m).map(|i| dot(&da[i * d..(i + 1) * d], &db[i * d..(i + 1) * d])).collect();
        self.push(vec![m], out, Op::RowDot(a, b), &[a, b])
    }

    /// Mean over the batch of `-Σ y · log softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Vec<f64>) -> Result<Var, AutodiffError> {
        let (b, c) = self.dims2(logits, "softmax_cross_entropy")?;
        if target.len() != b * c {
            return Err(AutodiffError::ShapeMismatch(format!(
                "softmax_cross_entropy: target has {} values for {b}x{c} logits",
                target.len()
            )));
        }
        let src = self.data(logits);
        let mut loss = 0.0;
        for (row, y) in src.chunks(c).zip(target.chunks(c)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += row.iter().zip(y).map(|(l, t)| t * (lse - l)).sum::<f64>();
        }
        loss /= b as f64;
        self.push(vec![], vec![loss], Op::SoftmaxXent(logits, Arc::new(target)), &[logits])
    }

    /// Mean binary cross-entropy of sigmoid(logits) against targets in [0,1].
    pub fn bce_with_logits(&mut self, logits: Var, target: Vec<f64>) -> Result<Var, AutodiffError> {
        let src = self.data(logits);
        if target.len() != src.len() || src.is_empty() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "bce_with_logits: {} targets for {} logits",
                target.len(),
                src.len()
            )));
        }
        let loss = src
            .iter()
            .zip(&target)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / src.len() as f64;
        self.push(vec![], vec![loss], Op::BceLogits(logits, Arc::new(target)), &[logits])
    }

    /// Valid cross-correlation followed by non-overlapping max-pooling.
    ///
    /// `input` is `H×W×C_in` or `B×H×W×C_in`; `kernels` is `kh×kw×C_in×C_out`.
    /// Pooling ties resolve to the first position in row-major scan order.
    pub fn conv2d_maxpool(&mut self, input: Var, kernels: Var, spec: ConvSpec) -> Result<Var, AutodiffError> {
        let in_shape = self.shape(input).to_vec();
        let (batched, bs, h, w, cin) = match in_shape[..] {
            [h, w, c] => (false, 1, h, w, c),
            [b, h, w, c] => (true, b, h, w, c),
            _ => return Err(AutodiffError::ShapeMismatch(format!("conv2d input {in_shape:?}"))),
        };
        let (kh, kw, kc, cout) = match self.shape(kernels)[..] {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(AutodiffError::ShapeMismatch(format!("conv2d kernels {s:?}"))),
        };
        let (ph, pw) = spec.pool;
        if kc != cin || h < kh || w < kw || spec.stride == 0 || ph == 0 || pw == 0 {
            return Err(mismatch("conv2d_maxpool", &in_shape, self.shape(kernels)));
        }
        let ho = (h - kh) / spec.stride + 1;
        let wo = (w - kw) / spec.stride + 1;
        let (po, qo) = (ho / ph, wo / pw);
        if po == 0 || qo == 0 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv2d_maxpool: pool {ph}x{pw} larger than conv output {ho}x{wo}"
            )));
        }
        let x = self.data(input);
        let k = self.data(kernels);
        let mut conv = vec![0.0; bs * ho * wo * cout];
        for b in 0..bs {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = &mut conv[((b * ho + oy) * wo + ox) * cout..][..cout];
                    for i in 0..kh {
                        for j in 0..kw {
                            let xin = &x[((b * h + oy * spec.stride + i) * w + ox * spec.stride + j) * cin..][..cin];
                            let kk = &k[(i * kw + j) * cin * cout..][..cin * cout];
                            for (ci, &xv) in xin.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                for (ov, kv) in o.iter_mut().zip(&kk[ci * cout..(ci + 1) * cout]) {
                                    *ov += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; bs * po * qo * cout];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..bs {
            for py in 0..po {
                for px in 0..qo {
                    for c in 0..cout {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_pos = 0;
                        for i in 0..ph {
                            for j in 0..pw {
                                let pos = (b * ho + py * ph + i) * wo + px * pw + j;
                                let v = conv[pos * cout + c];
                                if v > best {
                                    best = v;
                                    best_pos = pos;
                                }
                            }
                        }
                        let oi = ((b * po + py) * qo + px) * cout + c;
                        out[oi] = best;
                        argmax[oi] = best_pos;
                    }
                }
            }
        }
        let shape = if batched { vec![bs, po, qo, cout] } else { vec![po, qo, cout] };
        self.push(
            shape,
            out,
            Op::Conv2dMaxPool {
                input,
                kernels,
                spec,
                argmax,
            },
            &[input, kernels],
        )
    }

    /// Reverse-mode sweep from a scalar `loss`. Each recorded node is visited
    /// once, in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.data(loss).len() != 1 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.data.len()]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let nb = gb.len();
                    for (i, y) in g.iter().enumerate() {
                        gb[i % nb] += sign * y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                let nb = db.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y * db[i % nb];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % nb] += y * da[i];
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a).to_vec();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                }
            }
            Op::Affine(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::MulConst(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * c[i];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (da, db) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                if let Some(ga) = self.acc(grads, *a) {
                    mm_bt_acc(g, &db, ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    mm_at_acc(&da, g, gb, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (da, db) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                if let Some(ga) = self.acc(grads, *a) {
                    mm_acc(g, &db, ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    mm_at_acc(g, &da, gb, m, n, k);
                }
            }
            Op::BatchMatMul(a, b) => {
                let [bs, m, k] = self.shape(*a)[..] else { unreachable!() };
                let n = self.shape(*b)[2];
                let (da, db) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..bs {
                        mm_bt_acc(&g[i * m * n..][..m * n], &db[i * k * n..][..k * n], &mut ga[i * m * k..][..m * k], m, n, k);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..bs {
                        mm_at_acc(&da[i * m * k..][..m * k], &g[i * m * n..][..m * n], &mut gb[i * k * n..][..k * n], m, k, n);
                    }
                }
            }
            Op::BatchMatMulBt(a, b) => {
                let [bs, m, k] = self.shape(*a)[..] else { unreachable!() };
                let n = self.shape(*b)[1];
                let (da, db) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..bs {
                        mm_acc(&g[i * m * n..][..m * n], &db[i * n * k..][..n * k], &mut ga[i * m * k..][..m * k], m, n, k);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..bs {
                        mm_at_acc(&g[i * m * n..][..m * n], &da[i * m * k..][..m * k], &mut gb[i * n * k..][..n * k], m, n, k);
                    }
                }
            }
            Op::Gather(table, idx) => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (x, y) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *x += y;
                        }
                    }
                }
            }
            Op::SpMM(a, x) => {
                let d = self.shape(*x)[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..a.n_rows {
                        let gr = &g[r * d..(r + 1) * d];
                        for (c, v) in a.row(r) {
                            for (t, y) in gx[c * d..(c + 1) * d].iter_mut().zip(gr) {
                                *t += v * y;
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Permute(a, perm) => {
                let map = permute_map(self.shape(*a), perm);
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &i) in map.iter().enumerate() {
                        ga[i] += g[o];
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::SumLastDim(a) => {
                let c = *self.shape(*a).last().unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for (row, y) in ga.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|x| *x += y);
                    }
                }
            }
            Op::RowCombine(a, groups) => {
                let d = *self.shape(*a).last().unwrap_or(&1);
                if let Some(ga) = self.acc(grads, *a) {
                    for (gi, members) in groups.iter().enumerate() {
                        let gr = &g[gi * d..(gi + 1) * d];
                        for &(r, w) in members {
                            for (x, y) in ga[r * d..(r + 1) * d].iter_mut().zip(gr) {
                                *x += w * y;
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let p = self.shape(*a)[1];
                let q = self.shape(*b)[1];
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, row) in ga.chunks_mut(p).enumerate() {
                        row.iter_mut().zip(&g[i * (p + q)..]).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, row) in gb.chunks_mut(q).enumerate() {
                        row.iter_mut().zip(&g[i * (p + q) + p..]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SliceCols(a, start, end) => {
                let n = self.shape(*a)[1];
                let w = end - start;
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, gr) in g.chunks(w).enumerate() {
                        ga[i * n + start..i * n + end].iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = *node.value.shape.last().unwrap_or(&1);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), xr) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                        let s = dot(gr, yr);
                        for j in 0..c {
                            xr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::NormalizeRows(a, eps) => {
                let c = *node.value.shape.last().unwrap_or(&1);
                let x = self.data(*a).to_vec();
                if let Some(ga) = self.acc(grads, *a) {
                    for (((gr, yr), xr), dst) in g.chunks(c).zip(out.chunks(c)).zip(x.chunks(c)).zip(ga.chunks_mut(c)) {
                        let (_, inv) = row_moments(xr, *eps);
                        let gm = gr.iter().sum::<f64>() / c as f64;
                        let gy = dot(gr, yr) / c as f64;
                        for j in 0..c {
                            dst[j] += inv * (gr[j] - gm - yr[j] * gy);
                        }
                    }
                }
            }
            Op::L2NormalizeRows(a) => {
                let c = *node.value.shape.last().unwrap_or(&1);
                let x = self.data(*a).to_vec();
                if let Some(ga) = self.acc(grads, *a) {
                    for (((gr, yr), xr), dst) in g.chunks(c).zip(out.chunks(c)).zip(x.chunks(c)).zip(ga.chunks_mut(c)) {
                        let norm = dot(xr, xr).sqrt();
                        let gy = dot(gr, yr);
                        for j in 0..c {
                            dst[j] += (gr[j] - yr[j] * gy) / norm;
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let d = self.shape(*a)[1];
                let (da, db) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, y) in g.iter().enumerate() {
                        for j in 0..d {
                            ga[i * d + j] += y * db[i * d + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, y) in g.iter().enumerate() {
                        for j in 0..d {
                            gb[i * d + j] += y * da[i * d + j];
                        }
                    }
                }
            }
            Op::SoftmaxXent(logits, target) => {
                let (b, c) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                let x = self.data(*logits).to_vec();
                if let Some(gl) = self.acc(grads, *logits) {
                    let mut p = vec![0.0; c];
                    for r in 0..b {
                        softmax_into(&x[r * c..(r + 1) * c], &mut p);
                        for j in 0..c {
                            gl[r * c + j] += g[0] * (p[j] - target[r * c + j]) / b as f64;
                        }
                    }
                }
            }
            Op::BceLogits(logits, target) => {
                let x = self.data(*logits).to_vec();
                let n = x.len() as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for i in 0..x.len() {
                        gl[i] += g[0] * (sigmoid(x[i]) - target[i]) / n;
                    }
                }
            }
            Op::Conv2dMaxPool {
                input,
                kernels,
                spec,
                argmax,
            } => {
                let in_shape = self.shape(*input);
                let (h, w, cin) = match in_shape[..] {
                    [h, w, c] | [_, h, w, c] => (h, w, c),
                    _ => unreachable!(),
                };
                let [kh, kw, _, cout] = self.shape(*kernels)[..] else { unreachable!() };
                let wo = (w - kw) / spec.stride + 1;
                let ho = (h - kh) / spec.stride + 1;
                let x = self.data(*input).to_vec();
                let k = self.data(*kernels).to_vec();
                let mut gin = self.nodes[input.0].needs_grad.then(|| vec![0.0; x.len()]);
                let mut gk = self.nodes[kernels.0].needs_grad.then(|| vec![0.0; k.len()]);
                for (oi, &pos) in argmax.iter().enumerate() {
                    let gv = g[oi];
                    if gv == 0.0 {
                        continue;
                    }
                    let co = oi % cout;
                    let b = pos / (ho * wo);
                    let oy = (pos / wo) % ho;
                    let ox = pos % wo;
                    for i in 0..kh {
                        for j in 0..kw {
                            let xbase = ((b * h + oy * spec.stride + i) * w + ox * spec.stride + j) * cin;
                            let kbase = (i * kw + j) * cin * cout;
                            for ci in 0..cin {
                                if let Some(gi) = gin.as_mut() {
                                    gi[xbase + ci] += gv * k[kbase + ci * cout + co];
                                }
                                if let Some(gkk) = gk.as_mut() {
                                    gkk[kbase + ci * cout + co] += gv * x[xbase + ci];
                                }
                            }
                        }
                    }
                }
                if let (Some(src), Some(dst)) = (gin, self.acc(grads, *input)) {
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                if let (Some(src), Some(dst)) = (gk, self.acc(grads, *kernels)) {
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// For each flat output index of the permuted tensor, the flat input index it reads.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Affine(..) => "affine",
        Op::MulConst(..) => "mul_const",
        Op::MatMul(..) => "matmul",
        Op::MatMulBt(..) => "matmul_bt",
        Op::BatchMatMul(..) => "batch_matmul",
        Op::BatchMatMulBt(..) => "batch_matmul_bt",
        Op::Gather(..) => "gather",
        Op::SpMM(..) => "spmm",
        Op::Reshape(..) => "reshape",
        Op::Permute(..) => "permute",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::SumLastDim(..) => "sum_last_dim",
        Op::RowCombine(..) => "row_combine",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::NormalizeRows(..) => "normalize_rows",
        Op::L2NormalizeRows(..) => "l2_normalize_rows",
        Op::RowDot(..) => "row_dot",
        Op::SoftmaxXent(..) => "softmax_cross_entropy",
        Op::BceLogits(..) => "bce_with_logits",
        Op::Conv2dMaxPool { .. } => "conv2d_maxpool",
    }
}
