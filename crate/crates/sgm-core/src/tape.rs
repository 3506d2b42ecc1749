//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The tape is an append-only arena: every operation records a node holding
//! its opcode, input handles, and the computed output value. [`Var`] is an
//! index into that arena. Backward runs the nodes in reverse order, pushing
//! gradients from each node into its inputs through per-op local rules.
//!
//! Gradients accumulate: each `backward` sweep uses fresh working buffers and
//! then adds the result into persistent per-node accumulators, so repeated
//! calls without [`Tape::reset_grads`] sum their contributions.
//!
//! All values are f64. There is no broadcasting beyond matrix–vector and
//! scalar–tensor forms; every shape rule is checked eagerly and violations
//! surface as [`SgmError::Dimension`] or [`SgmError::Contract`].

use crate::error::{Result, SgmError};
use crate::tensor::Tensor;

/// Handle to a tape node. Only meaningful for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Externally supplied value (parameter or constant input).
    Leaf,
    /// C[m×n] = A[m×k] · B[k×n]
    Matmul(Var, Var),
    /// C[m×n] = A[m×k] · B[n×k]ᵀ — the score-matrix product.
    MatmulNT(Var, Var),
    /// y[m] = W[m×k] · x[k]
    MatVec(Var, Var),
    /// Column `col` of a matrix, as a vector. One-hot product reduced.
    SelectColumn(Var, usize),
    /// [a; b] for two vectors.
    ConcatRows(Var, Var),
    /// N same-length vectors stacked into an N×D matrix.
    StackRows(Vec<Var>),
    /// rows·cols scalars packed row-major into a matrix.
    StackScalars(Vec<Var>),
    Tanh(Var),
    Sigmoid(Var),
    /// Elementwise sum of same-shape tensors.
    Add(Var, Var),
    /// Elementwise (Hadamard) product of same-shape tensors.
    MulElem(Var, Var),
    /// x * c for a compile-time constant c (not a tape value).
    Scale(Var, f64),
    SumAll(Var),
    MeanAll(Var),
    /// Per-row maximum of a matrix; `argmax` fixed at record time,
    /// ties broken by lowest column index.
    RowMax { m: Var, argmax: Vec<usize> },
    /// Rows rescaled to unit L2 norm (rows with norm < 1e-12 pass through).
    NormalizeRows(Var),
    /// Eq.-8-style ranking loss: sum over diagonal pairs of every
    /// margin-violating row and column negative.
    TripletAll { scores: Var, margin: f64 },
    /// Eq.-9-style ranking loss: mean over diagonal pairs of the single
    /// hardest row and column negative, chosen at record time.
    TripletHardest {
        scores: Var,
        margin: f64,
        /// Per diagonal pair k: (argmax_{j≠k} S[k][j], argmax_{j≠k} S[j][k]).
        hardest: Vec<(usize, usize)>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// Persistent gradient accumulator, allocated on first backward reach.
    grad: Option<Vec<f64>>,
}

/// Append-only computation tape. See module docs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    // ─── Node access ─────────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if `v` tracks gradients and has been
    /// reached by at least one backward sweep.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears all gradient accumulators, keeping values and structure.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Index and opcode name of the first node holding a non-finite value,
    /// scanning in recording order. Used for divergence diagnostics.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.values.iter().any(|v| !v.is_finite()) {
                Some((i, op_name(&n.op)))
            } else {
                None
            }
        })
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, value, rg)
    }

    // ─── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Non-differentiable input (data, fixed features).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Differentiable input (trainable parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    // ─── Forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(SgmError::dimension(
                "matmul",
                format!("{:?} · {:?}", ta.shape, tb.shape),
            ));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let out = mat_mul(&ta.values, &tb.values, m, k, n);
        Ok(self.push_derived(Op::Matmul(a, b), Tensor::new(vec![m, n], out), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(SgmError::dimension(
                "matmul_nt",
                format!("{:?} · {:?}ᵀ", ta.shape, tb.shape),
            ));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let out = mat_mul_nt(&ta.values, &tb.values, m, k, n);
        Ok(self.push_derived(Op::MatmulNT(a, b), Tensor::new(vec![m, n], out), &[a, b]))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (tw, tx) = (self.value(w), self.value(x));
        if tw.shape.len() != 2 || tx.shape.len() != 1 || tw.shape[1] != tx.shape[0] {
            return Err(SgmError::dimension(
                "matvec",
                format!("{:?} · {:?}", tw.shape, tx.shape),
            ));
        }
        let out = mat_vec(&tw.values, &tx.values, tw.shape[0], tw.shape[1]);
        let shape = vec![tw.shape[0]];
        Ok(self.push_derived(Op::MatVec(w, x), Tensor::new(shape, out), &[w, x]))
    }

    pub fn select_column(&mut self, m: Var, col: usize) -> Result<Var> {
        let tm = self.value(m);
        if tm.shape.len() != 2 || col >= tm.shape[1] {
            return Err(SgmError::dimension(
                "select_column",
                format!("column {} of shape {:?}", col, tm.shape),
            ));
        }
        let (rows, cols) = (tm.shape[0], tm.shape[1]);
        let out: Vec<f64> = (0..rows).map(|r| tm.values[r * cols + col]).collect();
        Ok(self.push_derived(Op::SelectColumn(m, col), Tensor::new(vec![rows], out), &[m]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 1 || tb.shape.len() != 1 {
            return Err(SgmError::dimension(
                "concat_rows",
                format!("{:?} ++ {:?} (vectors required)", ta.shape, tb.shape),
            ));
        }
        let mut out = ta.values.clone();
        out.extend_from_slice(&tb.values);
        let shape = vec![ta.shape[0] + tb.shape[0]];
        Ok(self.push_derived(Op::ConcatRows(a, b), Tensor::new(shape, out), &[a, b]))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(SgmError::contract("stack_rows needs at least one row"));
        }
        let d = self.value(rows[0]).shape.clone();
        if d.len() != 1 {
            return Err(SgmError::dimension(
                "stack_rows",
                format!("row 0 has shape {:?}, vector required", d),
            ));
        }
        let d = d[0];
        let mut out = Vec::with_capacity(rows.len() * d);
        for (i, &r) in rows.iter().enumerate() {
            let t = self.value(r);
            if t.shape != [d] {
                return Err(SgmError::dimension(
                    "stack_rows",
                    format!("row {} has shape {:?}, expected [{}]", i, t.shape, d),
                ));
            }
            out.extend_from_slice(&t.values);
        }
        let shape = vec![rows.len(), d];
        Ok(self.push_derived(Op::StackRows(rows.to_vec()), Tensor::new(shape, out), rows))
    }

    /// Packs `rows·cols` scalar vars into a matrix, row-major.
    pub fn stack_scalars(&mut self, scalars: &[Var], rows: usize, cols: usize) -> Result<Var> {
        if scalars.len() != rows * cols {
            return Err(SgmError::contract(format!(
                "stack_scalars: {} values cannot fill {}×{}",
                scalars.len(),
                rows,
                cols
            )));
        }
        let mut out = Vec::with_capacity(scalars.len());
        for &s in scalars {
            let t = self.value(s);
            if !t.shape.is_empty() {
                return Err(SgmError::dimension(
                    "stack_scalars",
                    format!("non-scalar input of shape {:?}", t.shape),
                ));
            }
            out.push(t.values[0]);
        }
        Ok(self.push_derived(
            Op::StackScalars(scalars.to_vec()),
            Tensor::new(vec![rows, cols], out),
            scalars,
        ))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).values.iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape.clone();
        self.push_derived(Op::Tanh(x), Tensor::new(shape, out), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).values.iter().map(|v| sigmoid(*v)).collect();
        let shape = self.value(x).shape.clone();
        self.push_derived(Op::Sigmoid(x), Tensor::new(shape, out), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(SgmError::dimension(
                "add",
                format!("{:?} + {:?}", ta.shape, tb.shape),
            ));
        }
        let out: Vec<f64> = ta
            .values
            .iter()
            .zip(&tb.values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = ta.shape.clone();
        Ok(self.push_derived(Op::Add(a, b), Tensor::new(shape, out), &[a, b]))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(SgmError::dimension(
                "mul_elem",
                format!("{:?} ⊙ {:?}", ta.shape, tb.shape),
            ));
        }
        let out: Vec<f64> = ta
            .values
            .iter()
            .zip(&tb.values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape.clone();
        Ok(self.push_derived(Op::MulElem(a, b), Tensor::new(shape, out), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).values.iter().map(|v| v * c).collect();
        let shape = self.value(x).shape.clone();
        self.push_derived(Op::Scale(x, c), Tensor::new(shape, out), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(SgmError::contract("sum_all over an empty tensor"));
        }
        let s: f64 = t.values.iter().sum();
        Ok(self.push_derived(Op::SumAll(x), Tensor::scalar(s), &[x]))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(SgmError::contract("mean_all over an empty tensor"));
        }
        let s: f64 = t.values.iter().sum::<f64>() / t.len() as f64;
        Ok(self.push_derived(Op::MeanAll(x), Tensor::scalar(s), &[x]))
    }

    /// Per-row maximum of a matrix. Returns the maxima vector and the argmax
    /// column per row; ties resolve to the lowest column index, and the
    /// backward rule routes each row's gradient only to that cell.
    pub fn row_max(&mut self, m: Var) -> Result<(Var, Vec<usize>)> {
        let tm = self.value(m);
        if tm.shape.len() != 2 {
            return Err(SgmError::dimension(
                "row_max",
                format!("shape {:?}, matrix required", tm.shape),
            ));
        }
        let (rows, cols) = (tm.shape[0], tm.shape[1]);
        if rows == 0 || cols == 0 {
            return Err(SgmError::contract(format!(
                "row_max over an empty {}×{} matrix",
                rows, cols
            )));
        }
        let mut maxima = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &tm.values[r * cols..(r + 1) * cols];
            let (mut bi, mut bv) = (0usize, row[0]);
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > bv {
                    bi = c;
                    bv = v;
                }
            }
            maxima.push(bv);
            argmax.push(bi);
        }
        let var = self.push_derived(
            Op::RowMax {
                m,
                argmax: argmax.clone(),
            },
            Tensor::new(vec![rows], maxima),
            &[m],
        );
        Ok((var, argmax))
    }

    /// Rescales each row of a matrix to unit L2 norm. Rows with norm below
    /// 1e-12 pass through unchanged (identity, also in backward).
    pub fn normalize_rows(&mut self, m: Var) -> Result<Var> {
        let tm = self.value(m);
        if tm.shape.len() != 2 {
            return Err(SgmError::dimension(
                "normalize_rows",
                format!("shape {:?}, matrix required", tm.shape),
            ));
        }
        let (rows, cols) = (tm.shape[0], tm.shape[1]);
        let mut out = tm.values.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let norm = l2_norm(row);
            if norm >= NORM_FLOOR {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        let shape = tm.shape.clone();
        Ok(self.push_derived(Op::NormalizeRows(m), Tensor::new(shape, out), &[m]))
    }

    /// Ranking loss over a square batch score matrix: for every diagonal pair
    /// (k,k), every same-row and same-column negative that violates the
    /// margin contributes, and contributions are summed across the batch.
    pub fn triplet_all(&mut self, scores: Var, margin: f64) -> Result<Var> {
        let b = self.check_triplet_input(scores, margin, "triplet_all")?;
        let s = &self.value(scores).values;
        let mut loss = 0.0;
        for k in 0..b {
            let skk = s[k * b + k];
            for j in 0..b {
                if j == k {
                    continue;
                }
                loss += (margin - skk + s[k * b + j]).max(0.0);
                loss += (margin - skk + s[j * b + k]).max(0.0);
            }
        }
        Ok(self.push_derived(
            Op::TripletAll { scores, margin },
            Tensor::scalar(loss),
            &[scores],
        ))
    }

    /// Ranking loss using only the hardest negatives: for each diagonal pair,
    /// the strongest same-row and same-column off-diagonal competitor. The
    /// per-pair terms are averaged over the batch. Hardest indices are chosen
    /// at record time (ties to the lowest index) and fixed for backward.
    pub fn triplet_hardest(&mut self, scores: Var, margin: f64) -> Result<Var> {
        let b = self.check_triplet_input(scores, margin, "triplet_hardest")?;
        let s = &self.value(scores).values;
        let mut hardest = Vec::with_capacity(b);
        let mut loss = 0.0;
        for k in 0..b {
            let skk = s[k * b + k];
            let row_hard = argmax_skipping(b, k, |j| s[k * b + j]);
            let col_hard = argmax_skipping(b, k, |j| s[j * b + k]);
            loss += (margin - skk + s[k * b + row_hard]).max(0.0);
            loss += (margin - skk + s[col_hard * b + k]).max(0.0);
            hardest.push((row_hard, col_hard));
        }
        loss /= b as f64;
        Ok(self.push_derived(
            Op::TripletHardest {
                scores,
                margin,
                hardest,
            },
            Tensor::scalar(loss),
            &[scores],
        ))
    }

    fn check_triplet_input(&self, scores: Var, margin: f64, op: &'static str) -> Result<usize> {
        let t = self.value(scores);
        if t.shape.len() != 2 || t.shape[0] != t.shape[1] {
            return Err(SgmError::contract(format!(
                "{op}: score matrix must be square, got {:?}",
                t.shape
            )));
        }
        if t.shape[0] < 2 {
            return Err(SgmError::contract(format!(
                "{op}: batch of {} has no negatives",
                t.shape[0]
            )));
        }
        if margin < 0.0 {
            return Err(SgmError::contract(format!("{op}: margin {margin} < 0")));
        }
        Ok(t.shape[0])
    }

    // ─── Backward ────────────────────────────────────────────────────────

    /// Propagates d(loss)/d(node) from a scalar loss to every reachable
    /// gradient-tracking node, adding into persistent accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(SgmError::contract("backward on an empty tape"));
        }
        if !self.value(loss).shape.is_empty() {
            return Err(SgmError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        // Fresh working buffers per sweep; accumulation happens at the end.
        let mut working: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        working[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = working[i].take() else { continue };
            self.backward_op(i, &g, &mut working);
            working[i] = Some(g);
        }

        for (i, g) in working.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let acc = self.nodes[i]
                .grad
                .get_or_insert_with(|| vec![0.0; g.len()]);
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        Ok(())
    }

    /// The local backward rule for node `i`, pushing `g` into its inputs'
    /// working buffers. Non-tracking inputs are skipped.
    fn backward_op(&self, i: usize, g: &[f64], working: &mut [Option<Vec<f64>>]) {
        // Adds `f`'s output into `working[v]`, lazily allocating zeros.
        macro_rules! push_to {
            ($v:expr, $len:expr, $f:expr) => {
                if self.nodes[$v.0].requires_grad {
                    let buf = working[$v.0].get_or_insert_with(|| vec![0.0; $len]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(buf.as_mut_slice());
                }
            };
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                push_to!(a, m * k, |buf: &mut [f64]| {
                    // dA += G · Bᵀ
                    mat_mul_nt_into(g, &tb.values, m, n, k, buf);
                });
                push_to!(b, k * n, |buf: &mut [f64]| {
                    // dB += Aᵀ · G
                    mat_mul_tn_into(&ta.values, g, m, k, n, buf);
                });
            }
            Op::MatmulNT(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                push_to!(a, m * k, |buf: &mut [f64]| {
                    // dA += G · B
                    mat_mul_into(g, &tb.values, m, n, k, buf);
                });
                push_to!(b, n * k, |buf: &mut [f64]| {
                    // dB += Gᵀ · A
                    mat_mul_tn_into(g, &ta.values, m, n, k, buf);
                });
            }
            Op::MatVec(w, x) => {
                let (tw, tx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
                let (m, k) = (tw.shape[0], tw.shape[1]);
                push_to!(w, m * k, |buf: &mut [f64]| {
                    // dW += g ⊗ x
                    for r in 0..m {
                        for c in 0..k {
                            buf[r * k + c] += g[r] * tx.values[c];
                        }
                    }
                });
                push_to!(x, k, |buf: &mut [f64]| {
                    // dx += Wᵀ · g
                    for r in 0..m {
                        for c in 0..k {
                            buf[c] += tw.values[r * k + c] * g[r];
                        }
                    }
                });
            }
            Op::SelectColumn(m, col) => {
                let tm = &self.nodes[m.0].value;
                let (rows, cols) = (tm.shape[0], tm.shape[1]);
                push_to!(m, rows * cols, |buf: &mut [f64]| {
                    for r in 0..rows {
                        buf[r * cols + col] += g[r];
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].value.len();
                let nb = self.nodes[b.0].value.len();
                push_to!(a, na, |buf: &mut [f64]| {
                    for (x, y) in buf.iter_mut().zip(&g[..na]) {
                        *x += y;
                    }
                });
                push_to!(b, nb, |buf: &mut [f64]| {
                    for (x, y) in buf.iter_mut().zip(&g[na..]) {
                        *x += y;
                    }
                });
            }
            Op::StackRows(rows) => {
                let d = self.nodes[rows[0].0].value.len();
                for (r, v) in rows.iter().enumerate() {
                    push_to!(v, d, |buf: &mut [f64]| {
                        for (x, y) in buf.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *x += y;
                        }
                    });
                }
            }
            Op::StackScalars(cells) => {
                for (idx, v) in cells.iter().enumerate() {
                    push_to!(v, 1, |buf: &mut [f64]| buf[0] += g[idx]);
                }
            }
            Op::Tanh(x) => {
                let y = &self.nodes[i].value.values;
                push_to!(x, y.len(), |buf: &mut [f64]| {
                    for ((b, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                        *b += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value.values;
                push_to!(x, y.len(), |buf: &mut [f64]| {
                    for ((b, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                        *b += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Add(a, b) => {
                let n = g.len();
                push_to!(a, n, |buf: &mut [f64]| {
                    for (x, y) in buf.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                push_to!(b, n, |buf: &mut [f64]| {
                    for (x, y) in buf.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::MulElem(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                push_to!(a, g.len(), |buf: &mut [f64]| {
                    for ((x, gi), bv) in buf.iter_mut().zip(g).zip(&tb.values) {
                        *x += gi * bv;
                    }
                });
                push_to!(b, g.len(), |buf: &mut [f64]| {
                    for ((x, gi), av) in buf.iter_mut().zip(g).zip(&ta.values) {
                        *x += gi * av;
                    }
                });
            }
            Op::Scale(x, c) => {
                push_to!(x, g.len(), |buf: &mut [f64]| {
                    for (b, gi) in buf.iter_mut().zip(g) {
                        *b += gi * c;
                    }
                });
            }
            Op::SumAll(x) => {
                let n = self.nodes[x.0].value.len();
                push_to!(x, n, |buf: &mut [f64]| {
                    for b in buf.iter_mut() {
                        *b += g[0];
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.len();
                let share = g[0] / n as f64;
                push_to!(x, n, |buf: &mut [f64]| {
                    for b in buf.iter_mut() {
                        *b += share;
                    }
                });
            }
            Op::RowMax { m, argmax } => {
                let tm = &self.nodes[m.0].value;
                let (rows, cols) = (tm.shape[0], tm.shape[1]);
                push_to!(m, rows * cols, |buf: &mut [f64]| {
                    for (r, &c) in argmax.iter().enumerate() {
                        buf[r * cols + c] += g[r];
                    }
                });
            }
            Op::NormalizeRows(m) => {
                let tm = &self.nodes[m.0].value;
                let (rows, cols) = (tm.shape[0], tm.shape[1]);
                push_to!(m, rows * cols, |buf: &mut [f64]| {
                    for r in 0..rows {
                        let x = &tm.values[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let out = &mut buf[r * cols..(r + 1) * cols];
                        let norm = l2_norm(x);
                        if norm < NORM_FLOOR {
                            for (o, gi) in out.iter_mut().zip(gr) {
                                *o += gi;
                            }
                        } else {
                            // d(x/‖x‖) = g/‖x‖ − x·(x·g)/‖x‖³
                            let dot: f64 = x.iter().zip(gr).map(|(a, b)| a * b).sum();
                            let n3 = norm * norm * norm;
                            for ((o, gi), xi) in out.iter_mut().zip(gr).zip(x) {
                                *o += gi / norm - xi * dot / n3;
                            }
                        }
                    }
                });
            }
            Op::TripletAll { scores, margin } => {
                let t = &self.nodes[scores.0].value;
                let b = t.shape[0];
                let s = &t.values;
                push_to!(scores, b * b, |buf: &mut [f64]| {
                    for k in 0..b {
                        let skk = s[k * b + k];
                        for j in 0..b {
                            if j == k {
                                continue;
                            }
                            if margin - skk + s[k * b + j] > 0.0 {
                                buf[k * b + j] += g[0];
                                buf[k * b + k] -= g[0];
                            }
                            if margin - skk + s[j * b + k] > 0.0 {
                                buf[j * b + k] += g[0];
                                buf[k * b + k] -= g[0];
                            }
                        }
                    }
                });
            }
            Op::TripletHardest {
                scores,
                margin,
                hardest,
            } => {
                let t = &self.nodes[scores.0].value;
                let b = t.shape[0];
                let s = &t.values;
                let share = g[0] / b as f64;
                push_to!(scores, b * b, |buf: &mut [f64]| {
                    for (k, &(row_hard, col_hard)) in hardest.iter().enumerate() {
                        let skk = s[k * b + k];
                        if margin - skk + s[k * b + row_hard] > 0.0 {
                            buf[k * b + row_hard] += share;
                            buf[k * b + k] -= share;
                        }
                        if margin - skk + s[col_hard * b + k] > 0.0 {
                            buf[col_hard * b + k] += share;
                            buf[k * b + k] -= share;
                        }
                    }
                });
            }
        }
    }
}

/// Largest value among indices `0..n` excluding `skip`; ties take the lowest
/// index. `n ≥ 2` is guaranteed by the caller.
fn argmax_skipping(n: usize, skip: usize, f: impl Fn(usize) -> f64) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for j in 0..n {
        if j == skip {
            continue;
        }
        let v = f(j);
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((j, v)),
        }
    }
    best.expect("argmax_skipping needs n >= 2").0
}

fn sigmoid(x: f64) -> f64 {
    // Split by sign to avoid overflow in exp for large |x|.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// ─── Raw matrix kernels (flat row-major slices) ──────────────────────────

fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    mat_mul_into(a, b, m, k, n, &mut out);
    out
}

/// out[m×n] += a[m×k] · b[k×n]
fn mat_mul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[t * n + j];
            }
        }
    }
}

fn mat_mul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    mat_mul_nt_into(a, b, m, k, n, &mut out);
    out
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
fn mat_mul_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[j * k + t];
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
fn mat_mul_tn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for t in 0..m {
        for i in 0..k {
            let av = a[t * k + i];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[t * n + j];
            }
        }
    }
}

fn mat_vec(w: &[f64], x: &[f64], m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for r in 0..m {
        let mut acc = 0.0;
        for c in 0..k {
            acc += w[r * k + c] * x[c];
        }
        out[r] = acc;
    }
    out
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::MatmulNT(..) => "matmul_nt",
        Op::MatVec(..) => "matvec",
        Op::SelectColumn(..) => "select_column",
        Op::ConcatRows(..) => "concat_rows",
        Op::StackRows(..) => "stack_rows",
        Op::StackScalars(..) => "stack_scalars",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Add(..) => "add",
        Op::MulElem(..) => "mul_elem",
        Op::Scale(..) => "scale",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::RowMax { .. } => "row_max",
        Op::NormalizeRows(..) => "normalize_rows",
        Op::TripletAll { .. } => "triplet_all",
        Op::TripletHardest { .. } => "triplet_hardest",
    }
}
