//! Reverse-mode automatic differentiation over batched `f64` tensors.
//!
//! A [`Tape`] records a DAG of operations on 2-D arrays (`(batch, channels)`
//! shaped; scalars are `(1, 1)`). Forward values are computed eagerly while
//! the graph is built; [`Tape::backward`] then walks the node list in reverse
//! and accumulates vector-Jacobian products.
//!
//! Parameters are *not* copied onto the tape. Ops that touch a parameter
//! tensor hold a [`PTensor`] — a borrow of the tensor plus its [`ParamId`]
//! and a `live` flag. Gradients for frozen (`live == false`) parameters are
//! never allocated, which is how schedule stages guarantee that frozen
//! groups receive exactly zero update. The per-parameter gradients come back
//! in a [`Gradients`] map keyed by `ParamId` (a `BTreeMap`, so iteration
//! order — and therefore any accumulation done by callers — is
//! deterministic).
//!
//! The op set is deliberately small: affine maps, the pointwise
//! nonlinearities used by the networks, sinusoidal encodings, a weighted
//! gather (trilinear interpolation with precomputed corner indices/weights),
//! row-wise norms/dots, and scalar reductions. Spatial derivatives of the
//! SDF are produced by a forward-over-reverse scheme built *from these same
//! ops* (see `field::FieldEval::sdf_with_gradient`), so second-order terms
//! like the eikonal penalty backpropagate through the ordinary reverse pass.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use crate::optim::ParamId;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

/// Borrowed view of a parameter tensor, tagged with identity and liveness.
#[derive(Clone, Copy)]
pub struct PTensor<'a> {
    pub vals: &'a Array2<f64>,
    pub id: ParamId,
    pub live: bool,
}

impl<'a> PTensor<'a> {
    pub fn new(vals: &'a Array2<f64>, id: ParamId, live: bool) -> Self {
        PTensor { vals, id, live }
    }
}

/// Operand of a tape op: either an earlier node or a parameter tensor.
#[derive(Clone, Copy)]
pub enum Src<'a> {
    Node(Var),
    Param(PTensor<'a>),
}

impl<'a> From<Var> for Src<'a> {
    fn from(v: Var) -> Self {
        Src::Node(v)
    }
}

impl<'a> From<PTensor<'a>> for Src<'a> {
    fn from(p: PTensor<'a>) -> Self {
        Src::Param(p)
    }
}

enum Op<'a> {
    Const,
    /// Like `Const`, but its gradient is retained and reported.
    Input,
    /// Materializes a (small) parameter tensor as a node.
    ReadParam(PTensor<'a>),
    /// Copies one row of a parameter tensor as a `(1, c)` node.
    ReadRow(PTensor<'a>, usize),
    MatMul(Src<'a>, Src<'a>),
    /// `(n, c) + broadcast((1, c))`.
    AddRow(Var, Src<'a>),
    Add(Var, Var),
    Sub(Var, Var),
    Neg(Var),
    Mul(Var, Var),
    /// `(n, c) * broadcast((n, 1))`.
    MulCol(Var, Var),
    /// `(n, c) * broadcast((1, c))`.
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `softplus(beta * x) / beta`.
    Softplus(Var, f64),
    /// `sigmoid(k * x)`.
    Sigmoid(Var, f64),
    Relu(Var),
    Tanh(Var),
    /// `sin(k * x)`.
    Sin(Var, f64),
    /// `cos(k * x)`.
    Cos(Var, f64),
    Abs(Var),
    Recip(Var),
    /// Row-wise L2 norm: `(n, c) -> (n, 1)`. Gradient is 0 for zero rows.
    RowNorm(Var),
    /// Row-wise `x / max(|x|, eps)`.
    NormalizeRows(Var, f64),
    /// Row-wise dot product: `(n, c), (n, c) -> (n, 1)`.
    DotRows(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    ConcatCols(Vec<Var>),
    /// Weighted gather of parameter rows: `out[i] = sum_j w[i,j] * p[idx[i,j]]`.
    Gather {
        p: PTensor<'a>,
        idx: Vec<u32>,
        w: Array2<f64>,
    },
}

struct Node<'a> {
    value: Array2<f64>,
    needs: bool,
    op: Op<'a>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    /// Per-parameter gradients; frozen parameters are absent.
    pub params: BTreeMap<ParamId, Array2<f64>>,
    /// Gradients of `input` nodes, keyed by their `Var` index.
    pub inputs: BTreeMap<u32, Array2<f64>>,
}

impl Gradients {
    /// Sums `other` into `self` (used to merge per-scene tapes; callers must
    /// merge in a fixed order to stay deterministic).
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(acc) => *acc += &g,
                None => {
                    self.params.insert(id, g);
                }
            }
        }
        for (k, g) in other.inputs {
            match self.inputs.get_mut(&k) {
                Some(acc) => *acc += &g,
                None => {
                    self.inputs.insert(k, g);
                }
            }
        }
    }

    /// Scales every gradient by `k` (e.g. for averaging over scenes).
    pub fn scale(&mut self, k: f64) {
        for g in self.params.values_mut() {
            g.mapv_inplace(|x| x * k);
        }
        for g in self.inputs.values_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }

    pub fn input_grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.inputs.get(&v.0)
    }
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    // max(x, 0) + ln(1 + exp(-|x|))
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0 as usize].value
    }

    /// Scalar value of a `(1, 1)` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, needs: bool, op: Op<'a>) -> Var {
        let id = u32::try_from(self.nodes.len()).expect("tape too large");
        self.nodes.push(Node { value, needs, op });
        Var(id)
    }

    fn needs(&self, s: &Src<'a>) -> bool {
        match s {
            Src::Node(v) => self.nodes[v.0 as usize].needs,
            Src::Param(p) => p.live,
        }
    }

    fn src_value<'s>(&'s self, s: &Src<'a>) -> &'s Array2<f64>
    where
        'a: 's,
    {
        match s {
            Src::Node(v) => &self.nodes[v.0 as usize].value,
            Src::Param(p) => p.vals,
        }
    }

    pub fn constant(&mut self, v: Array2<f64>) -> Var {
        self.push(v, false, Op::Const)
    }

    /// A constant whose gradient is retained (readable via
    /// [`Gradients::input_grad`]).
    pub fn input(&mut self, v: Array2<f64>) -> Var {
        self.push(v, true, Op::Input)
    }

    pub fn read_param(&mut self, p: PTensor<'a>) -> Var {
        self.push(p.vals.clone(), p.live, Op::ReadParam(p))
    }

    pub fn read_row(&mut self, p: PTensor<'a>, row: usize) -> Var {
        let v = p.vals.row(row).insert_axis(Axis(0)).to_owned();
        self.push(v, p.live, Op::ReadRow(p, row))
    }

    pub fn matmul(&mut self, a: impl Into<Src<'a>>, b: impl Into<Src<'a>>) -> Var {
        let (a, b) = (a.into(), b.into());
        let (va, vb) = (self.src_value(&a), self.src_value(&b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul shape mismatch");
        let value = va.dot(vb);
        let needs = self.needs(&a) || self.needs(&b);
        self.push(value, needs, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, x: Var, b: impl Into<Src<'a>>) -> Var {
        let b = b.into();
        let vb = self.src_value(&b);
        assert_eq!(vb.nrows(), 1, "add_row bias must be (1, c)");
        assert_eq!(self.value(x).ncols(), vb.ncols(), "add_row width mismatch");
        let value = self.value(x) + vb;
        let needs = self.nodes[x.0 as usize].needs || self.needs(&b);
        self.push(value, needs, Op::AddRow(x, b))
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "{name} shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let value = self.value(a) + self.value(b);
        let needs = self.nodes[a.0 as usize].needs || self.nodes[b.0 as usize].needs;
        self.push(value, needs, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let value = self.value(a) - self.value(b);
        let needs = self.nodes[a.0 as usize].needs || self.nodes[b.0 as usize].needs;
        self.push(value, needs, Op::Sub(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| -v);
        let needs = self.nodes[x.0 as usize].needs;
        self.push(value, needs, Op::Neg(x))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let value = self.value(a) * self.value(b);
        let needs = self.nodes[a.0 as usize].needs || self.nodes[b.0 as usize].needs;
        self.push(value, needs, Op::Mul(a, b))
    }

    pub fn mul_col(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).ncols(), 1, "mul_col scale must be (n, 1)");
        assert_eq!(self.value(x).nrows(), self.value(s).nrows(), "mul_col rows mismatch");
        let value = self.value(x) * self.value(s);
        let needs = self.nodes[x.0 as usize].needs || self.nodes[s.0 as usize].needs;
        self.push(value, needs, Op::MulCol(x, s))
    }

    pub fn mul_row(&mut self, x: Var, m: Var) -> Var {
        assert_eq!(self.value(m).nrows(), 1, "mul_row mask must be (1, c)");
        assert_eq!(self.value(x).ncols(), self.value(m).ncols(), "mul_row width mismatch");
        let value = self.value(x) * self.value(m);
        let needs = self.nodes[x.0 as usize].needs || self.nodes[m.0 as usize].needs;
        self.push(value, needs, Op::MulRow(x, m))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).mapv(|v| v * k);
        let needs = self.nodes[x.0 as usize].needs;
        self.push(value, needs, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).mapv(|v| v + k);
        let needs = self.nodes[x.0 as usize].needs;
        self.push(value, needs, Op::AddScalar(x))
    }

    /// `softplus(beta * x) / beta`, numerically stable for large `|x|`.
    pub fn softplus(&mut self, x: Var, beta: f64) -> Var {
        let value = self.value(x).mapv(|v| softplus_stable(beta * v) / beta);
        let needs = self.nodes[x.0 as usize].needs;
        self.push(value, needs, Op::Softplus(x, beta))
    }

    pub fn sigmoid(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).mapv(|v| sigmoid_stable(k * v));
        let needs = self.nodes[x.0 as usize].needs;
        self.push(value, needs, Op::Sigmoid(x, k))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let needs = self.nodes[x.0 as usize].needs;
        self.push(value, needs, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        let needs = self.nodes[x.0 as usize].needs;
        self.push(value, needs, Op::Tanh(x))
    }

    pub fn sin_scaled(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).mapv(|v| (k * v).sin());
        let needs = self.nodes[x.0 as usize].needs;
        self.push(value, needs, Op::Sin(x, k))
    }

    pub fn cos_scaled(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).mapv(|v| (k * v).cos());
        let needs = self.nodes[x.0 as usize].needs;
        self.push(value, needs, Op::Cos(x, k))
    }

    /// Absolute value; the subgradient at 0 is taken to be 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::abs);
        let needs = self.nodes[x.0 as usize].needs;
        self.push(value, needs, Op::Abs(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| 1.0 / v);
        let needs = self.nodes[x.0 as usize].needs;
        self.push(value, needs, Op::Recip(x))
    }

    /// Row-wise L2 norm. Zero rows get gradient 0 rather than NaN.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = Array2::zeros((v.nrows(), 1));
        for (i, row) in v.rows().into_iter().enumerate() {
            out[[i, 0]] = row.dot(&row).sqrt();
        }
        let needs = self.nodes[x.0 as usize].needs;
        self.push(out, needs, Op::RowNorm(x))
    }

    /// Row-wise `x / max(|x|, eps)`; the gradient matches this floored form,
    /// so near-zero rows stay finite under differentiation.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let mut out = v.to_owned();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(eps);
            row.mapv_inplace(|e| e / n);
        }
        let needs = self.nodes[x.0 as usize].needs;
        self.push(out, needs, Op::NormalizeRows(x, eps))
    }

    pub fn dot_rows(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "dot_rows");
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Array2::zeros((va.nrows(), 1));
        for i in 0..va.nrows() {
            out[[i, 0]] = va.row(i).dot(&vb.row(i));
        }
        let needs = self.nodes[a.0 as usize].needs || self.nodes[b.0 as usize].needs;
        self.push(out, needs, Op::DotRows(a, b))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let needs = self.nodes[x.0 as usize].needs;
        self.push(value, needs, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = (v.nrows() * v.ncols()) as f64;
        let value = Array2::from_elem((1, 1), v.sum() / n);
        let needs = self.nodes[x.0 as usize].needs;
        self.push(value, needs, Op::MeanAll(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut out = Array2::zeros((rows, total));
        let mut col = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.nrows(), rows, "concat_cols row mismatch");
            out.slice_mut(ndarray::s![.., col..col + v.ncols()]).assign(v);
            col += v.ncols();
        }
        let needs = parts.iter().any(|p| self.nodes[p.0 as usize].needs);
        self.push(out, needs, Op::ConcatCols(parts.to_vec()))
    }

    /// Weighted gather of parameter rows: `out[i] = sum_j w[i, j] * p[idx[i, j]]`.
    ///
    /// `idx` is row-major `(n, k)` flattened; `w` is `(n, k)`. Indices and
    /// weights are constants (they come from the query positions), so the
    /// only gradient path is the scatter into `p`.
    pub fn gather(&mut self, p: PTensor<'a>, idx: Vec<u32>, w: Array2<f64>) -> Var {
        let (n, k) = w.dim();
        assert_eq!(idx.len(), n * k, "gather idx/w mismatch");
        let c = p.vals.ncols();
        let mut out = Array2::zeros((n, c));
        for i in 0..n {
            let mut acc = out.row_mut(i);
            for j in 0..k {
                let r = idx[i * k + j] as usize;
                let wij = w[[i, j]];
                if wij != 0.0 {
                    acc.scaled_add(wij, &p.vals.row(r));
                }
            }
        }
        self.push(out, p.live, Op::Gather { p, idx, w })
    }

    /// Reverse pass from a scalar root. Returns parameter and input
    /// gradients; frozen parameters are skipped entirely.
    pub fn backward(&mut self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be a scalar node"
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0 as usize] = Some(Array2::from_elem((1, 1), 1.0));
        let mut out = Gradients::default();

        for i in (0..n).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Split borrows: the node being visited vs. the rest of the
            // buffers we accumulate into.
            macro_rules! node_grad {
                ($v:expr, $delta:expr) => {{
                    let vi = $v.0 as usize;
                    if self.nodes[vi].needs {
                        match &mut grads[vi] {
                            Some(acc) => *acc += &$delta,
                            slot @ None => *slot = Some($delta.to_owned()),
                        }
                    }
                }};
            }
            macro_rules! param_grad {
                ($p:expr, $f:expr) => {{
                    if $p.live {
                        let acc = out
                            .params
                            .entry($p.id)
                            .or_insert_with(|| Array2::zeros($p.vals.dim()));
                        #[allow(clippy::redundant_closure_call)]
                        ($f)(acc);
                    }
                }};
            }
            macro_rules! src_grad {
                ($s:expr, $delta:expr) => {{
                    match $s {
                        Src::Node(v) => node_grad!(v, $delta),
                        Src::Param(p) => param_grad!(p, |acc: &mut Array2<f64>| *acc += &$delta),
                    }
                }};
            }

            match &self.nodes[i].op {
                Op::Const => {}
                Op::Input => {
                    out.inputs.insert(i as u32, g);
                }
                Op::ReadParam(p) => {
                    let p = *p;
                    param_grad!(p, |acc: &mut Array2<f64>| *acc += &g);
                }
                Op::ReadRow(p, row) => {
                    let (p, row) = (*p, *row);
                    param_grad!(p, |acc: &mut Array2<f64>| {
                        let mut r = acc.row_mut(row);
                        r += &g.row(0);
                    });
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(&a) {
                        let delta = g.dot(&self.src_value(&b).t());
                        src_grad!(a, delta);
                    }
                    if self.needs(&b) {
                        let delta = self.src_value(&a).t().dot(&g);
                        src_grad!(b, delta);
                    }
                }
                Op::AddRow(x, b) => {
                    let (x, b) = (*x, *b);
                    node_grad!(x, g);
                    if self.needs(&b) {
                        let delta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        src_grad!(b, delta);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    node_grad!(a, g);
                    node_grad!(b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    node_grad!(a, g);
                    let delta = g.mapv(|v| -v);
                    node_grad!(b, delta);
                }
                Op::Neg(x) => {
                    let x = *x;
                    let delta = g.mapv(|v| -v);
                    node_grad!(x, delta);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0 as usize].needs {
                        let delta = &g * self.value(b);
                        node_grad!(a, delta);
                    }
                    if self.nodes[b.0 as usize].needs {
                        let delta = &g * self.value(a);
                        node_grad!(b, delta);
                    }
                }
                Op::MulCol(x, s) => {
                    let (x, s) = (*x, *s);
                    if self.nodes[x.0 as usize].needs {
                        let delta = &g * self.value(s);
                        node_grad!(x, delta);
                    }
                    if self.nodes[s.0 as usize].needs {
                        let delta = (&g * self.value(x))
                            .sum_axis(Axis(1))
                            .insert_axis(Axis(1));
                        node_grad!(s, delta);
                    }
                }
                Op::MulRow(x, m) => {
                    let (x, m) = (*x, *m);
                    if self.nodes[x.0 as usize].needs {
                        let delta = &g * self.value(m);
                        node_grad!(x, delta);
                    }
                    if self.nodes[m.0 as usize].needs {
                        let delta = (&g * self.value(x))
                            .sum_axis(Axis(0))
                            .insert_axis(Axis(0));
                        node_grad!(m, delta);
                    }
                }
                Op::Scale(x, k) => {
                    let (x, k) = (*x, *k);
                    let delta = g.mapv(|v| v * k);
                    node_grad!(x, delta);
                }
                Op::AddScalar(x) => {
                    let x = *x;
                    node_grad!(x, g);
                }
                Op::Softplus(x, beta) => {
                    let (x, beta) = (*x, *beta);
                    let delta = ndarray::Zip::from(&g)
                        .and(self.value(x))
                        .map_collect(|&gi, &xi| gi * sigmoid_stable(beta * xi));
                    node_grad!(x, delta);
                }
                Op::Sigmoid(x, k) => {
                    let (x, k) = (*x, *k);
                    let delta = ndarray::Zip::from(&g)
                        .and(&self.nodes[i].value)
                        .map_collect(|&gi, &si| gi * k * si * (1.0 - si));
                    node_grad!(x, delta);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let delta = ndarray::Zip::from(&g)
                        .and(self.value(x))
                        .map_collect(|&gi, &xi| if xi > 0.0 { gi } else { 0.0 });
                    node_grad!(x, delta);
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let delta = ndarray::Zip::from(&g)
                        .and(&self.nodes[i].value)
                        .map_collect(|&gi, &yi| gi * (1.0 - yi * yi));
                    node_grad!(x, delta);
                }
                Op::Sin(x, k) => {
                    let (x, k) = (*x, *k);
                    let delta = ndarray::Zip::from(&g)
                        .and(self.value(x))
                        .map_collect(|&gi, &xi| gi * k * (k * xi).cos());
                    node_grad!(x, delta);
                }
                Op::Cos(x, k) => {
                    let (x, k) = (*x, *k);
                    let delta = ndarray::Zip::from(&g)
                        .and(self.value(x))
                        .map_collect(|&gi, &xi| -gi * k * (k * xi).sin());
                    node_grad!(x, delta);
                }
                Op::Abs(x) => {
                    let x = *x;
                    let delta = ndarray::Zip::from(&g)
                        .and(self.value(x))
                        .map_collect(|&gi, &xi| if xi == 0.0 { 0.0 } else { gi * xi.signum() });
                    node_grad!(x, delta);
                }
                Op::Recip(x) => {
                    let x = *x;
                    let delta = ndarray::Zip::from(&g)
                        .and(self.value(x))
                        .map_collect(|&gi, &xi| -gi / (xi * xi));
                    node_grad!(x, delta);
                }
                Op::RowNorm(x) => {
                    let x = *x;
                    let xv = self.value(x);
                    let nv = &self.nodes[i].value;
                    let mut delta = Array2::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let n = nv[[r, 0]];
                        if n > 0.0 {
                            let scale = g[[r, 0]] / n;
                            let mut drow = delta.row_mut(r);
                            drow.assign(&xv.row(r));
                            drow.mapv_inplace(|v| v * scale);
                        }
                    }
                    node_grad!(x, delta);
                }
                Op::NormalizeRows(x, eps) => {
                    let (x, eps) = (*x, *eps);
                    let xv = self.value(x);
                    let yv = &self.nodes[i].value;
                    let mut delta = Array2::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let n2 = xv.row(r).dot(&xv.row(r));
                        let n = n2.sqrt();
                        let m = n.max(eps);
                        if n >= eps {
                            // d(x/n) = (g - y * <y, g>) / n
                            let dot = yv.row(r).dot(&g.row(r));
                            for c in 0..xv.ncols() {
                                delta[[r, c]] = (g[[r, c]] - yv[[r, c]] * dot) / n;
                            }
                        } else {
                            for c in 0..xv.ncols() {
                                delta[[r, c]] = g[[r, c]] / m;
                            }
                        }
                    }
                    node_grad!(x, delta);
                }
                Op::DotRows(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0 as usize].needs {
                        let delta = self.value(b) * &g;
                        node_grad!(a, delta);
                    }
                    if self.nodes[b.0 as usize].needs {
                        let delta = self.value(a) * &g;
                        node_grad!(b, delta);
                    }
                }
                Op::SumAll(x) => {
                    let x = *x;
                    let delta = Array2::from_elem(self.value(x).dim(), g[[0, 0]]);
                    node_grad!(x, delta);
                }
                Op::MeanAll(x) => {
                    let x = *x;
                    let dim = self.value(x).dim();
                    let delta = Array2::from_elem(dim, g[[0, 0]] / (dim.0 * dim.1) as f64);
                    node_grad!(x, delta);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(p).ncols();
                        let delta = g.slice(ndarray::s![.., col..col + w]).to_owned();
                        node_grad!(p, delta);
                        col += w;
                    }
                }
                Op::Gather { p, idx, w } => {
                    let p = *p;
                    if p.live {
                        let (nr, k) = w.dim();
                        let acc = out
                            .params
                            .entry(p.id)
                            .or_insert_with(|| Array2::zeros(p.vals.dim()));
                        for r in 0..nr {
                            for j in 0..k {
                                let wij = w[[r, j]];
                                if wij != 0.0 {
                                    let tr = idx[r * k + j] as usize;
                                    let mut arow = acc.row_mut(tr);
                                    arow.scaled_add(wij, &g.row(r));
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{Group, ParamId};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;

    fn pid(slot: u8) -> ParamId {
        ParamId { group: Group::Decoder, slot }
    }

    fn rand_arr(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.5..1.5))
    }

    /// Central finite difference of `f` w.r.t. entry `(r, c)` of `param`.
    fn fd_param(
        f: &dyn Fn(&Array2<f64>) -> f64,
        param: &Array2<f64>,
        r: usize,
        c: usize,
        h: f64,
    ) -> f64 {
        let mut p = param.clone();
        p[[r, c]] += h;
        let hi = f(&p);
        p[[r, c]] -= 2.0 * h;
        let lo = f(&p);
        (hi - lo) / (2.0 * h)
    }

    /// Checks every entry of the analytic gradient of `build` w.r.t. its
    /// single input array against central differences.
    fn check_input_grad(build: &dyn Fn(&mut Tape, Var) -> Var, x0: &Array2<f64>, tol: f64) {
        let eval = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let xi = t.constant(x.clone());
            let root = build(&mut t, xi);
            t.scalar(root)
        };
        let mut t = Tape::new();
        let xi = t.input(x0.clone());
        let root = build(&mut t, xi);
        let grads = t.backward(root);
        let g = grads.input_grad(xi).expect("input grad missing");
        for r in 0..x0.nrows() {
            for c in 0..x0.ncols() {
                let fd = fd_param(&eval, x0, r, c, 1e-6);
                assert_relative_eq!(g[[r, c]], fd, epsilon = tol, max_relative = tol);
            }
        }
    }

    #[test]
    fn matmul_grads_match_fd() {
        let mut rng = crate::rng::SeedSpring::new(1).rng();
        let a0 = rand_arr(&mut rng, 3, 4);
        let b0 = rand_arr(&mut rng, 4, 2);

        // Gradient w.r.t. the parameter operand.
        let eval = |b: &Array2<f64>| {
            let mut t = Tape::new();
            let a = t.constant(a0.clone());
            let bp = PTensor::new(b, pid(0), true);
            let y = t.matmul(a, bp);
            let s = t.sum_all(y);
            t.scalar(s)
        };
        let mut t = Tape::new();
        let a = t.constant(a0.clone());
        let bp = PTensor::new(&b0, pid(0), true);
        let y = t.matmul(a, bp);
        let s = t.sum_all(y);
        let grads = t.backward(s);
        let gb = &grads.params[&pid(0)];
        for r in 0..4 {
            for c in 0..2 {
                let fd = fd_param(&eval, &b0, r, c, 1e-5);
                assert_relative_eq!(gb[[r, c]], fd, max_relative = 1e-6, epsilon = 1e-9);
            }
        }

        // Gradient w.r.t. the node operand.
        let b1 = b0.clone();
        check_input_grad(
            &move |t, x| {
                let b = t.constant(b1.clone());
                let y = t.matmul(x, b);
                t.sum_all(y)
            },
            &a0,
            1e-7,
        );
    }

    #[test]
    fn pointwise_ops_match_fd() {
        let mut rng = crate::rng::SeedSpring::new(2).rng();
        // Keep samples away from relu/abs kinks.
        let x0 = Array2::from_shape_fn((4, 3), |_| {
            let v: f64 = rng.gen_range(0.15..1.4);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        });

        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Var>)> = vec![
            ("neg", Box::new(|t, x| t.neg(x))),
            ("scale", Box::new(|t, x| t.scale(x, -1.7))),
            ("add_scalar", Box::new(|t, x| t.add_scalar(x, 0.3))),
            ("softplus", Box::new(|t, x| t.softplus(x, 100.0))),
            ("softplus1", Box::new(|t, x| t.softplus(x, 1.0))),
            ("sigmoid", Box::new(|t, x| t.sigmoid(x, 2.5))),
            ("relu", Box::new(|t, x| t.relu(x))),
            ("tanh", Box::new(|t, x| t.tanh(x))),
            ("sin", Box::new(|t, x| t.sin_scaled(x, 3.1))),
            ("cos", Box::new(|t, x| t.cos_scaled(x, 3.1))),
            ("abs", Box::new(|t, x| t.abs(x))),
            ("recip", Box::new(|t, x| t.recip(x))),
        ];
        for (name, op) in cases {
            let op = std::rc::Rc::new(op);
            let op2 = op.clone();
            check_input_grad(
                &move |t, x| {
                    let y = op2(t, x);
                    // Weight the output so per-entry gradients differ.
                    let w = t.constant(Array2::from_shape_fn((4, 3), |(r, c)| {
                        0.5 + (r * 3 + c) as f64 * 0.25
                    }));
                    let z = t.mul(y, w);
                    t.sum_all(z)
                },
                &x0,
                1e-5,
            );
            let _ = name;
        }
    }

    #[test]
    fn structural_ops_match_fd() {
        let mut rng = crate::rng::SeedSpring::new(3).rng();
        let x0 = rand_arr(&mut rng, 5, 3);

        // row_norm -> mean
        check_input_grad(
            &|t, x| {
                let n = t.row_norm(x);
                t.mean_all(n)
            },
            &x0,
            1e-6,
        );
        // normalize_rows dotted with a constant field
        let d0 = rand_arr(&mut rng, 5, 3);
        let d1 = d0.clone();
        check_input_grad(
            &move |t, x| {
                let y = t.normalize_rows(x, 1e-12);
                let d = t.constant(d1.clone());
                let dots = t.dot_rows(y, d);
                t.mean_all(dots)
            },
            &x0,
            1e-5,
        );
        // mul_col / mul_row / concat / add_row
        let s0 = rand_arr(&mut rng, 5, 1);
        let s1 = s0.clone();
        check_input_grad(
            &move |t, x| {
                let s = t.constant(s1.clone());
                let y = t.mul_col(x, s);
                t.sum_all(y)
            },
            &x0,
            1e-6,
        );
        let m0 = rand_arr(&mut rng, 1, 3);
        let m1 = m0.clone();
        check_input_grad(
            &move |t, x| {
                let m = t.constant(m1.clone());
                let y = t.mul_row(x, m);
                t.sum_all(y)
            },
            &x0,
            1e-6,
        );
        check_input_grad(
            &|t, x| {
                let y = t.concat_cols(&[x, x]);
                let n = t.row_norm(y);
                t.sum_all(n)
            },
            &x0,
            1e-6,
        );
        // dot_rows both-sides
        check_input_grad(
            &|t, x| {
                let d = t.dot_rows(x, x);
                t.mean_all(d)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn bias_grad_is_row_sum() {
        let mut rng = crate::rng::SeedSpring::new(4).rng();
        let x0 = rand_arr(&mut rng, 6, 3);
        let b0 = rand_arr(&mut rng, 1, 3);
        let mut t = Tape::new();
        let x = t.constant(x0);
        let bp = PTensor::new(&b0, pid(1), true);
        let y = t.add_row(x, bp);
        let s = t.sum_all(y);
        let grads = t.backward(s);
        let gb = &grads.params[&pid(1)];
        for c in 0..3 {
            assert_relative_eq!(gb[[0, c]], 6.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn gather_scatters_weighted_rows() {
        let table = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let idx = vec![0u32, 2, 1, 1];
        let w = array![[0.25, 0.75], [0.5, 0.5]];
        let mut t = Tape::new();
        let p = PTensor::new(&table, pid(2), true);
        let y = t.gather(p, idx, w);
        // Forward oracle.
        assert_relative_eq!(t.value(y)[[0, 0]], 0.25 * 1.0 + 0.75 * 5.0);
        assert_relative_eq!(t.value(y)[[1, 1]], 0.5 * 4.0 + 0.5 * 4.0);
        let weights = t.constant(array![[1.0, 10.0], [100.0, 1000.0]]);
        let z = t.mul(y, weights);
        let s = t.sum_all(z);
        let grads = t.backward(s);
        let gp = &grads.params[&pid(2)];
        // Row 1 receives 0.5 * (100, 1000) twice.
        assert_relative_eq!(gp[[1, 0]], 100.0);
        assert_relative_eq!(gp[[1, 1]], 1000.0);
        // Row 0 receives 0.25 * (1, 10).
        assert_relative_eq!(gp[[0, 0]], 0.25);
        assert_relative_eq!(gp[[0, 1]], 2.5);
    }

    #[test]
    fn frozen_params_get_no_gradient_entry() {
        let mut rng = crate::rng::SeedSpring::new(5).rng();
        let w0 = rand_arr(&mut rng, 3, 3);
        let x0 = rand_arr(&mut rng, 2, 3);
        let mut t = Tape::new();
        let x = t.constant(x0);
        let frozen = PTensor::new(&w0, pid(3), false);
        let y = t.matmul(x, frozen);
        let s = t.sum_all(y);
        let grads = t.backward(s);
        assert!(grads.params.is_empty());
        assert!(grads.inputs.is_empty());
    }

    #[test]
    fn sum_of_squares_gradient_is_two_p() {
        // Regularizer pattern: d(sum p^2)/dp == 2p to machine precision.
        let mut rng = crate::rng::SeedSpring::new(6).rng();
        let p0 = rand_arr(&mut rng, 7, 5);
        let mut t = Tape::new();
        let p = PTensor::new(&p0, pid(4), true);
        let node = t.read_param(p);
        let sq = t.mul(node, node);
        let s = t.sum_all(sq);
        let grads = t.backward(s);
        let gp = &grads.params[&pid(4)];
        for r in 0..7 {
            for c in 0..5 {
                assert_relative_eq!(gp[[r, c]], 2.0 * p0[[r, c]], max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn read_row_scatters_into_single_row() {
        let bank = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let mut t = Tape::new();
        let p = PTensor::new(&bank, pid(5), true);
        let row = t.read_row(p, 1);
        assert_eq!(t.value(row), &array![[3.0, 4.0]]);
        let sq = t.mul(row, row);
        let s = t.sum_all(sq);
        let grads = t.backward(s);
        let gp = &grads.params[&pid(5)];
        assert_eq!(gp.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert_relative_eq!(gp[[1, 0]], 6.0);
        assert_relative_eq!(gp[[1, 1]], 8.0);
        assert_eq!(gp.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_rows_are_safe_in_norms() {
        let x0 = array![[0.0, 0.0, 0.0], [1.0, 2.0, 2.0]];
        let mut t = Tape::new();
        let x = t.input(x0);
        let n = t.row_norm(x);
        let s = t.sum_all(n);
        let grads = t.backward(s);
        let g = grads.input_grad(x).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert_eq!(g[[0, 0]], 0.0);
        assert_relative_eq!(g[[1, 0]], 1.0 / 3.0);

        let x1 = array![[0.0, 0.0, 0.0]];
        let mut t = Tape::new();
        let x = t.input(x1);
        let y = t.normalize_rows(x, 1e-12);
        let s = t.sum_all(y);
        let grads = t.backward(s);
        assert!(grads.input_grad(x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradients_accumulate_and_scale() {
        let p0 = array![[2.0, 0.0], [0.0, 2.0]];
        let build = |live: bool| {
            let mut t = Tape::new();
            let p = PTensor::new(&p0, pid(6), live);
            let node = t.read_param(p);
            let sq = t.mul(node, node);
            let s = t.sum_all(sq);
            t.backward(s)
        };
        let mut a = build(true);
        let b = build(true);
        a.accumulate(b);
        a.scale(0.5);
        let g = &a.params[&pid(6)];
        assert_relative_eq!(g[[0, 0]], 4.0);
        assert_relative_eq!(g[[1, 1]], 4.0);
    }

    #[test]
    #[should_panic(expected = "backward root must be a scalar")]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.input(array![[1.0, 2.0]]);
        let y = t.neg(x);
        let _ = t.backward(y);
    }
}
