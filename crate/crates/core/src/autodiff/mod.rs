//! Reverse-mode differentiation over batched buffers with support for
//! differentiating through gradients (double backward).
//!
//! A [`Graph`] is an append-only tape of eagerly evaluated nodes. Calling
//! [`Graph::backward`] emits the vector-Jacobian products as *new nodes on the
//! same tape*, so a gradient is itself a differentiable value: spatial normals
//! are produced by one backward pass and the training loss built on top of
//! them is differentiated by a second pass over the extended tape.
//!
//! Tapes are confined to the worker that created them; parameter gradients
//! from parallel ray batches are reduced by summation outside the engine.

mod op;

pub use op::{sigmoid, softplus, Op, Shape};

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::EngineError;
use crate::math::{c, Real};
use crate::params::{ParamId, ParamStore};
use crate::voxel;

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    pub id: usize,
    pub shape: Shape,
}

struct Node<T> {
    op: Op<T>,
    parents: Vec<usize>,
    shape: Shape,
    value: Vec<T>,
    requires_grad: bool,
    /// 0 for forward values, k for nodes emitted by the k-th nested backward.
    order: u8,
}

/// Result of a backward pass: gradient nodes per requested variable plus
/// sparse scatter-add accumulations for voxel grid features.
#[derive(Debug)]
pub struct Gradients<T> {
    map: HashMap<usize, Var>,
    pub grid: BTreeMap<ParamId, Vec<(u32, T)>>,
}

impl<T> Gradients<T> {
    /// Gradient node of `v`, if `v` was reachable from the output.
    pub fn of(&self, v: Var) -> Option<Var> {
        self.map.get(&v.id).copied()
    }
}

pub struct Graph<'s, T: Real> {
    nodes: Vec<Node<T>>,
    store: &'s ParamStore<T>,
    leased: HashMap<ParamId, Var>,
    poison: Option<EngineError>,
    backward_depth: u8,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            nodes: Vec::new(),
            store,
            leased: HashMap::new(),
            poison: None,
            backward_depth: 0,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First numerical failure, if any op produced a non-finite value.
    pub fn health(&self) -> Result<(), EngineError> {
        match &self.poison {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.id].value
    }

    pub fn value_scalar(&self, v: Var) -> T {
        debug_assert_eq!(v.shape, Shape::scalar());
        self.nodes[v.id].value[0]
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.id].op.name()
    }

    pub fn order(&self, v: Var) -> u8 {
        self.nodes[v.id].order
    }

    // ---- leaves ----

    pub fn constant(&mut self, data: Vec<T>, shape: Shape) -> Var {
        self.push_leaf(Op::Constant, data, shape, false)
    }

    pub fn constant_scalar(&mut self, x: T) -> Var {
        self.constant(vec![x], Shape::scalar())
    }

    pub fn zeros(&mut self, shape: Shape) -> Var {
        self.constant(vec![T::zero(); shape.len()], shape)
    }

    pub fn ones(&mut self, shape: Shape) -> Var {
        self.constant(vec![T::one(); shape.len()], shape)
    }

    /// Differentiable leaf input (e.g. query positions for spatial gradients).
    pub fn input(&mut self, data: Vec<T>, shape: Shape) -> Var {
        self.push_leaf(Op::Input, data, shape, true)
    }

    /// Lease a parameter onto the tape. Repeated leases return the same node
    /// so gradient contributions accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leased.get(&id) {
            return *v;
        }
        let shape = self.store.shape(id);
        let data = self.store.data(id).to_vec();
        let v = self.push_leaf(Op::Param(id), data, shape, true);
        self.leased.insert(id, v);
        v
    }

    /// Parameters leased so far, ordered by id.
    pub fn leased_params(&self) -> Vec<(ParamId, Var)> {
        let mut v: Vec<_> = self.leased.iter().map(|(k, v)| (*k, *v)).collect();
        v.sort_by_key(|(k, _)| *k);
        v
    }

    fn push_leaf(&mut self, op: Op<T>, data: Vec<T>, shape: Shape, rg: bool) -> Var {
        assert_eq!(data.len(), shape.len(), "leaf data/shape mismatch");
        self.finish_node(op, Vec::new(), shape, data, rg)
    }

    // ---- elementwise ----

    fn binary(&mut self, op: Op<T>, a: Var, b: Var) -> Var {
        assert_eq!(a.shape, b.shape, "{}: operand shapes differ", op.name());
        self.push(op, &[a.id, b.id], a.shape)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Div, a, b)
    }
    pub fn min2(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Min, a, b)
    }
    pub fn max2(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Max, a, b)
    }

    fn unary(&mut self, op: Op<T>, a: Var) -> Var {
        self.push(op, &[a.id], a.shape)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Op::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Op::Sqrt, a)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Op::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Op::Cos, a)
    }
    pub fn acos(&mut self, a: Var) -> Var {
        self.unary(Op::Acos, a)
    }
    pub fn sigmoid_v(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid, a)
    }
    pub fn softplus_v(&mut self, a: Var, beta: f64) -> Var {
        self.unary(Op::Softplus(c(beta)), a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Op::Square, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Op::Abs, a)
    }
    pub fn powc(&mut self, a: Var, p: f64) -> Var {
        self.unary(Op::PowConst(c(p)), a)
    }
    pub fn adds(&mut self, a: Var, s: f64) -> Var {
        self.unary(Op::AddScalar(c(s)), a)
    }
    pub fn muls(&mut self, a: Var, s: f64) -> Var {
        self.unary(Op::MulScalar(c(s)), a)
    }
    pub fn maxs(&mut self, a: Var, s: f64) -> Var {
        self.unary(Op::MaxScalar(c(s)), a)
    }
    pub fn mins(&mut self, a: Var, s: f64) -> Var {
        self.unary(Op::MinScalar(c(s)), a)
    }
    pub fn mul_const(&mut self, a: Var, m: Arc<Vec<T>>) -> Var {
        assert_eq!(m.len(), a.shape.len(), "mul_const mask length");
        self.unary(Op::MulConst(m), a)
    }

    // ---- linear algebra / broadcasting ----

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (m, k) = if ta { (a.shape.cols, a.shape.rows) } else { (a.shape.rows, a.shape.cols) };
        let (k2, n) = if tb { (b.shape.cols, b.shape.rows) } else { (b.shape.rows, b.shape.cols) };
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        self.push(Op::Matmul { ta, tb }, &[a.id, b.id], Shape::new(m, n))
    }

    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        assert_eq!(r.shape.rows, 1);
        assert_eq!(r.shape.cols, a.shape.cols);
        self.push(Op::AddRow, &[a.id, r.id], a.shape)
    }

    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(s.shape.cols, 1);
        assert_eq!(s.shape.rows, a.shape.rows);
        self.push(Op::MulCol, &[a.id, s.id], a.shape)
    }

    pub fn broadcast_col(&mut self, s: Var, cols: usize) -> Var {
        assert_eq!(s.shape.cols, 1);
        self.push(Op::BroadcastCol(cols), &[s.id], Shape::new(s.shape.rows, cols))
    }

    pub fn tile_rows(&mut self, r: Var, rows: usize) -> Var {
        assert_eq!(r.shape.rows, 1);
        self.push(Op::TileRows(rows), &[r.id], Shape::new(rows, r.shape.cols))
    }

    pub fn scalar_to_full(&mut self, s: Var, shape: Shape) -> Var {
        assert_eq!(s.shape, Shape::scalar());
        self.push(Op::ScalarToFull(shape.rows, shape.cols), &[s.id], shape)
    }

    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        self.push(Op::RepeatRows(k), &[a.id], Shape::new(a.shape.rows * k, a.shape.cols))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.push(Op::SumAll, &[a.id], Shape::scalar())
    }

    pub fn sum_row(&mut self, a: Var) -> Var {
        self.push(Op::SumRow, &[a.id], Shape::new(a.shape.rows, 1))
    }

    pub fn sum_down(&mut self, a: Var) -> Var {
        self.push(Op::SumDown, &[a.id], Shape::new(1, a.shape.cols))
    }

    pub fn sum_row_groups(&mut self, a: Var, k: usize) -> Var {
        assert_eq!(a.shape.rows % k, 0, "sum_row_groups: rows not divisible");
        self.push(Op::SumRowGroups(k), &[a.id], Shape::new(a.shape.rows / k, a.shape.cols))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape.rows, b.shape.rows, "concat row counts");
        self.push(Op::Concat, &[a.id, b.id], Shape::new(a.shape.rows, a.shape.cols + b.shape.cols))
    }

    pub fn concat_all(&mut self, vars: &[Var]) -> Var {
        let mut it = vars.iter();
        let mut acc = *it.next().expect("concat_all of empty list");
        for v in it {
            acc = self.concat(acc, *v);
        }
        acc
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(start < end && end <= a.shape.cols);
        self.push(Op::SliceCols(start, end), &[a.id], Shape::new(a.shape.rows, end - start))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(a.shape.len(), rows * cols, "reshape length mismatch");
        self.push(Op::Reshape(rows, cols), &[a.id], Shape::new(rows, cols))
    }

    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        assert!(start + a.shape.cols <= total);
        self.push(Op::PadCols { start, total }, &[a.id], Shape::new(a.shape.rows, total))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<u32>>) -> Var {
        let rows = idx.len();
        self.push(Op::GatherRows(idx), &[a.id], Shape::new(rows, a.shape.cols))
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape, b.shape, "row_dot shapes");
        self.push(Op::RowDot, &[a.id, b.id], Shape::new(a.shape.rows, 1))
    }

    pub fn cumprod_excl(&mut self, a: Var) -> Var {
        self.push(Op::CumprodExcl, &[a.id], a.shape)
    }

    /// mask ? a : b. The mask is captured from values; no gradient flows
    /// through the condition.
    pub fn select(&mut self, mask: Arc<Vec<T>>, a: Var, b: Var) -> Var {
        assert_eq!(a.shape, b.shape);
        assert_eq!(mask.len(), a.shape.len());
        self.push(Op::SelectMask(mask), &[a.id, b.id], a.shape)
    }

    /// 0/1 mask of a >= b, computed from current values.
    pub fn ge_mask(&self, a: Var, b: Var) -> Arc<Vec<T>> {
        let av = self.value(a);
        let bv = self.value(b);
        Arc::new(
            av.iter()
                .zip(bv)
                .map(|(&x, &y)| if x >= y { T::one() } else { T::zero() })
                .collect(),
        )
    }

    pub fn ge_scalar_mask(&self, a: Var, s: f64) -> Arc<Vec<T>> {
        let th: T = c(s);
        Arc::new(
            self.value(a)
                .iter()
                .map(|&x| if x >= th { T::one() } else { T::zero() })
                .collect(),
        )
    }

    // ---- voxel grid ----

    pub fn voxel_interp(&mut self, grid: ParamId, x: Var) -> Var {
        assert_eq!(x.shape.cols, 3);
        let d = self.store.grid_meta(grid).channels;
        self.push(Op::VoxelInterp(grid), &[x.id], Shape::new(x.shape.rows, d))
    }

    pub fn voxel_grad(&mut self, grid: ParamId, x: Var, upstream: Var) -> Var {
        assert_eq!(x.shape.cols, 3);
        assert_eq!(upstream.shape.rows, x.shape.rows);
        assert_eq!(upstream.shape.cols, self.store.grid_meta(grid).channels);
        self.push(Op::VoxelGrad(grid), &[x.id, upstream.id], Shape::new(x.shape.rows, 3))
    }

    /// Total-variation value at the grid node each query point maps to.
    pub fn voxel_tv(&mut self, grid: ParamId, x: Var) -> Var {
        assert_eq!(x.shape.cols, 3);
        let meta = *self.store.grid_meta(grid);
        let nodes = Arc::new(voxel::tv_nodes_from_points(&meta, self.value(x)));
        let rows = x.shape.rows;
        self.push(Op::VoxelTv { grid, nodes }, &[], Shape::new(rows, 1))
    }

    // ---- composite helpers ----

    /// Row-wise v / max(‖v‖, eps).
    pub fn normalize_rows(&mut self, v: Var, eps: f64) -> Var {
        let d = self.row_dot(v, v);
        let d = self.maxs(d, eps * eps);
        let n = self.sqrt(d);
        let n3 = self.broadcast_col(n, v.shape.cols);
        self.div(v, n3)
    }

    /// Row-wise Euclidean norm with a guarded sqrt: sqrt(max(‖v‖², eps²)).
    pub fn row_norm(&mut self, v: Var, eps: f64) -> Var {
        let d = self.row_dot(v, v);
        let d = self.maxs(d, eps * eps);
        self.sqrt(d)
    }

    // ---- evaluation ----

    fn push(&mut self, op: Op<T>, parents: &[usize], shape: Shape) -> Var {
        if self.poison.is_some() {
            // Graph already failed: keep shapes consistent, skip the math.
            return self.finish_node(op, parents.to_vec(), shape, vec![T::zero(); shape.len()], false);
        }
        let rg = match &op {
            Op::Constant => false,
            Op::Input | Op::Param(_) => true,
            Op::VoxelInterp(_) | Op::VoxelGrad(_) | Op::VoxelGradGradUp(_) | Op::VoxelTv { .. } => {
                true
            }
            _ => parents.iter().any(|&p| self.nodes[p].requires_grad),
        };
        let value = self.eval(&op, parents, shape);
        self.finish_node(op, parents.to_vec(), shape, value, rg)
    }

    fn eval(&self, op: &Op<T>, parents: &[usize], shape: Shape) -> Vec<T> {
        let pv = |i: usize| -> &[T] { &self.nodes[parents[i]].value };
        let psh = |i: usize| -> Shape { self.nodes[parents[i]].shape };
        let mut out = Vec::new();
        match op {
            Op::Constant | Op::Input | Op::Param(_) => unreachable!("leaves use push_leaf"),
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Min | Op::Max => {
                op::eval_elementwise_binary(op, pv(0), pv(1), &mut out)
            }
            Op::Neg
            | Op::Exp
            | Op::Log
            | Op::Sqrt
            | Op::Sin
            | Op::Cos
            | Op::Acos
            | Op::Sigmoid
            | Op::Softplus(_)
            | Op::Square
            | Op::Abs
            | Op::PowConst(_)
            | Op::AddScalar(_)
            | Op::MulScalar(_)
            | Op::MaxScalar(_)
            | Op::MinScalar(_)
            | Op::MulConst(_) => op::eval_elementwise_unary(op, pv(0), &mut out),
            Op::Matmul { ta, tb } => {
                let (v, sh) = op::eval_matmul(*ta, *tb, pv(0), psh(0), pv(1), psh(1));
                assert_eq!(sh, shape);
                out = v;
            }
            Op::AddRow => {
                let (a, r, cols) = (pv(0), pv(1), shape.cols);
                out = a
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x + r[i % cols])
                    .collect();
            }
            Op::MulCol => {
                let (a, s, cols) = (pv(0), pv(1), shape.cols);
                out = a
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x * s[i / cols])
                    .collect();
            }
            Op::BroadcastCol(cols) => {
                let s = pv(0);
                out.reserve(s.len() * cols);
                for &x in s {
                    for _ in 0..*cols {
                        out.push(x);
                    }
                }
            }
            Op::TileRows(rows) => {
                let r = pv(0);
                out.reserve(r.len() * rows);
                for _ in 0..*rows {
                    out.extend_from_slice(r);
                }
            }
            Op::ScalarToFull(rows, cols) => {
                out = vec![pv(0)[0]; rows * cols];
            }
            Op::RepeatRows(k) => {
                let a = pv(0);
                let cols = psh(0).cols;
                out.reserve(a.len() * k);
                for row in a.chunks(cols.max(1)) {
                    for _ in 0..*k {
                        out.extend_from_slice(row);
                    }
                }
            }
            Op::SumAll => {
                let mut acc = T::zero();
                for &x in pv(0) {
                    acc += x;
                }
                out = vec![acc];
            }
            Op::SumRow => {
                let a = pv(0);
                let cols = psh(0).cols;
                out.reserve(psh(0).rows);
                for row in a.chunks(cols.max(1)) {
                    let mut acc = T::zero();
                    for &x in row {
                        acc += x;
                    }
                    out.push(acc);
                }
            }
            Op::SumDown => {
                let a = pv(0);
                let cols = psh(0).cols;
                out = vec![T::zero(); cols];
                for row in a.chunks(cols.max(1)) {
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
            }
            Op::SumRowGroups(k) => {
                let a = pv(0);
                let cols = psh(0).cols;
                out = vec![T::zero(); shape.len()];
                for (gi, group) in a.chunks(cols * k).enumerate() {
                    let dst = &mut out[gi * cols..(gi + 1) * cols];
                    for row in group.chunks(cols) {
                        for (o, &x) in dst.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Concat => {
                let (a, b) = (pv(0), pv(1));
                let (ca, cb) = (psh(0).cols, psh(1).cols);
                out.reserve(a.len() + b.len());
                for r in 0..shape.rows {
                    out.extend_from_slice(&a[r * ca..(r + 1) * ca]);
                    out.extend_from_slice(&b[r * cb..(r + 1) * cb]);
                }
            }
            Op::SliceCols(s, e) => {
                let a = pv(0);
                let ca = psh(0).cols;
                out.reserve(shape.len());
                for r in 0..shape.rows {
                    out.extend_from_slice(&a[r * ca + s..r * ca + e]);
                }
            }
            Op::Reshape(..) => {
                out = pv(0).to_vec();
            }
            Op::GatherRows(idx) => {
                let a = pv(0);
                let cols = psh(0).cols;
                out.reserve(idx.len() * cols);
                for &i in idx.iter() {
                    out.extend_from_slice(&a[i as usize * cols..(i as usize + 1) * cols]);
                }
            }
            Op::ScatterAddRows { idx, rows } => {
                let g = pv(0);
                let cols = psh(0).cols;
                out = vec![T::zero(); rows * cols];
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut out[i as usize * cols..(i as usize + 1) * cols];
                    for (o, &x) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *o += x;
                    }
                }
            }
            Op::PadCols { start, total } => {
                let a = pv(0);
                let ca = psh(0).cols;
                out = vec![T::zero(); shape.rows * total];
                for r in 0..shape.rows {
                    out[r * total + start..r * total + start + ca]
                        .copy_from_slice(&a[r * ca..(r + 1) * ca]);
                }
            }
            Op::RowDot => {
                let (a, b) = (pv(0), pv(1));
                let cols = psh(0).cols;
                out.reserve(shape.rows);
                for r in 0..shape.rows {
                    let mut acc = T::zero();
                    for i in 0..cols {
                        acc += a[r * cols + i] * b[r * cols + i];
                    }
                    out.push(acc);
                }
            }
            Op::CumprodExcl => {
                out = op::eval_cumprod_excl(pv(0), psh(0));
            }
            Op::CumprodExclBack => {
                out = op::eval_cumprod_excl_back(pv(0), pv(1), pv(2), psh(0));
            }
            Op::SelectMask(mask) => {
                let (a, b) = (pv(0), pv(1));
                out.reserve(a.len());
                for i in 0..a.len() {
                    out.push(if mask[i] > T::zero() { a[i] } else { b[i] });
                }
            }
            Op::VoxelInterp(grid) => {
                let meta = self.store.grid_meta(*grid);
                out = voxel::interp_forward(meta, self.store.data(*grid), pv(0));
            }
            Op::VoxelGrad(grid) => {
                let meta = self.store.grid_meta(*grid);
                out = voxel::grad_query(meta, self.store.data(*grid), pv(0), pv(1));
            }
            Op::VoxelGradGradUp(grid) => {
                let meta = self.store.grid_meta(*grid);
                out = voxel::grad_grad_upstream(meta, self.store.data(*grid), pv(0), pv(1));
            }
            Op::VoxelTv { grid, nodes } => {
                let meta = self.store.grid_meta(*grid);
                out = voxel::tv_forward(meta, self.store.data(*grid), nodes);
            }
        }
        assert_eq!(out.len(), shape.len(), "{}: output length", op.name());
        out
    }

    fn finish_node(
        &mut self,
        op: Op<T>,
        parents: Vec<usize>,
        shape: Shape,
        value: Vec<T>,
        rg: bool,
    ) -> Var {
        let id = self.nodes.len();
        if self.poison.is_none() {
            if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
                let _ = bad;
                self.poison = Some(EngineError::NonFinite {
                    node: id,
                    op: op.name(),
                    order: self.backward_depth,
                });
            }
        }
        self.nodes.push(Node {
            op,
            parents,
            shape,
            value,
            requires_grad: rg,
            order: self.backward_depth,
        });
        Var { id, shape }
    }

    // ---- backward ----

    /// Reverse sweep from `out`, emitting gradients as graph nodes.
    ///
    /// The seed is all-ones, so for a column output of independent rows the
    /// result is the per-row gradient (the batched-Jacobian convention used
    /// throughout the renderer). `wrt_grids` additionally accumulates sparse
    /// voxel-feature gradients.
    pub fn backward(
        &mut self,
        out: Var,
        wrt: &[Var],
        wrt_grids: bool,
    ) -> Result<Gradients<T>, EngineError> {
        self.health()?;
        let n0 = self.nodes.len();

        // A node participates if gradient can flow from it into the wrt set
        // (or into a voxel grid when requested).
        let mut reach = vec![false; n0];
        for w in wrt {
            reach[w.id] = true;
        }
        for i in 0..n0 {
            if reach[i] {
                continue;
            }
            let grid_sink = wrt_grids
                && matches!(
                    self.nodes[i].op,
                    Op::VoxelInterp(_) | Op::VoxelGrad(_) | Op::VoxelTv { .. }
                );
            reach[i] = grid_sink
                || (self.nodes[i].requires_grad
                    && self.nodes[i].parents.iter().any(|&p| reach[p]));
        }

        self.backward_depth += 1;
        let mut adj: Vec<Option<Var>> = vec![None; n0];
        adj[out.id] = Some(self.ones(out.shape));
        let mut grid: BTreeMap<ParamId, Vec<(u32, T)>> = BTreeMap::new();

        for id in (0..=out.id).rev() {
            let Some(g) = adj[id] else { continue };
            if id != out.id && !reach[id] {
                continue;
            }
            self.emit_vjp(id, g, &mut adj, &reach, wrt_grids, &mut grid)?;
        }
        self.backward_depth -= 1;
        self.health()?;

        let mut map = HashMap::new();
        for w in wrt {
            let gv = match adj[w.id] {
                Some(v) => v,
                None => self.zeros(w.shape),
            };
            map.insert(w.id, gv);
        }
        Ok(Gradients { map, grid })
    }

    fn acc(
        &mut self,
        adj: &mut [Option<Var>],
        reach: &[bool],
        parent: usize,
        contrib: Var,
    ) {
        if !reach[parent] {
            return;
        }
        adj[parent] = Some(match adj[parent] {
            Some(prev) => self.add(prev, contrib),
            None => contrib,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn emit_vjp(
        &mut self,
        id: usize,
        g: Var,
        adj: &mut Vec<Option<Var>>,
        reach: &[bool],
        wrt_grids: bool,
        grid_out: &mut BTreeMap<ParamId, Vec<(u32, T)>>,
    ) -> Result<(), EngineError> {
        let op = self.nodes[id].op.clone();
        let parents = self.nodes[id].parents.clone();
        let this = Var { id, shape: self.nodes[id].shape };
        let pvar = |i: usize| -> Var {
            Var { id: parents[i], shape: self.nodes[parents[i]].shape }
        };
        match op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::Add => {
                self.acc(adj, reach, parents[0], g);
                self.acc(adj, reach, parents[1], g);
            }
            Op::Sub => {
                self.acc(adj, reach, parents[0], g);
                let n = self.neg(g);
                self.acc(adj, reach, parents[1], n);
            }
            Op::Mul => {
                let (a, b) = (pvar(0), pvar(1));
                let da = self.mul(g, b);
                self.acc(adj, reach, parents[0], da);
                let db = self.mul(g, a);
                self.acc(adj, reach, parents[1], db);
            }
            Op::Div => {
                let (_, b) = (pvar(0), pvar(1));
                let da = self.div(g, b);
                self.acc(adj, reach, parents[0], da);
                let q = self.div(this, b);
                let gq = self.mul(g, q);
                let db = self.neg(gq);
                self.acc(adj, reach, parents[1], db);
            }
            Op::Min | Op::Max => {
                let take_first = {
                    let a = self.value(pvar(0));
                    let b = self.value(pvar(1));
                    let is_max = matches!(op, Op::Max);
                    let m: Vec<T> = a
                        .iter()
                        .zip(b)
                        .map(|(&x, &y)| {
                            let first = if is_max { x >= y } else { x <= y };
                            if first {
                                T::one()
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    Arc::new(m)
                };
                let complement: Arc<Vec<T>> =
                    Arc::new(take_first.iter().map(|&m| T::one() - m).collect());
                let da = self.mul_const(g, take_first);
                self.acc(adj, reach, parents[0], da);
                let db = self.mul_const(g, complement);
                self.acc(adj, reach, parents[1], db);
            }
            Op::Neg => {
                let d = self.neg(g);
                self.acc(adj, reach, parents[0], d);
            }
            Op::Exp => {
                let d = self.mul(g, this);
                self.acc(adj, reach, parents[0], d);
            }
            Op::Log => {
                let d = self.div(g, pvar(0));
                self.acc(adj, reach, parents[0], d);
            }
            Op::Sqrt => {
                let q = self.div(g, this);
                let d = self.muls(q, 0.5);
                self.acc(adj, reach, parents[0], d);
            }
            Op::Sin => {
                let cs = self.cos(pvar(0));
                let d = self.mul(g, cs);
                self.acc(adj, reach, parents[0], d);
            }
            Op::Cos => {
                let sn = self.sin(pvar(0));
                let gs = self.mul(g, sn);
                let d = self.neg(gs);
                self.acc(adj, reach, parents[0], d);
            }
            Op::Acos => {
                let sq = self.square(pvar(0));
                let ns = self.neg(sq);
                let om = self.adds(ns, 1.0);
                let rt = self.sqrt(om);
                let q = self.div(g, rt);
                let d = self.neg(q);
                self.acc(adj, reach, parents[0], d);
            }
            Op::Sigmoid => {
                let ny = self.neg(this);
                let om = self.adds(ny, 1.0);
                let yy = self.mul(this, om);
                let d = self.mul(g, yy);
                self.acc(adj, reach, parents[0], d);
            }
            Op::Softplus(beta) => {
                let bx = self.muls(pvar(0), beta.to_f64().unwrap());
                let s = self.sigmoid_v(bx);
                let d = self.mul(g, s);
                self.acc(adj, reach, parents[0], d);
            }
            Op::Square => {
                let two_x = self.muls(pvar(0), 2.0);
                let d = self.mul(g, two_x);
                self.acc(adj, reach, parents[0], d);
            }
            Op::Abs => {
                let sign: Arc<Vec<T>> = Arc::new(
                    self.value(pvar(0))
                        .iter()
                        .map(|&x| {
                            if x > T::zero() {
                                T::one()
                            } else if x < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
                let d = self.mul_const(g, sign);
                self.acc(adj, reach, parents[0], d);
            }
            Op::PowConst(p) => {
                let pf = p.to_f64().unwrap();
                let xm = self.powc(pvar(0), pf - 1.0);
                let gx = self.mul(g, xm);
                let d = self.muls(gx, pf);
                self.acc(adj, reach, parents[0], d);
            }
            Op::AddScalar(_) => self.acc(adj, reach, parents[0], g),
            Op::MulScalar(s) => {
                let d = self.muls(g, s.to_f64().unwrap());
                self.acc(adj, reach, parents[0], d);
            }
            Op::MaxScalar(s) => {
                let mask = self.ge_scalar_mask(pvar(0), s.to_f64().unwrap());
                let d = self.mul_const(g, mask);
                self.acc(adj, reach, parents[0], d);
            }
            Op::MinScalar(s) => {
                let th: T = s;
                let mask: Arc<Vec<T>> = Arc::new(
                    self.value(pvar(0))
                        .iter()
                        .map(|&x| if x <= th { T::one() } else { T::zero() })
                        .collect(),
                );
                let d = self.mul_const(g, mask);
                self.acc(adj, reach, parents[0], d);
            }
            Op::Matmul { ta, tb } => {
                let (a, b) = (pvar(0), pvar(1));
                let (da, db) = match (ta, tb) {
                    (false, false) => {
                        (self.matmul(g, b, false, true), self.matmul(a, g, true, false))
                    }
                    (true, false) => {
                        (self.matmul(b, g, false, true), self.matmul(a, g, false, false))
                    }
                    (false, true) => {
                        (self.matmul(g, b, false, false), self.matmul(g, a, true, false))
                    }
                    (true, true) => {
                        (self.matmul(b, g, true, true), self.matmul(g, a, true, true))
                    }
                };
                self.acc(adj, reach, parents[0], da);
                self.acc(adj, reach, parents[1], db);
            }
            Op::AddRow => {
                self.acc(adj, reach, parents[0], g);
                let dr = self.sum_down(g);
                self.acc(adj, reach, parents[1], dr);
            }
            Op::MulCol => {
                let (a, s) = (pvar(0), pvar(1));
                let da = self.mul_col(g, s);
                self.acc(adj, reach, parents[0], da);
                let ga = self.mul(g, a);
                let ds = self.sum_row(ga);
                self.acc(adj, reach, parents[1], ds);
            }
            Op::BroadcastCol(_) => {
                let d = self.sum_row(g);
                self.acc(adj, reach, parents[0], d);
            }
            Op::TileRows(_) => {
                let d = self.sum_down(g);
                self.acc(adj, reach, parents[0], d);
            }
            Op::ScalarToFull(..) => {
                let d = self.sum_all(g);
                self.acc(adj, reach, parents[0], d);
            }
            Op::RepeatRows(k) => {
                let d = self.sum_row_groups(g, k);
                self.acc(adj, reach, parents[0], d);
            }
            Op::SumAll => {
                let d = self.scalar_to_full(g, pvar(0).shape);
                self.acc(adj, reach, parents[0], d);
            }
            Op::SumRow => {
                let d = self.broadcast_col(g, pvar(0).shape.cols);
                self.acc(adj, reach, parents[0], d);
            }
            Op::SumDown => {
                let d = self.tile_rows(g, pvar(0).shape.rows);
                self.acc(adj, reach, parents[0], d);
            }
            Op::SumRowGroups(k) => {
                let d = self.repeat_rows(g, k);
                self.acc(adj, reach, parents[0], d);
            }
            Op::Concat => {
                let ca = pvar(0).shape.cols;
                let cb = pvar(1).shape.cols;
                let da = self.slice_cols(g, 0, ca);
                self.acc(adj, reach, parents[0], da);
                let db = self.slice_cols(g, ca, ca + cb);
                self.acc(adj, reach, parents[1], db);
            }
            Op::SliceCols(s, _) => {
                let total = pvar(0).shape.cols;
                let d = self.pad_cols(g, s, total);
                self.acc(adj, reach, parents[0], d);
            }
            Op::PadCols { start, .. } => {
                let w = pvar(0).shape.cols;
                let d = self.slice_cols(g, start, start + w);
                self.acc(adj, reach, parents[0], d);
            }
            Op::Reshape(..) => {
                let psh = pvar(0).shape;
                let d = self.reshape(g, psh.rows, psh.cols);
                self.acc(adj, reach, parents[0], d);
            }
            Op::GatherRows(idx) => {
                let rows = pvar(0).shape.rows;
                let d = self.push(
                    Op::ScatterAddRows { idx, rows },
                    &[g.id],
                    Shape::new(rows, g.shape.cols),
                );
                self.acc(adj, reach, parents[0], d);
            }
            Op::ScatterAddRows { idx, .. } => {
                let d = self.gather_rows(g, idx);
                self.acc(adj, reach, parents[0], d);
            }
            Op::RowDot => {
                let (a, b) = (pvar(0), pvar(1));
                let da = self.mul_col(b, g);
                self.acc(adj, reach, parents[0], da);
                let db = self.mul_col(a, g);
                self.acc(adj, reach, parents[1], db);
            }
            Op::CumprodExcl => {
                let a = pvar(0);
                let d = self.push(Op::CumprodExclBack, &[a.id, g.id, this.id], a.shape);
                self.acc(adj, reach, parents[0], d);
            }
            Op::CumprodExclBack | Op::VoxelGradGradUp(_) => {
                return Err(EngineError::NotDifferentiable { op: op.name() });
            }
            Op::MulConst(m) => {
                let d = self.mul_const(g, m);
                self.acc(adj, reach, parents[0], d);
            }
            Op::SelectMask(m) => {
                let complement: Arc<Vec<T>> = Arc::new(m.iter().map(|&x| T::one() - x).collect());
                let da = self.mul_const(g, m);
                self.acc(adj, reach, parents[0], da);
                let db = self.mul_const(g, complement);
                self.acc(adj, reach, parents[1], db);
            }
            Op::VoxelInterp(grid) => {
                if wrt_grids {
                    let meta = *self.store.grid_meta(grid);
                    let xs = self.value(pvar(0)).to_vec();
                    let gv = self.value(g).to_vec();
                    voxel::interp_scatter(&meta, &xs, &gv, grid_out.entry(grid).or_default());
                }
                if reach[parents[0]] {
                    let x = pvar(0);
                    let d = self.voxel_grad(grid, x, g);
                    self.acc(adj, reach, parents[0], d);
                }
            }
            Op::VoxelGrad(grid) => {
                // Two second-order cases only: w.r.t. the upstream feature
                // adjoint and w.r.t. the grid features. The query point is a
                // lookup coordinate; no gradient is propagated to it here.
                if wrt_grids {
                    let meta = *self.store.grid_meta(grid);
                    let xs = self.value(pvar(0)).to_vec();
                    let g1 = self.value(pvar(1)).to_vec();
                    let gg = self.value(g).to_vec();
                    voxel::grad_grad_scatter(
                        &meta,
                        &xs,
                        &g1,
                        &gg,
                        grid_out.entry(grid).or_default(),
                    );
                }
                if reach[parents[1]] {
                    let x = pvar(0);
                    let d = self.push(
                        Op::VoxelGradGradUp(grid),
                        &[x.id, g.id],
                        pvar(1).shape,
                    );
                    self.acc(adj, reach, parents[1], d);
                }
            }
            Op::VoxelTv { grid, nodes } => {
                if wrt_grids {
                    let meta = *self.store.grid_meta(grid);
                    let gv = self.value(g).to_vec();
                    let tv = self.value(this).to_vec();
                    voxel::tv_scatter(
                        &meta,
                        self.store.data(grid),
                        &nodes,
                        &gv,
                        &tv,
                        grid_out.entry(grid).or_default(),
                    );
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn empty_store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn square_gradient() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.input(vec![3.0], Shape::scalar());
        let y = g.square(x);
        let grads = g.backward(y, &[x], false).unwrap();
        assert_eq!(g.value(grads.of(x).unwrap()), &[6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.input(vec![0.0], Shape::scalar());
        let y = g.sigmoid_v(x);
        let grads = g.backward(y, &[x], false).unwrap();
        assert!((g.value(grads.of(x).unwrap())[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn product_and_mixed_second_order() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.input(vec![2.0], Shape::scalar());
        let y = g.input(vec![5.0], Shape::scalar());
        let f = g.mul(x, y);
        let first = g.backward(f, &[x, y], false).unwrap();
        let dfdx = first.of(x).unwrap();
        let dfdy = first.of(y).unwrap();
        assert_eq!(g.value(dfdx), &[5.0]);
        assert_eq!(g.value(dfdy), &[2.0]);
        // Differentiate the recorded gradient node again: d/dy (df/dx) = 1.
        let second = g.backward(dfdx, &[y], false).unwrap();
        assert_eq!(g.value(second.of(y).unwrap()), &[1.0]);
    }

    #[test]
    fn unreachable_gradient_is_exactly_zero() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.input(vec![1.5], Shape::scalar());
        let z = g.input(vec![-0.5], Shape::scalar());
        let y = g.exp(x);
        let grads = g.backward(y, &[z], false).unwrap();
        assert_eq!(g.value(grads.of(z).unwrap()), &[0.0]);
    }

    #[test]
    fn deterministic_replay() {
        let store = empty_store();
        let run = || {
            let mut g = Graph::new(&store);
            let x = g.input(vec![0.3, -0.7, 1.1], Shape::new(3, 1));
            let e = g.exp(x);
            let s = g.sin(x);
            let y0 = g.mul(e, s);
            let y = g.sum_all(y0);
            let grads = g.backward(y, &[x], false).unwrap();
            g.value(grads.of(x).unwrap()).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_value_is_reported_with_node() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.input(vec![-1.0], Shape::scalar());
        let y = g.log(x); // NaN
        let err = g.backward(y, &[x], false).unwrap_err();
        match err {
            EngineError::NonFinite { op, .. } => assert_eq!(op, "log"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn param_lease_is_deduplicated() {
        let mut store = empty_store();
        let pid = store.register("w", ParamKind::Weight, Shape::scalar(), vec![2.0]);
        let mut g = Graph::new(&store);
        let w1 = g.param(pid);
        let w2 = g.param(pid);
        assert_eq!(w1.id, w2.id);
        let a = g.square(w1);
        let b = g.muls(w2, 3.0);
        let y0 = g.add(a, b);
        let y = g.sum_all(y0);
        let grads = g.backward(y, &[w1], false).unwrap();
        // d(w² + 3w)/dw = 2w + 3 = 7.
        assert_eq!(g.value(grads.of(w1).unwrap()), &[7.0]);
    }

    #[test]
    fn matmul_gradients_match_fd() {
        let store = empty_store();
        let a0 = vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75];
        let b0 = vec![1.0, 0.5, -0.25, 2.0, 0.75, -1.5];
        let eval = |a: &[f64], b: &[f64]| -> f64 {
            let mut g = Graph::new(&store);
            let av = g.input(a.to_vec(), Shape::new(2, 3));
            let bv = g.input(b.to_vec(), Shape::new(3, 2));
            let c0 = g.matmul(av, bv, false, false);
            let c1 = g.square(c0);
            let y = g.sum_all(c1);
            g.value_scalar(y)
        };
        let mut g = Graph::new(&store);
        let av = g.input(a0.clone(), Shape::new(2, 3));
        let bv = g.input(b0.clone(), Shape::new(3, 2));
        let c0 = g.matmul(av, bv, false, false);
        let c1 = g.square(c0);
        let y = g.sum_all(c1);
        let grads = g.backward(y, &[av, bv], false).unwrap();
        let da = g.value(grads.of(av).unwrap()).to_vec();
        let db = g.value(grads.of(bv).unwrap()).to_vec();
        let h = 1e-6;
        for i in 0..6 {
            let mut ap = a0.clone();
            let mut am = a0.clone();
            ap[i] += h;
            am[i] -= h;
            let fd = (eval(&ap, &b0) - eval(&am, &b0)) / (2.0 * h);
            assert!((da[i] - fd).abs() < 1e-6, "dA[{i}] {} vs {fd}", da[i]);
            let mut bp = b0.clone();
            let mut bm = b0.clone();
            bp[i] += h;
            bm[i] -= h;
            let fd = (eval(&a0, &bp) - eval(&a0, &bm)) / (2.0 * h);
            assert!((db[i] - fd).abs() < 1e-6, "dB[{i}] {} vs {fd}", db[i]);
        }
    }

    #[test]
    fn spatial_gradient_of_sphere_distance() {
        // f(x) = ‖x‖ − 0.5 at (1,0,0) has gradient (1,0,0).
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.input(vec![1.0, 0.0, 0.0], Shape::new(1, 3));
        let n = g.row_norm(x, 1e-16);
        let f = g.adds(n, -0.5);
        let grads = g.backward(f, &[x], false).unwrap();
        let got = g.value(grads.of(x).unwrap());
        assert!((got[0] - 1.0).abs() < 1e-12 && got[1].abs() < 1e-12 && got[2].abs() < 1e-12);
    }

    #[test]
    fn linear_field_gradient_is_the_coefficients() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let a = g.constant(vec![0.3, -1.2, 2.5], Shape::new(1, 3));
        let x = g.input(vec![0.7, 0.1, -0.4], Shape::new(1, 3));
        let f = g.row_dot(a, x);
        let grads = g.backward(f, &[x], false).unwrap();
        assert_eq!(g.value(grads.of(x).unwrap()), &[0.3, -1.2, 2.5]);
    }

    #[test]
    fn select_blocks_gradient_through_condition() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let a = g.input(vec![2.0, -1.0], Shape::new(2, 1));
        let b = g.input(vec![10.0, 20.0], Shape::new(2, 1));
        let mask = g.ge_scalar_mask(a, 0.0);
        let s0 = g.select(mask, a, b);
        let s = g.sum_all(s0);
        let grads = g.backward(s, &[a, b], false).unwrap();
        assert_eq!(g.value(grads.of(a).unwrap()), &[1.0, 0.0]);
        assert_eq!(g.value(grads.of(b).unwrap()), &[0.0, 1.0]);
    }

    #[test]
    fn batched_rows_stay_independent() {
        // Seeding ones over a (P,1) output yields per-row gradients.
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.input(vec![0.2, 0.4, 0.8], Shape::new(3, 1));
        let y = g.square(x);
        let grads = g.backward(y, &[x], false).unwrap();
        assert_eq!(g.value(grads.of(x).unwrap()), &[0.4, 0.8, 1.6]);
    }
}
