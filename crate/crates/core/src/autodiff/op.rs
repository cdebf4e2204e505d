//! Operation set of the differentiation engine.
//!
//! Every value in a graph is produced by one of these ops. The set is fixed:
//! arithmetic, the transcendental functions the renderer needs, batched
//! linear algebra, structural ops, the per-ray exclusive cumulative product
//! used by transmittance, and the voxel grid kernels.

use std::sync::Arc;

use crate::math::Real;
use crate::params::ParamId;

/// Row-major 2-D extent. Scalars are (1,1); a batch of 3-vectors is (n,3).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn scalar() -> Self {
        Shape { rows: 1, cols: 1 }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub enum Op<T> {
    // Leaves.
    Constant,
    Input,
    Param(ParamId),

    // Elementwise binary, equal shapes.
    Add,
    Sub,
    Mul,
    Div,
    /// Tie goes to the first argument's branch.
    Min,
    /// Tie goes to the first argument's branch.
    Max,

    // Elementwise unary.
    Neg,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Acos,
    Sigmoid,
    /// softplus(x; beta) = log(1 + exp(beta x)) / beta, numerically stable.
    Softplus(T),
    Square,
    Abs,
    PowConst(T),
    AddScalar(T),
    MulScalar(T),
    MaxScalar(T),
    MinScalar(T),

    // Batched linear algebra.
    Matmul { ta: bool, tb: bool },
    /// (p,c) + (1,c) broadcast down rows.
    AddRow,
    /// (p,c) * (p,1) broadcast across columns.
    MulCol,
    /// (p,1) -> (p,c).
    BroadcastCol(usize),
    /// (1,c) -> (p,c).
    TileRows(usize),
    /// (1,1) -> (rows,cols).
    ScalarToFull(usize, usize),
    /// (r,c) -> (r*k,c), each row repeated k times consecutively.
    RepeatRows(usize),

    // Reductions.
    SumAll,
    /// (p,c) -> (p,1), sum along each row.
    SumRow,
    /// (p,c) -> (1,c), sum down each column.
    SumDown,
    /// (r*k,c) -> (r,c), sum each consecutive group of k rows.
    SumRowGroups(usize),

    // Structure.
    Concat,
    SliceCols(usize, usize),
    Reshape(usize, usize),
    GatherRows(Arc<Vec<u32>>),
    ScatterAddRows { idx: Arc<Vec<u32>>, rows: usize },
    PadCols { start: usize, total: usize },

    /// Per-row dot product: (p,c) x (p,c) -> (p,1).
    RowDot,

    /// Exclusive cumulative product along each row.
    CumprodExcl,
    /// Reverse scan computing the adjoint of `CumprodExcl` without division.
    CumprodExclBack,

    /// Elementwise multiply by a captured constant buffer (masks, signs).
    MulConst(Arc<Vec<T>>),
    /// mask ? a : b with zero gradient through the condition.
    SelectMask(Arc<Vec<T>>),

    // Voxel grid kernels (see `voxel`).
    VoxelInterp(ParamId),
    /// Gradient of the interpolation w.r.t. the query point, chained with an
    /// upstream feature adjoint. Parents: query points, upstream (p,d).
    VoxelGrad(ParamId),
    /// Second-order contraction of `VoxelGrad` against a (p,3) adjoint.
    VoxelGradGradUp(ParamId),
    VoxelTv { grid: ParamId, nodes: Arc<Vec<[u32; 3]>> },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Min => "min",
            Op::Max => "max",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Acos => "acos",
            Op::Sigmoid => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Square => "square",
            Op::Abs => "abs",
            Op::PowConst(_) => "pow_const",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::MaxScalar(_) => "max_scalar",
            Op::MinScalar(_) => "min_scalar",
            Op::Matmul { .. } => "matmul",
            Op::AddRow => "add_row",
            Op::MulCol => "mul_col",
            Op::BroadcastCol(_) => "broadcast_col",
            Op::TileRows(_) => "tile_rows",
            Op::ScalarToFull(..) => "scalar_to_full",
            Op::RepeatRows(_) => "repeat_rows",
            Op::SumAll => "sum_all",
            Op::SumRow => "sum_row",
            Op::SumDown => "sum_down",
            Op::SumRowGroups(_) => "sum_row_groups",
            Op::Concat => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::GatherRows(_) => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::PadCols { .. } => "pad_cols",
            Op::RowDot => "row_dot",
            Op::CumprodExcl => "cumprod_excl",
            Op::CumprodExclBack => "cumprod_excl_back",
            Op::MulConst(_) => "mul_const",
            Op::SelectMask(_) => "select",
            Op::VoxelInterp(_) => "voxel_interp",
            Op::VoxelGrad(_) => "voxel_grad",
            Op::VoxelGradGradUp(_) => "voxel_grad_grad",
            Op::VoxelTv { .. } => "voxel_tv",
        }
    }
}

/// Stable softplus: max(x,0) + log1p(exp(-|beta x|)) / beta.
#[inline]
pub fn softplus<T: Real>(x: T, beta: T) -> T {
    let bx = beta * x;
    let pos = if bx > T::zero() { x } else { T::zero() };
    pos + (-bx.abs()).exp().ln_1p() / beta
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(super) fn eval_elementwise_unary<T: Real>(op: &Op<T>, a: &[T], out: &mut Vec<T>) {
    out.reserve(a.len());
    match op {
        Op::Neg => out.extend(a.iter().map(|&x| -x)),
        Op::Exp => out.extend(a.iter().map(|&x| x.exp())),
        Op::Log => out.extend(a.iter().map(|&x| x.ln())),
        Op::Sqrt => out.extend(a.iter().map(|&x| x.sqrt())),
        Op::Sin => out.extend(a.iter().map(|&x| x.sin())),
        Op::Cos => out.extend(a.iter().map(|&x| x.cos())),
        Op::Acos => out.extend(a.iter().map(|&x| x.acos())),
        Op::Sigmoid => out.extend(a.iter().map(|&x| sigmoid(x))),
        Op::Softplus(beta) => out.extend(a.iter().map(|&x| softplus(x, *beta))),
        Op::Square => out.extend(a.iter().map(|&x| x * x)),
        Op::Abs => out.extend(a.iter().map(|&x| x.abs())),
        Op::PowConst(p) => out.extend(a.iter().map(|&x| x.powf(*p))),
        Op::AddScalar(s) => out.extend(a.iter().map(|&x| x + *s)),
        Op::MulScalar(s) => out.extend(a.iter().map(|&x| x * *s)),
        Op::MaxScalar(s) => out.extend(a.iter().map(|&x| if x >= *s { x } else { *s })),
        Op::MinScalar(s) => out.extend(a.iter().map(|&x| if x <= *s { x } else { *s })),
        Op::MulConst(m) => {
            assert_eq!(m.len(), a.len(), "mul_const buffer length");
            out.extend(a.iter().zip(m.iter()).map(|(&x, &c)| x * c))
        }
        _ => unreachable!("not a unary op: {}", op.name()),
    }
}

pub(super) fn eval_elementwise_binary<T: Real>(op: &Op<T>, a: &[T], b: &[T], out: &mut Vec<T>) {
    assert_eq!(a.len(), b.len(), "binary op operand lengths");
    out.reserve(a.len());
    match op {
        Op::Add => out.extend(a.iter().zip(b).map(|(&x, &y)| x + y)),
        Op::Sub => out.extend(a.iter().zip(b).map(|(&x, &y)| x - y)),
        Op::Mul => out.extend(a.iter().zip(b).map(|(&x, &y)| x * y)),
        Op::Div => out.extend(a.iter().zip(b).map(|(&x, &y)| x / y)),
        Op::Min => out.extend(a.iter().zip(b).map(|(&x, &y)| if x <= y { x } else { y })),
        Op::Max => out.extend(a.iter().zip(b).map(|(&x, &y)| if x >= y { x } else { y })),
        _ => unreachable!("not a binary op: {}", op.name()),
    }
}

pub(super) fn eval_matmul<T: Real>(
    ta: bool,
    tb: bool,
    a: &[T],
    ash: Shape,
    b: &[T],
    bsh: Shape,
) -> (Vec<T>, Shape) {
    let (m, k) = if ta { (ash.cols, ash.rows) } else { (ash.rows, ash.cols) };
    let (k2, n) = if tb { (bsh.cols, bsh.rows) } else { (bsh.rows, bsh.cols) };
    assert_eq!(k, k2, "matmul inner dims");
    let (rsa, csa) = if ta { (1, ash.cols as isize) } else { (ash.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, bsh.cols as isize) } else { (bsh.cols as isize, 1) };
    let mut out = vec![T::zero(); m * n];
    if m > 0 && n > 0 && k > 0 {
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    (out, Shape::new(m, n))
}

pub(super) fn eval_cumprod_excl<T: Real>(a: &[T], sh: Shape) -> Vec<T> {
    let mut out = vec![T::one(); a.len()];
    for r in 0..sh.rows {
        let base = r * sh.cols;
        let mut acc = T::one();
        for j in 0..sh.cols {
            out[base + j] = acc;
            acc = acc * a[base + j];
        }
    }
    out
}

/// da[j] = out[j] * R[j], R[j] = g[j+1] + a[j+1] * R[j+1], R[n-1] = 0.
pub(super) fn eval_cumprod_excl_back<T: Real>(a: &[T], g: &[T], out: &[T], sh: Shape) -> Vec<T> {
    let mut da = vec![T::zero(); a.len()];
    for r in 0..sh.rows {
        let base = r * sh.cols;
        let mut run = T::zero();
        for j in (0..sh.cols).rev() {
            da[base + j] = out[base + j] * run;
            run = g[base + j] + a[base + j] * run;
        }
    }
    da
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!(softplus(1000.0f64, 100.0).is_finite());
        assert!(softplus(-1000.0f64, 100.0) >= 0.0);
        assert!((softplus(0.0f64, 1.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn matmul_matches_naive() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // (2,3)
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // (3,2)
        let (c, sh) = eval_matmul(false, false, &a, Shape::new(2, 3), &b, Shape::new(3, 2));
        assert_eq!(sh, Shape::new(2, 2));
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        // Aᵀ(3,2)ᵀ = (2,3) path
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0]; // (3,2) storing Aᵀ
        let (c2, _) = eval_matmul(true, false, &at, Shape::new(3, 2), &b, Shape::new(3, 2));
        assert_eq!(c2, c);
    }

    #[test]
    fn cumprod_exclusive_and_adjoint() {
        let a = [2.0f64, 3.0, 4.0];
        let out = eval_cumprod_excl(&a, Shape::new(1, 3));
        assert_eq!(out, vec![1.0, 2.0, 6.0]);
        // L = sum(g*out); check against finite differences.
        let g = [0.5f64, -1.0, 2.0];
        let da = eval_cumprod_excl_back(&a, &g, &out, Shape::new(1, 3));
        let h = 1e-6;
        for j in 0..3 {
            let mut ap = a;
            let mut am = a;
            ap[j] += h;
            am[j] -= h;
            let lp: f64 = eval_cumprod_excl(&ap, Shape::new(1, 3))
                .iter()
                .zip(&g)
                .map(|(o, gg)| o * gg)
                .sum();
            let lm: f64 = eval_cumprod_excl(&am, Shape::new(1, 3))
                .iter()
                .zip(&g)
                .map(|(o, gg)| o * gg)
                .sum();
            assert!((da[j] - (lp - lm) / (2.0 * h)).abs() < 1e-8);
        }
    }

    #[test]
    fn cumprod_adjoint_survives_zeros() {
        let a = [0.0f64, 3.0, 0.0, 2.0];
        let out = eval_cumprod_excl(&a, Shape::new(1, 4));
        assert_eq!(out, vec![1.0, 0.0, 0.0, 0.0]);
        let g = [1.0f64, 1.0, 1.0, 1.0];
        let da = eval_cumprod_excl_back(&a, &g, &out, Shape::new(1, 4));
        assert!(da.iter().all(|v| v.is_finite()));
        // d out[1] / d a[0] = 1, d out[2]/d a[0] = a[1] = 3, d out[3]/d a[0] = a[1]*a[2] = 0.
        assert_eq!(da[0], 1.0 + 3.0);
    }
}
