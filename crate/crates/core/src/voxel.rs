//! Dense voxel grid feature: trilinear forward, first-order and second-order
//! kernels, and the symmetric total-variation term.
//!
//! All kernels share one cell convention: a query point belongs to cell
//! `floor(x̄)` with weights computed from `frac(x̄)`; queries outside the
//! bounds clamp to the boundary cell. Gradients w.r.t. the grid features are
//! emitted as sparse scatter-adds into the eight corner slots.

use crate::math::{c, Real};
use crate::params::GridMeta;

/// Guard inside the square root of the total-variation term.
pub const TV_EPS: f64 = 1e-12;

/// World point to grid coordinates: x̄ = s · (x − m).
pub fn to_grid_coords<T: Real>(meta: &GridMeta, p: [T; 3]) -> [T; 3] {
    let s = meta.scale::<T>();
    let mut out = [T::zero(); 3];
    for a in 0..3 {
        out[a] = s[a] * (p[a] - c(meta.bounds_min[a]));
    }
    out
}

/// Cell lookup for one query point.
#[derive(Clone, Copy, Debug)]
pub struct Cell<T> {
    pub base: [usize; 3],
    pub frac: [T; 3],
}

pub fn locate<T: Real>(meta: &GridMeta, p: [T; 3]) -> Cell<T> {
    let xb = to_grid_coords(meta, p);
    let mut base = [0usize; 3];
    let mut frac = [T::zero(); 3];
    for a in 0..3 {
        let hi = (meta.dims[a] - 2) as f64;
        let fl = xb[a].floor().to_f64().unwrap_or(0.0).clamp(0.0, hi);
        base[a] = fl as usize;
        let f = xb[a] - c(fl);
        frac[a] = f.max(T::zero()).min(T::one());
    }
    Cell { base, frac }
}

/// Corner order: bit 0 = x offset, bit 1 = y offset, bit 2 = z offset.
#[inline]
pub fn corner_weights<T: Real>(frac: &[T; 3]) -> [T; 8] {
    let one = T::one();
    let wx = [one - frac[0], frac[0]];
    let wy = [one - frac[1], frac[1]];
    let wz = [one - frac[2], frac[2]];
    let mut w = [T::zero(); 8];
    for (corner, slot) in w.iter_mut().enumerate() {
        *slot = wx[corner & 1] * wy[(corner >> 1) & 1] * wz[(corner >> 2) & 1];
    }
    w
}

/// ∂w/∂x̄ for each corner and axis.
#[inline]
pub fn corner_weight_grads<T: Real>(frac: &[T; 3]) -> [[T; 3]; 8] {
    let one = T::one();
    let wx = [one - frac[0], frac[0]];
    let wy = [one - frac[1], frac[1]];
    let wz = [one - frac[2], frac[2]];
    let sign = |bit: usize| if bit == 1 { one } else { -one };
    let mut g = [[T::zero(); 3]; 8];
    for (corner, slot) in g.iter_mut().enumerate() {
        let (bx, by, bz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        slot[0] = sign(bx) * wy[by] * wz[bz];
        slot[1] = sign(by) * wx[bx] * wz[bz];
        slot[2] = sign(bz) * wx[bx] * wy[by];
    }
    g
}

#[inline]
pub fn node_index(meta: &GridMeta, i: usize, j: usize, k: usize) -> usize {
    (i * meta.dims[1] + j) * meta.dims[2] + k
}

#[inline]
fn corner_node(meta: &GridMeta, cell: &Cell<impl Real>, corner: usize) -> usize {
    node_index(
        meta,
        cell.base[0] + (corner & 1),
        cell.base[1] + ((corner >> 1) & 1),
        cell.base[2] + ((corner >> 2) & 1),
    )
}

/// Trilinear interpolation of the feature vector at each query point.
pub fn interp_forward<T: Real>(meta: &GridMeta, f: &[T], xs: &[T]) -> Vec<T> {
    let d = meta.channels;
    let n = xs.len() / 3;
    let mut out = vec![T::zero(); n * d];
    for q in 0..n {
        let cell = locate(meta, [xs[3 * q], xs[3 * q + 1], xs[3 * q + 2]]);
        let w = corner_weights(&cell.frac);
        let dst = &mut out[q * d..(q + 1) * d];
        for corner in 0..8 {
            let src = corner_node(meta, &cell, corner) * d;
            for ch in 0..d {
                dst[ch] += w[corner] * f[src + ch];
            }
        }
    }
    out
}

/// Scatter the adjoint of the interpolation into the grid features:
/// grad f_{ijk} += w_{ijk} · g.
pub fn interp_scatter<T: Real>(meta: &GridMeta, xs: &[T], g: &[T], out: &mut Vec<(u32, T)>) {
    let d = meta.channels;
    let n = xs.len() / 3;
    for q in 0..n {
        let cell = locate(meta, [xs[3 * q], xs[3 * q + 1], xs[3 * q + 2]]);
        let w = corner_weights(&cell.frac);
        for corner in 0..8 {
            let base = corner_node(meta, &cell, corner) * d;
            for ch in 0..d {
                out.push(((base + ch) as u32, w[corner] * g[q * d + ch]));
            }
        }
    }
}

/// Gradient w.r.t. the query point chained with the upstream feature adjoint:
/// out[q][a] = Σ_d g1[q][d] · s_a · Σ_c (∂w_c/∂x̄_a) f_c[d].
pub fn grad_query<T: Real>(meta: &GridMeta, f: &[T], xs: &[T], g1: &[T]) -> Vec<T> {
    let d = meta.channels;
    let s = meta.scale::<T>();
    let n = xs.len() / 3;
    let mut out = vec![T::zero(); n * 3];
    for q in 0..n {
        let cell = locate(meta, [xs[3 * q], xs[3 * q + 1], xs[3 * q + 2]]);
        let wg = corner_weight_grads(&cell.frac);
        for corner in 0..8 {
            let src = corner_node(meta, &cell, corner) * d;
            let mut gf = T::zero();
            for ch in 0..d {
                gf += g1[q * d + ch] * f[src + ch];
            }
            for a in 0..3 {
                out[q * 3 + a] += s[a] * wg[corner][a] * gf;
            }
        }
    }
    out
}

/// Straight-through variant with ∂w/∂x̄ ≡ 0. Kept to document the rejected
/// mode: with it, spatial normals of the grid contribution vanish.
pub fn grad_query_ste<T: Real>(_meta: &GridMeta, _f: &[T], xs: &[T], _g1: &[T]) -> Vec<T> {
    vec![T::zero(); xs.len()]
}

/// Second-order contraction against the (q,3) adjoint of `grad_query`:
/// out[q][d] = Σ_a gg[q][a] · s_a · Σ_c (∂w_c/∂x̄_a) f_c[d].
pub fn grad_grad_upstream<T: Real>(meta: &GridMeta, f: &[T], xs: &[T], gg: &[T]) -> Vec<T> {
    let d = meta.channels;
    let s = meta.scale::<T>();
    let n = xs.len() / 3;
    let mut out = vec![T::zero(); n * d];
    for q in 0..n {
        let cell = locate(meta, [xs[3 * q], xs[3 * q + 1], xs[3 * q + 2]]);
        let wg = corner_weight_grads(&cell.frac);
        for corner in 0..8 {
            let src = corner_node(meta, &cell, corner) * d;
            let mut proj = T::zero();
            for a in 0..3 {
                proj += gg[q * 3 + a] * s[a] * wg[corner][a];
            }
            for ch in 0..d {
                out[q * d + ch] += proj * f[src + ch];
            }
        }
    }
    out
}

/// Second-order scatter into the grid features:
/// grad f_c[d] += Σ_a gg[q][a] · g1[q][d] · s_a · ∂w_c/∂x̄_a.
pub fn grad_grad_scatter<T: Real>(
    meta: &GridMeta,
    xs: &[T],
    g1: &[T],
    gg: &[T],
    out: &mut Vec<(u32, T)>,
) {
    let d = meta.channels;
    let s = meta.scale::<T>();
    let n = xs.len() / 3;
    for q in 0..n {
        let cell = locate(meta, [xs[3 * q], xs[3 * q + 1], xs[3 * q + 2]]);
        let wg = corner_weight_grads(&cell.frac);
        for corner in 0..8 {
            let mut proj = T::zero();
            for a in 0..3 {
                proj += gg[q * 3 + a] * s[a] * wg[corner][a];
            }
            let base = corner_node(meta, &cell, corner) * d;
            for ch in 0..d {
                out.push(((base + ch) as u32, proj * g1[q * d + ch]));
            }
        }
    }
}

/// Grid node a query point maps to for the total-variation term.
pub fn tv_nodes_from_points<T: Real>(meta: &GridMeta, xs: &[T]) -> Vec<[u32; 3]> {
    let n = xs.len() / 3;
    let mut out = Vec::with_capacity(n);
    for q in 0..n {
        let xb = to_grid_coords(meta, [xs[3 * q], xs[3 * q + 1], xs[3 * q + 2]]);
        let mut node = [0u32; 3];
        for a in 0..3 {
            let hi = (meta.dims[a] - 1) as f64;
            node[a] = xb[a].floor().to_f64().unwrap_or(0.0).clamp(0.0, hi) as u32;
        }
        out.push(node);
    }
    out
}

/// √(Δf²_{i+1,j,k} + Δf²_{i,j+1,k} + Δf²_{i,j,k+1}) per node, channels summed
/// inside each squared difference; axes without a +1 neighbor are skipped.
pub fn tv_forward<T: Real>(meta: &GridMeta, f: &[T], nodes: &[[u32; 3]]) -> Vec<T> {
    let d = meta.channels;
    let mut out = Vec::with_capacity(nodes.len());
    for node in nodes {
        let (i, j, k) = (node[0] as usize, node[1] as usize, node[2] as usize);
        let here = node_index(meta, i, j, k) * d;
        let mut acc = c::<T>(TV_EPS);
        for (axis, dims) in meta.dims.iter().enumerate() {
            let mut n = [i, j, k];
            n[axis] += 1;
            if n[axis] >= *dims {
                continue;
            }
            let there = node_index(meta, n[0], n[1], n[2]) * d;
            for ch in 0..d {
                let diff = f[there + ch] - f[here + ch];
                acc += diff * diff;
            }
        }
        out.push(acc.sqrt());
    }
    out
}

/// Symmetric backward of the total-variation term: each difference sends
/// +g·Δ/tv to the neighbor feature and −g·Δ/tv to the base feature.
pub fn tv_scatter<T: Real>(
    meta: &GridMeta,
    f: &[T],
    nodes: &[[u32; 3]],
    g: &[T],
    tv: &[T],
    out: &mut Vec<(u32, T)>,
) {
    let d = meta.channels;
    for (q, node) in nodes.iter().enumerate() {
        if tv[q] <= T::zero() {
            continue;
        }
        let scale = g[q] / tv[q];
        let (i, j, k) = (node[0] as usize, node[1] as usize, node[2] as usize);
        let here = node_index(meta, i, j, k) * d;
        for (axis, dims) in meta.dims.iter().enumerate() {
            let mut n = [i, j, k];
            n[axis] += 1;
            if n[axis] >= *dims {
                continue;
            }
            let there = node_index(meta, n[0], n[1], n[2]) * d;
            for ch in 0..d {
                let diff = f[there + ch] - f[here + ch];
                out.push(((there + ch) as u32, scale * diff));
                out.push(((here + ch) as u32, -(scale * diff)));
            }
        }
    }
}

/// Merge a sparse scatter list into a dense gradient buffer, in list order.
pub fn apply_sparse<T: Real>(dense: &mut [T], sparse: &[(u32, T)]) {
    for &(idx, v) in sparse {
        dense[idx as usize] += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(g: usize, d: usize) -> GridMeta {
        GridMeta {
            dims: [g, g, g],
            channels: d,
            bounds_min: [-1.0; 3],
            bounds_max: [1.0; 3],
        }
    }

    fn linear_index_features(m: &GridMeta) -> Vec<f64> {
        // f(i,j,k) = i + 2j + 4k in channel 0, so the cell at the origin holds 0..7.
        let mut f: Vec<f64> = vec![0.0; m.len()];
        for i in 0..m.dims[0] {
            for j in 0..m.dims[1] {
                for k in 0..m.dims[2] {
                    f[node_index(m, i, j, k) * m.channels] = (i + 2 * j + 4 * k) as f64;
                }
            }
        }
        f
    }

    #[test]
    fn grid_coords_examples() {
        let m = meta(512, 4);
        assert_eq!(to_grid_coords(&m, [0.0f64, 0.0, 0.0]), [256.0, 256.0, 256.0]);
        assert_eq!(to_grid_coords(&m, [-1.0f64, -1.0, -1.0]), [0.0, 0.0, 0.0]);
        // s·(x−m) evaluated by hand: 256·(0.25+1)=320, 256·(−0.5+1)=128, 256·(1+1)=512.
        assert_eq!(to_grid_coords(&m, [0.25f64, -0.5, 1.0]), [320.0, 128.0, 512.0]);
    }

    #[test]
    fn interp_at_node_is_that_node() {
        let m = meta(4, 1);
        let f = linear_index_features(&m);
        // Node (1,1,1): grid spacing in world units is 2/4 = 0.5, node p = m + x̄/s.
        let p = [-1.0 + 0.5, -1.0 + 0.5, -1.0 + 0.5];
        let out = interp_forward(&m, &f, &p);
        assert!((out[0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn interp_at_cell_center_is_corner_mean() {
        let m = meta(4, 1);
        let f = linear_index_features(&m);
        let p = [-1.0 + 0.25, -1.0 + 0.25, -1.0 + 0.25];
        let out = interp_forward(&m, &f, &p);
        let mean = (0..8).map(|c| c as f64).sum::<f64>() / 8.0;
        assert!((out[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn interp_matches_composed_axis_lerps() {
        let m = meta(4, 1);
        let f = linear_index_features(&m);
        // Fractions (0.25, 0.5, 0.75) inside the origin cell.
        let h = 0.5; // world cell width
        let p = [-1.0 + 0.25 * h, -1.0 + 0.5 * h, -1.0 + 0.75 * h];
        let out = interp_forward(&m, &f, &p);
        // Compose three 1-D lerps by hand over corner values c = i + 2j + 4k.
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let v00 = lerp(0.0, 1.0, 0.25);
        let v10 = lerp(2.0, 3.0, 0.25);
        let v01 = lerp(4.0, 5.0, 0.25);
        let v11 = lerp(6.0, 7.0, 0.25);
        let v0 = lerp(v00, v10, 0.5);
        let v1 = lerp(v01, v11, 0.5);
        let expect = lerp(v0, v1, 0.75);
        assert!((out[0] - expect).abs() < 1e-12, "{} vs {expect}", out[0]);
    }

    #[test]
    fn weights_are_a_partition_of_unity() {
        let w = corner_weights(&[0.3f64, 0.9, 0.1]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn grad_query_zero_on_constant_grid() {
        let m = meta(4, 2);
        let f: Vec<f64> = vec![3.5; m.len()];
        let g1 = vec![1.0, -2.0];
        let out = grad_query(&m, &f, &[0.1, 0.2, -0.3], &g1);
        for v in out {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn grad_query_exact_on_axis_linear_field() {
        let m = meta(4, 1);
        // Features linear in i: slope 1 per node step, so df/dx = s_x = 2 in world units.
        let mut f: Vec<f64> = vec![0.0; m.len()];
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    f[node_index(&m, i, j, k)] = i as f64;
                }
            }
        }
        let out = grad_query(&m, &f, &[0.13, -0.4, 0.77], &[1.0]);
        assert!((out[0] - 2.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12 && out[2].abs() < 1e-12);
    }

    #[test]
    fn grad_query_matches_central_differences() {
        let m = meta(5, 3);
        let mut rng = 1234u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let f: Vec<f64> = (0..m.len()).map(|_| next()).collect();
        // Central differences need queries strictly inside a cell, away from
        // the faces where trilinear interpolation is only piecewise smooth.
        for _ in 0..20 {
            let p = loop {
                let cand = [next() * 0.5, next() * 0.5, next() * 0.5];
                let xb = to_grid_coords(&m, cand);
                if xb.iter().all(|x| {
                    let fr = x.fract();
                    (0.05..=0.95).contains(&fr)
                }) {
                    break cand;
                }
            };
            let g1 = [next(), next(), next()];
            let analytic = grad_query(&m, &f, &p, &g1);
            let h = 1e-6;
            for a in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[a] += h;
                pm[a] -= h;
                let fp = interp_forward(&m, &f, &pp);
                let fm = interp_forward(&m, &f, &pm);
                let fd: f64 = (0..3).map(|ch| g1[ch] * (fp[ch] - fm[ch]) / (2.0 * h)).sum();
                let denom = analytic[a].abs().max(fd.abs()).max(1.0);
                assert!(
                    (analytic[a] - fd).abs() / denom < 1e-6,
                    "axis {a}: {} vs {fd}",
                    analytic[a]
                );
            }
        }
    }

    #[test]
    fn ste_mode_returns_zero_spatial_gradient() {
        let m = meta(4, 1);
        let f = linear_index_features(&m);
        let out = grad_query_ste(&m, &f, &[0.1, 0.2, 0.3], &[1.0]);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_grad_zero_for_zero_adjoint() {
        let m = meta(4, 2);
        let f: Vec<f64> = vec![0.7; m.len()];
        let up = grad_grad_upstream(&m, &f, &[0.3, 0.1, -0.2], &[0.0, 0.0, 0.0]);
        assert!(up.iter().all(|&v| v == 0.0));
        let mut sp = Vec::new();
        grad_grad_scatter(&m, &[0.3, 0.1, -0.2], &[1.0, 1.0], &[0.0; 3], &mut sp);
        assert!(sp.iter().all(|&(_, v)| v == 0.0));
    }

    #[test]
    fn grad_grad_single_corner_hand_expansion() {
        // One nonzero corner feature at (1,1,1); query in the origin cell.
        let m = meta(4, 1);
        let mut f: Vec<f64> = vec![0.0; m.len()];
        f[node_index(&m, 1, 1, 1)] = 1.0;
        let h = 0.5; // world cell width
        let (ux, uy, uz) = (0.3, 0.6, 0.2);
        let p = [-1.0 + ux * h, -1.0 + uy * h, -1.0 + uz * h];
        let s = 2.0; // grid scale per axis
        // w = ux·uy·uz for that corner, so ∂w/∂x̄ = (uy·uz, ux·uz, ux·uy).
        let dw = [uy * uz, ux * uz, ux * uy];
        let gg = [0.5, -1.5, 2.0];
        let up = grad_grad_upstream(&m, &f, &p, &gg);
        let expect: f64 = (0..3).map(|a| gg[a] * s * dw[a]).sum();
        assert!((up[0] - expect * 1.0).abs() < 1e-12);
        let g1 = [0.8];
        let mut sp = Vec::new();
        grad_grad_scatter(&m, &p, &g1, &gg, &mut sp);
        let target = node_index(&m, 1, 1, 1) as u32;
        let got: f64 = sp.iter().filter(|(i, _)| *i == target).map(|(_, v)| v).sum();
        assert!((got - expect * 0.8).abs() < 1e-12);
    }

    #[test]
    fn tv_constant_grid_is_zero() {
        let m = meta(4, 2);
        let f: Vec<f64> = vec![0.25; m.len()];
        let nodes = vec![[1u32, 1, 1]];
        let tv = tv_forward(&m, &f, &nodes);
        assert!(tv[0] <= 2e-6); // √TV_EPS
    }

    #[test]
    fn tv_single_axis_step_is_the_step() {
        let m = meta(4, 2);
        let mut f: Vec<f64> = vec![0.0; m.len()];
        // Step of 0.7 along +x in channel 1 at node (1,1,1).
        f[node_index(&m, 2, 1, 1) * 2 + 1] = 0.7;
        let nodes = vec![[1u32, 1, 1]];
        let tv = tv_forward(&m, &f, &nodes);
        assert!((tv[0] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn tv_gradient_is_symmetric_and_matches_fd() {
        let m = meta(4, 1);
        let mut f: Vec<f64> = vec![0.0; m.len()];
        // Isolate the +x difference: the y/z neighbors match the base value.
        f[node_index(&m, 2, 1, 1)] = 0.4;
        f[node_index(&m, 1, 1, 1)] = 0.1;
        f[node_index(&m, 1, 2, 1)] = 0.1;
        f[node_index(&m, 1, 1, 2)] = 0.1;
        let nodes = vec![[1u32, 1, 1]];
        let tv = tv_forward(&m, &f, &nodes);
        let mut sp = Vec::new();
        tv_scatter(&m, &f, &nodes, &[1.0], &tv, &mut sp);
        let mut dense: Vec<f64> = vec![0.0; m.len()];
        apply_sparse(&mut dense, &sp);
        let hi = node_index(&m, 2, 1, 1);
        let lo = node_index(&m, 1, 1, 1);
        assert!((dense[hi] + dense[lo]).abs() < 1e-12, "isolated difference is antisymmetric");
        let h = 1e-7;
        for idx in [hi, lo] {
            let mut fp = f.clone();
            let mut fm = f.clone();
            fp[idx] += h;
            fm[idx] -= h;
            let fd = (tv_forward(&m, &fp, &nodes)[0] - tv_forward(&m, &fm, &nodes)[0]) / (2.0 * h);
            assert!((dense[idx] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn boundary_node_skips_missing_axes() {
        let m = meta(4, 1);
        let f = linear_index_features(&m);
        let nodes = vec![[3u32, 3, 3]];
        let tv = tv_forward(&m, &f, &nodes);
        assert!(tv[0] <= 2e-6, "no +1 neighbors at the far corner");
    }

    #[test]
    fn scatter_accumulation_order_is_benign() {
        let m = meta(4, 2);
        let mut rng = 99u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let xs: Vec<f64> = (0..300).map(|_| next() * 0.9).collect();
        let g: Vec<f64> = (0..200).map(|_| next()).collect();
        let mut sp = Vec::new();
        interp_scatter(&m, &xs, &g, &mut sp);
        let mut a: Vec<f64> = vec![0.0; m.len()];
        apply_sparse(&mut a, &sp);
        // Same contributions applied in chunked (per-worker) order.
        let mut b: Vec<f64> = vec![0.0; m.len()];
        let halves = sp.split_at(sp.len() / 2);
        apply_sparse(&mut b, halves.1);
        apply_sparse(&mut b, halves.0);
        for (x, y) in a.iter().zip(&b) {
            let denom = x.abs().max(y.abs()).max(1e-9);
            assert!((x - y).abs() / denom < 1e-6);
        }
    }
}
