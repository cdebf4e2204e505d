//! Positional encoding and the parametric field networks: geometry (SDF +
//! feature), base color, roughness, specular reflectance, the four light
//! networks, the optional pre-integrated light of the split-sum baseline,
//! and a small directional background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Shape, Var};
use crate::math::{c, Real};
use crate::params::{GridMeta, ParamId, ParamKind, ParamStore};
use crate::voxel;

/// Hidden activation sharpness shared by every field network.
pub const HIDDEN_BETA: f64 = 100.0;
/// Floor applied to remapped roughness to keep the microfacet terms away
/// from division blowup.
pub const ROUGHNESS_FLOOR: f64 = 0.089;
/// Guard on the spatial-gradient norm before normal normalization.
pub const NORMAL_EPS: f64 = 1e-16;
/// Floor on the Laplacian scale heads.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    /// Hidden linear layers, each followed by softplus(beta=100).
    pub layers: usize,
    pub width: usize,
    /// Hidden layer index whose input re-concatenates the network input.
    pub skip_at: Option<usize>,
}

impl MlpSpec {
    pub fn plain(layers: usize, width: usize) -> Self {
        MlpSpec { layers, width, skip_at: None }
    }
}

/// Network shapes and encoding levels; defaults follow the reference setup.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub enc_geometry: usize,
    pub enc_environment: usize,
    pub enc_visibility: usize,
    pub enc_photogrammetric: usize,
    pub enc_background: usize,
    pub geometry: MlpSpec,
    pub geometry_feature: usize,
    pub base_color: MlpSpec,
    pub roughness: MlpSpec,
    pub specular: MlpSpec,
    pub environment: MlpSpec,
    pub visibility: MlpSpec,
    pub implicit: MlpSpec,
    pub photogrammetric: MlpSpec,
    pub preintegrated: MlpSpec,
    pub background: MlpSpec,
    pub grid_size: usize,
    pub grid_channels: usize,
    pub grid_init_std: f64,
    pub geometry_init_radius: f64,
    /// Enables the split-sum pre-integrated light network.
    pub with_preintegrated: bool,
}

impl Architecture {
    pub fn paper_default() -> Self {
        Architecture {
            enc_geometry: 6,
            enc_environment: 6,
            enc_visibility: 6,
            enc_photogrammetric: 4,
            enc_background: 4,
            geometry: MlpSpec { layers: 8, width: 256, skip_at: Some(4) },
            geometry_feature: 256,
            base_color: MlpSpec::plain(4, 256),
            roughness: MlpSpec::plain(4, 128),
            specular: MlpSpec::plain(4, 128),
            environment: MlpSpec::plain(4, 128),
            visibility: MlpSpec::plain(4, 128),
            implicit: MlpSpec::plain(4, 128),
            photogrammetric: MlpSpec::plain(4, 256),
            preintegrated: MlpSpec::plain(4, 128),
            background: MlpSpec::plain(3, 64),
            grid_size: 512,
            grid_channels: 4,
            grid_init_std: 1e-3,
            geometry_init_radius: 0.5,
            with_preintegrated: false,
        }
    }

    pub fn encoded_dim(levels: usize, dim: usize) -> usize {
        dim * (2 * levels + 1)
    }
}

/// γ(x, ℓ): concat(x, sin(2^k x), cos(2^k x)) for k = 0..ℓ−1.
pub fn encode<T: Real>(g: &mut Graph<T>, x: Var, levels: usize) -> Var {
    if levels == 0 {
        return x;
    }
    let mut parts = Vec::with_capacity(2 * levels + 1);
    parts.push(x);
    for k in 0..levels {
        let scaled = g.muls(x, (2.0f64).powi(k as i32));
        parts.push(g.sin(scaled));
        parts.push(g.cos(scaled));
    }
    g.concat_all(&parts)
}

/// Plain-path positional encoding over a row-major (rows, dim) buffer.
pub fn encode_plain<T: Real>(xs: &[T], dim: usize, levels: usize) -> Vec<T> {
    if levels == 0 {
        return xs.to_vec();
    }
    let rows = xs.len() / dim;
    let out_dim = Architecture::encoded_dim(levels, dim);
    let mut out = Vec::with_capacity(rows * out_dim);
    for r in 0..rows {
        let row = &xs[r * dim..(r + 1) * dim];
        out.extend_from_slice(row);
        for k in 0..levels {
            let s: T = c((2.0f64).powi(k as i32));
            for &x in row {
                out.push((x * s).sin());
            }
            for &x in row {
                out.push((x * s).cos());
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Glorot,
    Geometric { radius: f64 },
}

#[derive(Clone, Copy)]
enum LayerRole {
    Hidden { first: bool, skip: bool, in_dim: usize },
    Head,
}

/// A registered multi-layer perceptron. Hidden layers use softplus(beta=100);
/// the head is returned pre-activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub in_dim: usize,
    pub out_dim: usize,
    pub spec: MlpSpec,
    weights: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
}

fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    let v: f64 = StandardNormal.sample(rng);
    v
}

impl Mlp {
    fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        spec: MlpSpec,
        init: Init,
        seed: u64,
    ) -> Self {
        assert!(spec.layers >= 1);
        let mut weights = Vec::new();
        for l in 0..spec.layers {
            let d_in = if l == 0 {
                in_dim
            } else if spec.skip_at == Some(l) {
                spec.width + in_dim
            } else {
                spec.width
            };
            let (w, b) = Self::register_linear(
                store,
                &format!("{name}.w{l}"),
                &format!("{name}.b{l}"),
                d_in,
                spec.width,
                init,
                LayerRole::Hidden { first: l == 0, skip: spec.skip_at == Some(l), in_dim },
                seed,
            );
            weights.push((w, b));
        }
        let head = Self::register_linear(
            store,
            &format!("{name}.head_w"),
            &format!("{name}.head_b"),
            spec.width,
            out_dim,
            init,
            LayerRole::Head,
            seed,
        );
        Mlp { in_dim, out_dim, spec, weights, head }
    }

    #[allow(clippy::too_many_arguments)]
    fn register_linear<T: Real>(
        store: &mut ParamStore<T>,
        wname: &str,
        bname: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        role: LayerRole,
        seed: u64,
    ) -> (ParamId, ParamId) {
        let mut rng = param_rng(seed, wname);
        let mut w = vec![T::zero(); d_in * d_out];
        let mut b = vec![T::zero(); d_out];
        match init {
            Init::Glorot => {
                let limit = (6.0 / (d_in + d_out) as f64).sqrt();
                for v in w.iter_mut() {
                    *v = c(rng.gen_range(-limit..limit));
                }
            }
            Init::Geometric { radius } => match role {
                LayerRole::Hidden { first, skip, in_dim } => {
                    let std = (2.0 / d_out as f64).sqrt();
                    for v in w.iter_mut() {
                        *v = c(normal(&mut rng) * std);
                    }
                    // Only the raw xyz coordinates participate at
                    // initialization; encoded extras and grid features start
                    // silent so the net begins as a distance to a sphere.
                    if first {
                        for row in 3..d_in {
                            for col in 0..d_out {
                                w[row * d_out + col] = T::zero();
                            }
                        }
                    }
                    if skip {
                        let width = d_in - in_dim;
                        for row in (width + 3)..d_in {
                            for col in 0..d_out {
                                w[row * d_out + col] = T::zero();
                            }
                        }
                    }
                }
                LayerRole::Head => {
                    let mean = std::f64::consts::PI.sqrt() / (d_in as f64).sqrt();
                    for v in w.iter_mut() {
                        *v = c(mean + normal(&mut rng) * 1e-4);
                    }
                    for v in b.iter_mut() {
                        *v = c(-radius);
                    }
                }
            },
        }
        let wid = store.register(wname, ParamKind::Weight, Shape::new(d_in, d_out), w);
        let bid = store.register(bname, ParamKind::Bias, Shape::new(1, d_out), b);
        (wid, bid)
    }

    /// Tape forward pass; returns the pre-activation head output.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        assert_eq!(x.shape.cols, self.in_dim, "mlp input dim");
        let mut h = x;
        for (l, (wid, bid)) in self.weights.iter().enumerate() {
            if self.spec.skip_at == Some(l) {
                let cat = g.concat(h, x);
                h = g.muls(cat, std::f64::consts::FRAC_1_SQRT_2);
            }
            let w = g.param(*wid);
            let b = g.param(*bid);
            let z = g.matmul(h, w, false, false);
            let z = g.add_row(z, b);
            h = g.softplus_v(z, HIDDEN_BETA);
        }
        let w = g.param(self.head.0);
        let b = g.param(self.head.1);
        let z = g.matmul(h, w, false, false);
        g.add_row(z, b)
    }

    /// Plain forward pass without tape bookkeeping (sampling, meshing, oracles).
    pub fn forward_plain<T: Real>(&self, store: &ParamStore<T>, xs: &[T]) -> Vec<T> {
        let rows = xs.len() / self.in_dim;
        let mut h = xs.to_vec();
        let mut h_dim = self.in_dim;
        for (l, (wid, bid)) in self.weights.iter().enumerate() {
            if self.spec.skip_at == Some(l) {
                let mut cat = Vec::with_capacity(rows * (h_dim + self.in_dim));
                let scale: T = c(std::f64::consts::FRAC_1_SQRT_2);
                for r in 0..rows {
                    cat.extend(h[r * h_dim..(r + 1) * h_dim].iter().map(|&v| v * scale));
                    cat.extend(
                        xs[r * self.in_dim..(r + 1) * self.in_dim]
                            .iter()
                            .map(|&v| v * scale),
                    );
                }
                h = cat;
                h_dim += self.in_dim;
            }
            let mut z = linear_plain(store, &h, rows, h_dim, *wid, *bid);
            for v in z.iter_mut() {
                *v = crate::autodiff::softplus(*v, c(HIDDEN_BETA));
            }
            h = z;
            h_dim = self.spec.width;
        }
        linear_plain(store, &h, rows, h_dim, self.head.0, self.head.1)
    }
}

fn linear_plain<T: Real>(
    store: &ParamStore<T>,
    x: &[T],
    rows: usize,
    d_in: usize,
    wid: ParamId,
    bid: ParamId,
) -> Vec<T> {
    let wsh = store.shape(wid);
    assert_eq!(wsh.rows, d_in);
    let d_out = wsh.cols;
    let w = store.data(wid);
    let b = store.data(bid);
    let mut out = vec![T::zero(); rows * d_out];
    if rows > 0 {
        unsafe {
            T::gemm(
                rows,
                d_in,
                d_out,
                T::one(),
                x.as_ptr(),
                d_in as isize,
                1,
                w.as_ptr(),
                d_out as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                d_out as isize,
                1,
            );
        }
    }
    for r in 0..rows {
        for (o, &bv) in out[r * d_out..(r + 1) * d_out].iter_mut().zip(b) {
            *o += bv;
        }
    }
    out
}

/// Geometry evaluation with analytic spatial normals.
pub struct GeometryEval {
    pub sdf: Var,
    pub feature: Var,
    /// Raw spatial gradient of the SDF (the Eikonal operand).
    pub grad: Var,
    /// Unit normal, guarded.
    pub normal: Var,
}

/// The full set of field networks over one parameter store.
#[derive(Clone, Debug)]
pub struct FieldBundle {
    pub arch: Architecture,
    pub grid: ParamId,
    pub geometry: Mlp,
    pub base_color: Mlp,
    pub roughness: Mlp,
    pub specular: Mlp,
    pub environment: Mlp,
    pub visibility: Mlp,
    pub implicit: Mlp,
    pub photogrammetric: Mlp,
    pub preintegrated: Option<Mlp>,
    pub background: Mlp,
}

impl FieldBundle {
    pub fn register<T: Real>(store: &mut ParamStore<T>, arch: &Architecture, seed: u64) -> Self {
        let meta = GridMeta {
            dims: [arch.grid_size; 3],
            channels: arch.grid_channels,
            bounds_min: [-1.0; 3],
            bounds_max: [1.0; 3],
        };
        let mut rng = param_rng(seed, "grid.features");
        let std = arch.grid_init_std;
        let feats: Vec<T> = (0..meta.len()).map(|_| c(normal(&mut rng) * std)).collect();
        let grid = store.register_grid("grid.features", meta, feats);

        let f = arch.geometry_feature;
        let g_in = Architecture::encoded_dim(arch.enc_geometry, 3) + arch.grid_channels;
        let geometry = Mlp::register(
            store,
            "geometry",
            g_in,
            1 + f,
            arch.geometry,
            Init::Geometric { radius: arch.geometry_init_radius },
            seed,
        );
        let base_color =
            Mlp::register(store, "base_color", 3 + f, 3, arch.base_color, Init::Glorot, seed);
        let roughness =
            Mlp::register(store, "roughness", 3 + f + 3, 2, arch.roughness, Init::Glorot, seed);
        let specular =
            Mlp::register(store, "specular", 3 + f + 3, 6, arch.specular, Init::Glorot, seed);
        let environment = Mlp::register(
            store,
            "environment",
            Architecture::encoded_dim(arch.enc_environment, 3),
            1,
            arch.environment,
            Init::Glorot,
            seed,
        );
        let visibility = Mlp::register(
            store,
            "visibility",
            3 + Architecture::encoded_dim(arch.enc_visibility, 3) + f + 3,
            1,
            arch.visibility,
            Init::Glorot,
            seed,
        );
        let implicit =
            Mlp::register(store, "implicit", 3 + f + 3, 1, arch.implicit, Init::Glorot, seed);
        let photogrammetric = Mlp::register(
            store,
            "photogrammetric",
            3 + Architecture::encoded_dim(arch.enc_photogrammetric, 3) + f + 3 + 1,
            1,
            arch.photogrammetric,
            Init::Glorot,
            seed,
        );
        let preintegrated = arch.with_preintegrated.then(|| {
            Mlp::register(
                store,
                "preintegrated",
                3 + 3 + Architecture::encoded_dim(arch.enc_photogrammetric, 3) + 1,
                1,
                arch.preintegrated,
                Init::Glorot,
                seed,
            )
        });
        let background = Mlp::register(
            store,
            "background",
            Architecture::encoded_dim(arch.enc_background, 3),
            3,
            arch.background,
            Init::Glorot,
            seed,
        );
        FieldBundle {
            arch: arch.clone(),
            grid,
            geometry,
            base_color,
            roughness,
            specular,
            environment,
            visibility,
            implicit,
            photogrammetric,
            preintegrated,
            background,
        }
    }

    fn geometry_input<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let enc = encode(g, x, self.arch.enc_geometry);
        let grid = g.voxel_interp(self.grid, x);
        g.concat(enc, grid)
    }

    /// SDF and geometric feature at `x` (no normals).
    pub fn geometry_parts<T: Real>(&self, g: &mut Graph<T>, x: Var) -> (Var, Var) {
        let input = self.geometry_input(g, x);
        let out = self.geometry.forward(g, input);
        let sdf = g.slice_cols(out, 0, 1);
        let feat = g.slice_cols(out, 1, 1 + self.arch.geometry_feature);
        (sdf, feat)
    }

    /// SDF, feature and analytic normals at `x`; `x` must be an `input` leaf
    /// so the spatial gradient can be taken. The gradient is recorded on the
    /// tape and stays differentiable w.r.t. parameters.
    pub fn geometry_with_normals<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
    ) -> Result<GeometryEval, crate::error::EngineError> {
        let (sdf, feature) = self.geometry_parts(g, x);
        let grads = g.backward(sdf, &[x], false)?;
        let grad = grads.of(x).expect("x reachable from its own sdf");
        let normal = g.normalize_rows(grad, NORMAL_EPS);
        Ok(GeometryEval { sdf, feature, grad, normal })
    }

    /// Base color field, in [0,1]^3. Normals are deliberately not an input.
    pub fn base_color<T: Real>(&self, g: &mut Graph<T>, x: Var, feat: Var) -> Var {
        let input = g.concat(x, feat);
        let raw = self.base_color.forward(g, input);
        g.sigmoid_v(raw)
    }

    /// Remapped roughness in [0.089, 1] and its Laplacian scale.
    pub fn roughness<T: Real>(&self, g: &mut Graph<T>, x: Var, feat: Var, n: Var) -> (Var, Var) {
        let xf = g.concat(x, feat);
        let input = g.concat(xf, n);
        let raw = self.roughness.forward(g, input);
        let val = g.slice_cols(raw, 0, 1);
        let val = g.sigmoid_v(val);
        let val = g.square(val);
        let val = g.maxs(val, ROUGHNESS_FLOOR);
        let sig = g.slice_cols(raw, 1, 2);
        let sig = g.softplus_v(sig, 1.0);
        let sig = g.maxs(sig, SIGMA_FLOOR);
        (val, sig)
    }

    /// Remapped specular reflectance in [0, 0.16]^3 and its Laplacian scales.
    pub fn specular<T: Real>(&self, g: &mut Graph<T>, x: Var, feat: Var, n: Var) -> (Var, Var) {
        let xf = g.concat(x, feat);
        let input = g.concat(xf, n);
        let raw = self.specular.forward(g, input);
        let val = g.slice_cols(raw, 0, 3);
        let val = g.sigmoid_v(val);
        let val = g.square(val);
        let val = g.muls(val, 0.16);
        let sig = g.slice_cols(raw, 3, 6);
        let sig = g.softplus_v(sig, 1.0);
        let sig = g.maxs(sig, SIGMA_FLOOR);
        (val, sig)
    }

    /// Environment light intensity for directions `l`; single channel.
    pub fn environment<T: Real>(&self, g: &mut Graph<T>, l: Var) -> Var {
        let enc = encode(g, l, self.arch.enc_environment);
        let raw = self.environment.forward(g, enc);
        g.softplus_v(raw, 1.0)
    }

    /// Soft visibility in [0,1].
    pub fn visibility<T: Real>(&self, g: &mut Graph<T>, x: Var, l: Var, feat: Var, n: Var) -> Var {
        let le = encode(g, l, self.arch.enc_visibility);
        let xl = g.concat(x, le);
        let xlf = g.concat(xl, feat);
        let input = g.concat(xlf, n);
        let raw = self.visibility.forward(g, input);
        g.sigmoid_v(raw)
    }

    /// Implicit (photon-map-like) illumination intensity.
    pub fn implicit<T: Real>(&self, g: &mut Graph<T>, x: Var, feat: Var, n: Var) -> Var {
        let xf = g.concat(x, feat);
        let input = g.concat(xf, n);
        let raw = self.implicit.forward(g, input);
        g.softplus_v(raw, 1.0)
    }

    /// Photogrammetric light intensity; takes the inverse squared distance
    /// from the camera center as an extra input.
    pub fn photogrammetric<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        v: Var,
        feat: Var,
        n: Var,
        inv_d2: Var,
    ) -> Var {
        let ve = encode(g, v, self.arch.enc_photogrammetric);
        let xv = g.concat(x, ve);
        let xvf = g.concat(xv, feat);
        let xvfn = g.concat(xvf, n);
        let input = g.concat(xvfn, inv_d2);
        let raw = self.photogrammetric.forward(g, input);
        g.softplus_v(raw, 1.0)
    }

    /// Pre-integrated light of the split-sum baseline.
    pub fn preintegrated_light<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        n: Var,
        v: Var,
        inv_d2: Var,
    ) -> Var {
        let net = self.preintegrated.as_ref().expect("split-sum network not registered");
        let ve = encode(g, v, self.arch.enc_photogrammetric);
        let xn = g.concat(x, n);
        let xnv = g.concat(xn, ve);
        let input = g.concat(xnv, inv_d2);
        let raw = net.forward(g, input);
        g.softplus_v(raw, 1.0)
    }

    /// Learned directional background radiance.
    pub fn background<T: Real>(&self, g: &mut Graph<T>, v: Var) -> Var {
        let enc = encode(g, v, self.arch.enc_background);
        let raw = self.background.forward(g, enc);
        g.sigmoid_v(raw)
    }

    // ---- plain (tape-free) evaluation ----

    /// SDF values for a (rows,3) buffer of world points.
    pub fn sdf_plain<T: Real>(&self, store: &ParamStore<T>, xs: &[T]) -> Vec<T> {
        let (sdf, _) = self.geometry_plain(store, xs);
        sdf
    }

    /// SDF and geometric feature without tape bookkeeping.
    pub fn geometry_plain<T: Real>(&self, store: &ParamStore<T>, xs: &[T]) -> (Vec<T>, Vec<T>) {
        let rows = xs.len() / 3;
        let meta = store.grid_meta(self.grid);
        let grid_f = voxel::interp_forward(meta, store.data(self.grid), xs);
        let enc = encode_plain(xs, 3, self.arch.enc_geometry);
        let enc_dim = Architecture::encoded_dim(self.arch.enc_geometry, 3);
        let d = meta.channels;
        let in_dim = enc_dim + d;
        let mut input = Vec::with_capacity(rows * in_dim);
        for r in 0..rows {
            input.extend_from_slice(&enc[r * enc_dim..(r + 1) * enc_dim]);
            input.extend_from_slice(&grid_f[r * d..(r + 1) * d]);
        }
        let out = self.geometry.forward_plain(store, &input);
        let fdim = self.arch.geometry_feature;
        let mut sdf = Vec::with_capacity(rows);
        let mut feat = Vec::with_capacity(rows * fdim);
        for r in 0..rows {
            sdf.push(out[r * (1 + fdim)]);
            feat.extend_from_slice(&out[r * (1 + fdim) + 1..(r + 1) * (1 + fdim)]);
        }
        (sdf, feat)
    }
}
