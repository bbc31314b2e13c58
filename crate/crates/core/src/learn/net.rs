//! Small visuomotor MLP: image trunk, fusion trunk with the low-dimensional
//! measurement and a subsampled reference, an action head and an auxiliary
//! state head. Hand-written backpropagation and Adam.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::model::{Action, State, NU, NX, N_OTHER};
use crate::rng::{self, purpose};
use crate::setops::BoxSet;

pub const FORMAT_MAGIC: &[u8; 8] = b"TLPOLICY";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub image_pixels: usize,
    pub image_hidden: usize,
    pub embedding: usize,
    pub use_image: bool,
    pub reference_indices: Vec<usize>,
    pub fusion_hidden: usize,
    pub fusion_out: usize,
}

impl Architecture {
    pub fn from_config(cfg: &NetworkConfig, image_pixels: usize) -> Self {
        Self {
            image_pixels,
            image_hidden: cfg.image_hidden,
            embedding: cfg.embedding,
            use_image: cfg.use_image,
            reference_indices: cfg.reference_indices.clone(),
            fusion_hidden: cfg.fusion_hidden,
            fusion_out: cfg.fusion_out,
        }
    }

    pub fn aux_len(&self) -> usize {
        N_OTHER + NX * self.reference_indices.len()
    }

    fn fusion_in(&self) -> usize {
        self.aux_len() + if self.use_image { self.embedding } else { 0 }
    }

    /// `(out, in)` of each layer in storage order.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut s = Vec::new();
        if self.use_image {
            s.push((self.image_hidden, self.image_pixels));
            s.push((self.embedding, self.image_hidden));
        }
        s.push((self.fusion_hidden, self.fusion_in()));
        s.push((self.fusion_out, self.fusion_hidden));
        s.push((NU, self.fusion_out));
        s.push((NX, self.fusion_out));
        s
    }
}

/// Affine maps between physical units and network units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub x_center: [f64; NX],
    pub x_scale: [f64; NX],
    pub u_center: [f64; NU],
    pub u_scale: [f64; NU],
}

impl Normalization {
    /// States scaled by the half-widths of `X`, actions by those of `U`.
    pub fn from_sets(x_set: &BoxSet, u_set: &BoxSet) -> Result<Self> {
        if x_set.dim() != NX || u_set.dim() != NU {
            return Err(Error::DimensionMismatch { expected: NX, got: x_set.dim(), context: "normalization sets" });
        }
        let pos = |v: f64| if v > 0.0 { v } else { 1.0 };
        let mut n = Self { x_center: [0.0; NX], x_scale: [1.0; NX], u_center: [0.0; NU], u_scale: [1.0; NU] };
        for i in 0..NX {
            n.x_center[i] = x_set.center()[i];
            n.x_scale[i] = pos(x_set.half_widths()[i]);
        }
        for i in 0..NU {
            n.u_center[i] = u_set.center()[i];
            n.u_scale[i] = pos(u_set.half_widths()[i]);
        }
        Ok(n)
    }

    pub fn identity() -> Self {
        Self { x_center: [0.0; NX], x_scale: [1.0; NX], u_center: [0.0; NU], u_scale: [1.0; NU] }
    }

    pub fn state_in(&self, x: &State) -> [f64; NX] {
        std::array::from_fn(|i| (x[i] - self.x_center[i]) / self.x_scale[i])
    }

    pub fn state_out(&self, z: &[f64]) -> State {
        State::from_fn(|i, _| self.x_center[i] + self.x_scale[i] * z[i])
    }

    pub fn action_in(&self, u: &Action) -> [f64; NU] {
        std::array::from_fn(|i| (u[i] - self.u_center[i]) / self.u_scale[i])
    }

    pub fn action_out(&self, z: &[f64]) -> Action {
        Action::from_fn(|i, _| self.u_center[i] + self.u_scale[i] * z[i])
    }

    /// Measured components `[p_z, v, roll, pitch]` share the state scaling.
    pub fn other_in(&self, o: &[f64; N_OTHER]) -> [f64; N_OTHER] {
        std::array::from_fn(|i| (o[i] - self.x_center[i + 2]) / self.x_scale[i + 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Self { w: DMatrix::zeros(out, inp), b: DVector::zeros(out) }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.w * x;
        for mut c in y.column_iter_mut() {
            c += &self.b;
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub arch: Architecture,
    pub norm: Normalization,
    pub layers: Vec<Dense>,
}

/// Network inputs for a batch: one column per sample.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub image: DMatrix<f64>,
    pub aux: DMatrix<f64>,
}

struct Cache {
    image_h: Option<(DMatrix<f64>, DMatrix<f64>)>,
    fusion_in: DMatrix<f64>,
    h3: DMatrix<f64>,
    h4: DMatrix<f64>,
    u: DMatrix<f64>,
    x: DMatrix<f64>,
}

fn tanh_inplace(m: &mut DMatrix<f64>) {
    m.apply(|v| *v = v.tanh());
}

/// Multiply `grad` by `1 - a^2` in place.
fn tanh_back(grad: &mut DMatrix<f64>, a: &DMatrix<f64>) {
    grad.zip_apply(a, |g, a| *g *= 1.0 - a * a);
}

/// Flattened reference window at the configured horizon indices.
pub fn subsample_reference(window: &[State], indices: &[usize]) -> Vec<State> {
    indices.iter().map(|&i| window[i.min(window.len() - 1)]).collect()
}

impl PolicyParams {
    /// Glorot-uniform weights, zero biases, from a seeded stream.
    pub fn init(arch: Architecture, norm: Normalization, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[purpose::INIT_WEIGHTS]);
        let layers = arch
            .shapes()
            .into_iter()
            .map(|(o, i)| {
                let lim = (6.0 / (o + i) as f64).sqrt();
                Dense { w: DMatrix::from_fn(o, i, |_, _| r.random_range(-lim..lim)), b: DVector::zeros(o) }
            })
            .collect();
        Self { arch, norm, layers }
    }

    pub fn zeros(arch: Architecture, norm: Normalization) -> Self {
        let layers = arch.shapes().into_iter().map(|(o, i)| Dense::zeros(o, i)).collect();
        Self { arch, norm, layers }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
        }
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.n_params() {
            return Err(Error::DimensionMismatch { expected: self.n_params(), got: v.len(), context: "flat parameters" });
        }
        let mut k = 0;
        for l in &mut self.layers {
            for x in l.w.iter_mut().chain(l.b.iter_mut()) {
                *x = v[k];
                k += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    fn check_shapes(&self) -> Result<()> {
        let shapes = self.arch.shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::DimensionMismatch { expected: shapes.len(), got: self.layers.len(), context: "layer count" });
        }
        for (l, (o, i)) in self.layers.iter().zip(shapes) {
            if l.w.nrows() != o || l.w.ncols() != i || l.b.len() != o {
                return Err(Error::DimensionMismatch { expected: o * i, got: l.w.len(), context: "layer shape" });
            }
        }
        Ok(())
    }

    /// Normalized auxiliary input: measurement then reference states.
    pub fn encode_aux(&self, other: &[f64; N_OTHER], reference: &[State]) -> Vec<f64> {
        let mut v: Vec<f64> = self.norm.other_in(other).to_vec();
        for s in reference {
            v.extend(self.norm.state_in(s));
        }
        v
    }

    fn check_inputs(&self, inp: &Inputs) -> Result<()> {
        let b = inp.aux.ncols();
        if inp.aux.nrows() != self.arch.aux_len() {
            return Err(Error::DimensionMismatch { expected: self.arch.aux_len(), got: inp.aux.nrows(), context: "policy auxiliary input" });
        }
        if self.arch.use_image && (inp.image.nrows() != self.arch.image_pixels || inp.image.ncols() != b) {
            return Err(Error::DimensionMismatch { expected: self.arch.image_pixels, got: inp.image.nrows(), context: "policy image input" });
        }
        Ok(())
    }

    fn forward_cache(&self, inp: &Inputs) -> Cache {
        let mut k = 0;
        let (image_h, fusion_in) = if self.arch.use_image {
            let mut h1 = self.layers[0].apply(&inp.image);
            tanh_inplace(&mut h1);
            let mut h2 = self.layers[1].apply(&h1);
            tanh_inplace(&mut h2);
            k = 2;
            let mut f = DMatrix::zeros(h2.nrows() + inp.aux.nrows(), inp.aux.ncols());
            f.rows_mut(0, h2.nrows()).copy_from(&h2);
            f.rows_mut(h2.nrows(), inp.aux.nrows()).copy_from(&inp.aux);
            (Some((h1, h2)), f)
        } else {
            (None, inp.aux.clone())
        };
        let mut h3 = self.layers[k].apply(&fusion_in);
        tanh_inplace(&mut h3);
        let mut h4 = self.layers[k + 1].apply(&h3);
        tanh_inplace(&mut h4);
        let u = self.layers[k + 2].apply(&h4);
        let x = self.layers[k + 3].apply(&h4);
        Cache { image_h, fusion_in, h3, h4, u, x }
    }

    /// Network-unit outputs `(u, x_hat)` for a batch.
    pub fn forward_batch(&self, inp: &Inputs) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_shapes()?;
        self.check_inputs(inp)?;
        let c = self.forward_cache(inp);
        Ok((c.u, c.x))
    }

    /// Action and auxiliary state estimate in physical units.
    pub fn forward(&self, image: &[f64], other: &[f64; N_OTHER], window: &[State]) -> Result<(Action, State)> {
        let reference = subsample_reference(window, &self.arch.reference_indices);
        let aux = DMatrix::from_column_slice(self.arch.aux_len(), 1, &self.encode_aux(other, &reference));
        let image = if self.arch.use_image {
            DMatrix::from_column_slice(image.len(), 1, image)
        } else {
            DMatrix::zeros(0, 1)
        };
        let (u, x) = self.forward_batch(&Inputs { image, aux })?;
        let u = self.norm.action_out(u.as_slice());
        let x = self.norm.state_out(x.as_slice());
        if u.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged { epoch: 0 });
        }
        Ok((u, x))
    }

    /// Loss and its gradient for network-unit targets.
    pub fn loss_and_grad(&self, inp: &Inputs, target_u: &DMatrix<f64>, target_x: &DMatrix<f64>, lambda: f64) -> (f64, Vec<Dense>) {
        let c = self.forward_cache(inp);
        let b = inp.aux.ncols() as f64;
        let du = &c.u - target_u;
        let dx = &c.x - target_x;
        let loss = loss_from_residuals(&du, &dx, lambda);
        let gu = du * (2.0 / (NU as f64 * b));
        let gx = dx * (2.0 * lambda / (NX as f64 * b));

        let k = if self.arch.use_image { 2 } else { 0 };
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let outer = |g: &DMatrix<f64>, a: &DMatrix<f64>| Dense { w: g * a.transpose(), b: g.column_sum() };
        let g_head_u = outer(&gu, &c.h4);
        let g_head_x = outer(&gx, &c.h4);
        let mut g4 = self.layers[k + 2].w.tr_mul(&gu) + self.layers[k + 3].w.tr_mul(&gx);
        tanh_back(&mut g4, &c.h4);
        let g_l4 = outer(&g4, &c.h3);
        let mut g3 = self.layers[k + 1].w.tr_mul(&g4);
        tanh_back(&mut g3, &c.h3);
        let g_l3 = outer(&g3, &c.fusion_in);
        if let Some((h1, h2)) = &c.image_h {
            let gf = self.layers[k].w.tr_mul(&g3);
            let mut g2 = gf.rows(0, h2.nrows()).into_owned();
            tanh_back(&mut g2, h2);
            let g_l2 = outer(&g2, h1);
            let mut g1 = self.layers[1].w.tr_mul(&g2);
            tanh_back(&mut g1, h1);
            grads.push(outer(&g1, &inp.image));
            grads.push(g_l2);
        }
        grads.extend([g_l3, g_l4, g_head_u, g_head_x]);
        (loss, grads)
    }

    pub fn loss(&self, inp: &Inputs, target_u: &DMatrix<f64>, target_x: &DMatrix<f64>, lambda: f64) -> f64 {
        let c = self.forward_cache(inp);
        loss_from_residuals(&(&c.u - target_u), &(&c.x - target_x), lambda)
    }

    /// Versioned binary: magic, version, JSON header length and header,
    /// then little-endian f64 tensors in layer order (weights row-major,
    /// then bias).
    pub fn write_binary<W: Write>(&self, mut w: W, meta: &serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "version": FORMAT_VERSION,
            "arch": self.arch,
            "norm": self.norm,
            "shapes": self.layers.iter().map(|l| [l.w.nrows(), l.w.ncols()]).collect::<Vec<_>>(),
            "meta": meta,
        });
        let text = serde_json::to_vec(&header)?;
        w.write_all(FORMAT_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(text.len() as u64).to_le_bytes())?;
        w.write_all(&text)?;
        for l in &self.layers {
            for r in 0..l.w.nrows() {
                for c in 0..l.w.ncols() {
                    w.write_all(&l.w[(r, c)].to_le_bytes())?;
                }
            }
            for v in l.b.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<(Self, serde_json::Value)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != FORMAT_MAGIC {
            return Err(Error::Format("not a policy file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported policy format version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut text = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut text)?;
        let header: serde_json::Value = serde_json::from_slice(&text)?;
        let arch: Architecture = serde_json::from_value(header["arch"].clone())?;
        let norm: Normalization = serde_json::from_value(header["norm"].clone())?;
        let shapes: Vec<[usize; 2]> = serde_json::from_value(header["shapes"].clone())?;
        if shapes.iter().map(|s| (s[0], s[1])).collect::<Vec<_>>() != arch.shapes() {
            return Err(Error::Format("tensor shapes do not match the architecture".into()));
        }
        let mut layers = Vec::new();
        let mut read = || -> Result<f64> {
            r.read_exact(&mut b8)?;
            Ok(f64::from_le_bytes(b8))
        };
        for [o, i] in shapes {
            let mut w = DMatrix::zeros(o, i);
            for rr in 0..o {
                for c in 0..i {
                    w[(rr, c)] = read()?;
                }
            }
            let b = DVector::from_iterator(o, (0..o).map(|_| read()).collect::<Result<Vec<_>>>()?);
            layers.push(Dense { w, b });
        }
        let p = Self { arch, norm, layers };
        if !p.is_finite() {
            return Err(Error::Format("policy file holds non-finite weights".into()));
        }
        Ok((p, header["meta"].clone()))
    }
}

/// `mean_b [ |du|^2 / n_u + lambda |dx|^2 / n_x ]`.
pub fn loss_from_residuals(du: &DMatrix<f64>, dx: &DMatrix<f64>, lambda: f64) -> f64 {
    let b = du.ncols().max(1) as f64;
    (du.norm_squared() / du.nrows().max(1) as f64 + lambda * dx.norm_squared() / dx.nrows().max(1) as f64) / b
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    s: AdamSettings,
    m: Vec<Dense>,
    v: Vec<Dense>,
    t: i32,
}

impl Adam {
    pub fn new(params: &PolicyParams, s: AdamSettings) -> Self {
        let z: Vec<Dense> = params.layers.iter().map(|l| Dense::zeros(l.w.nrows(), l.w.ncols())).collect();
        Self { s, m: z.clone(), v: z, t: 0 }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grads: &[Dense]) {
        self.t += 1;
        let s = self.s;
        let c1 = 1.0 - s.beta1.powi(self.t);
        let c2 = 1.0 - s.beta2.powi(self.t);
        let upd = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
                v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
                p[i] -= s.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + s.eps);
            }
        };
        for (k, g) in grads.iter().enumerate() {
            let l = &mut params.layers[k];
            upd(l.w.as_mut_slice(), g.w.as_slice(), self.m[k].w.as_mut_slice(), self.v[k].w.as_mut_slice());
            upd(l.b.as_mut_slice(), g.b.as_slice(), self.m[k].b.as_mut_slice(), self.v[k].b.as_mut_slice());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_arch(use_image: bool) -> Architecture {
        Architecture {
            image_pixels: 4,
            image_hidden: 3,
            embedding: 2,
            use_image,
            reference_indices: vec![0, 1],
            fusion_hidden: 4,
            fusion_out: 3,
        }
    }

    fn batch(arch: &Architecture, b: usize, seed: u64) -> (Inputs, DMatrix<f64>, DMatrix<f64>) {
        let mut r = rng::stream(seed, &[]);
        let mut m = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0));
        (Inputs { image: m(arch.image_pixels, b), aux: m(arch.aux_len(), b) }, m(NU, b), m(NX, b))
    }

    #[test]
    fn zero_weights_give_head_bias() {
        let mut p = PolicyParams::zeros(tiny_arch(true), Normalization::identity());
        let k = p.layers.len() - 2;
        p.layers[k].b = DVector::from_column_slice(&[0.1, -0.2, 0.3]);
        let w = vec![State::from_element(1.0); 3];
        let (u, _) = p.forward(&[0.5; 4], &[0.2; 6], &w).unwrap();
        assert_eq!(u, Action::new(0.1, -0.2, 0.3));
        let p2 = PolicyParams::init(tiny_arch(true), Normalization::identity(), 3);
        assert_eq!(p2.forward(&[0.5; 4], &[0.2; 6], &w).unwrap(), p2.forward(&[0.5; 4], &[0.2; 6], &w).unwrap());
        assert!(p2.forward(&[0.5; 3], &[0.2; 6], &w).is_err());
    }

    #[test]
    fn loss_values() {
        let du = DMatrix::from_element(1, 1, 0.3);
        let dx = DMatrix::from_element(1, 1, -0.5);
        assert!((loss_from_residuals(&du, &dx, 0.1) - (0.09 + 0.1 * 0.25)).abs() < 1e-12);
        assert_eq!(loss_from_residuals(&DMatrix::zeros(3, 4), &DMatrix::zeros(8, 4), 0.1), 0.0);
        let du = DMatrix::from_element(3, 2, 0.2);
        assert!((loss_from_residuals(&du, &DMatrix::from_element(8, 2, 9.0), 0.0) - 0.04).abs() < 1e-15);
    }

    fn max_rel_grad_error(p: &PolicyParams, inp: &Inputs, tu: &DMatrix<f64>, tx: &DMatrix<f64>) -> f64 {
        let (_, g) = p.loss_and_grad(inp, tu, tx, 0.1);
        let ga: Vec<f64> = g.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>()).collect();
        let theta = p.flat();
        let mut q = p.clone();
        let mut worst: f64 = 0.0;
        for i in 0..theta.len() {
            let eps = 1e-5;
            let mut t = theta.clone();
            t[i] += eps;
            q.set_flat(&t).unwrap();
            let lp = q.loss(inp, tu, tx, 0.1);
            t[i] -= 2.0 * eps;
            q.set_flat(&t).unwrap();
            let lm = q.loss(inp, tu, tx, 0.1);
            let fd = (lp - lm) / (2.0 * eps);
            let err = (fd - ga[i]).abs() / (fd.abs().max(ga[i].abs()).max(1e-6));
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, img) in [(1, true), (2, false)] {
            let p = PolicyParams::init(tiny_arch(img), Normalization::identity(), seed);
            let (inp, tu, tx) = batch(&p.arch, 3, seed + 10);
            let e = max_rel_grad_error(&p, &inp, &tu, &tx);
            assert!(e < 1e-4, "{e}");
        }
    }

    #[test]
    fn binary_round_trip() {
        let p = PolicyParams::init(tiny_arch(true), Normalization::identity(), 4);
        let mut buf = Vec::new();
        p.write_binary(&mut buf, &serde_json::json!({"seed": 4})).unwrap();
        assert!(buf.starts_with(FORMAT_MAGIC));
        let (q, meta) = PolicyParams::read_binary(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(meta["seed"], 4);
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(PolicyParams::read_binary(bad.as_slice()).is_err());
        assert!(PolicyParams::read_binary(&buf[..buf.len() - 1]).is_err());
    }
}
