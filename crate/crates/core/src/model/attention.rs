//! Local-affinity attention: each voxel's class distribution is replaced by
//! an affinity-weighted average of its 18 face/edge neighbours, computed in
//! a learned low-dimensional projection.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{conv3d_backward, conv3d_forward, resize_trilinear, resize_trilinear_backward, Param, Real, Tensor};

pub const NUM_NEIGHBORS: usize = 18;

/// Below this total mass a refined voxel falls back to the uniform
/// distribution.
pub const RENORM_EPS: f64 = 1e-12;

/// Offsets in `{-1, 0, 1}³` with one or two nonzero coordinates, in
/// lexicographic order.
pub fn neighbor_offsets() -> [[isize; 3]; NUM_NEIGHBORS] {
    let mut out = [[0isize; 3]; NUM_NEIGHBORS];
    let mut k = 0;
    for d in -1..=1isize {
        for w in -1..=1isize {
            for h in -1..=1isize {
                let nz = (d != 0) as usize + (w != 0) as usize + (h != 0) as usize;
                if nz == 1 || nz == 2 {
                    out[k] = [d, w, h];
                    k += 1;
                }
            }
        }
    }
    out
}

/// Flat neighbour index of voxel `i` for every offset, or `None` when the
/// neighbour falls outside the grid.
fn neighbor_table(dims: [usize; 3]) -> Vec<Option<u32>> {
    let offsets = neighbor_offsets();
    let n = dims[0] * dims[1] * dims[2];
    let mut out = Vec::with_capacity(n * NUM_NEIGHBORS);
    for d in 0..dims[0] {
        for w in 0..dims[1] {
            for h in 0..dims[2] {
                for o in &offsets {
                    let c = [d as isize + o[0], w as isize + o[1], h as isize + o[2]];
                    let inside = (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < dims[a]);
                    out.push(inside.then(|| ((c[0] as usize * dims[1] + c[1] as usize) * dims[2] + c[2] as usize) as u32));
                }
            }
        }
    }
    out
}

/// Per-voxel normalized affinities over the 18-neighbourhood.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    pub dims: [usize; 3],
    /// Voxel-major, `N × 18`; exactly zero at invalid neighbours.
    pub weights: Vec<T>,
    /// Voxel-major, `N × 18`.
    pub validity: Vec<bool>,
    neighbors: Vec<Option<u32>>,
}

impl<T: Real> AttentionMap<T> {
    pub fn neighbor_offsets(&self) -> [[isize; 3]; NUM_NEIGHBORS] {
        neighbor_offsets()
    }

    pub fn weight(&self, voxel: usize, k: usize) -> T {
        self.weights[voxel * NUM_NEIGHBORS + k]
    }

    /// Uniform weights over the valid neighbours of every voxel.
    pub fn uniform(dims: [usize; 3]) -> Self {
        let neighbors = neighbor_table(dims);
        let validity: Vec<bool> = neighbors.iter().map(Option::is_some).collect();
        let mut weights = vec![T::ZERO; validity.len()];
        for (wv, vv) in weights.chunks_mut(NUM_NEIGHBORS).zip(validity.chunks(NUM_NEIGHBORS)) {
            let count = vv.iter().filter(|&&b| b).count();
            for (w, &v) in wv.iter_mut().zip(vv) {
                if v {
                    *w = T::ONE / T::from_f64(count as f64);
                }
            }
        }
        Self {
            dims,
            weights,
            validity,
            neighbors,
        }
    }
}

/// Projected embeddings and raw scores kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AffinityCache<T> {
    pub theta_x: Tensor<T>,
    pub phi_x: Tensor<T>,
    /// Raw dot products `⟨θx_i, φx_j⟩`, zero at invalid neighbours.
    pub scores: Vec<T>,
}

/// Gated embedded-Gaussian affinities `exp(max(⟨θx_i, φx_j⟩, 0))`,
/// normalized over each voxel's valid neighbours.
///
/// `w_theta` and `w_phi` are row-major `l × channels(x)`.
pub fn compute_affinities<T: Real>(
    x: &Tensor<T>,
    w_theta: &[T],
    w_phi: &[T],
    l: usize,
) -> Result<(AttentionMap<T>, AffinityCache<T>)> {
    if w_theta.len() != l * x.channels() || w_phi.len() != l * x.channels() {
        return Err(Error::Shape(format!(
            "projection weights must be {l}x{} for the attention input",
            x.channels()
        )));
    }
    let theta_x = conv3d_forward(x, w_theta, None, l, 1);
    let phi_x = conv3d_forward(x, w_phi, None, l, 1);
    let dims = x.dims();
    let n = x.voxels();
    let neighbors = neighbor_table(dims);
    let mut scores = vec![T::ZERO; n * NUM_NEIGHBORS];
    let (th, ph) = (theta_x.data(), phi_x.data());
    for c in 0..l {
        let tc = &th[c * n..(c + 1) * n];
        let pc = &ph[c * n..(c + 1) * n];
        for i in 0..n {
            let ti = tc[i];
            for k in 0..NUM_NEIGHBORS {
                if let Some(j) = neighbors[i * NUM_NEIGHBORS + k] {
                    scores[i * NUM_NEIGHBORS + k] += ti * pc[j as usize];
                }
            }
        }
    }
    let mut weights = vec![T::ZERO; n * NUM_NEIGHBORS];
    for i in 0..n {
        let row = i * NUM_NEIGHBORS..(i + 1) * NUM_NEIGHBORS;
        // Softmax over the gated logits max(s, 0), shifted for stability.
        let mut m = T::ZERO;
        for k in row.clone() {
            if neighbors[k].is_some() {
                m = m.max(scores[k].max(T::ZERO));
            }
        }
        let mut total = T::ZERO;
        for k in row.clone() {
            if neighbors[k].is_some() {
                let e = (scores[k].max(T::ZERO) - m).exp();
                weights[k] = e;
                total += e;
            }
        }
        for k in row {
            weights[k] /= total;
        }
    }
    let validity = neighbors.iter().map(Option::is_some).collect();
    Ok((
        AttentionMap {
            dims,
            weights,
            validity,
            neighbors,
        },
        AffinityCache { theta_x, phi_x, scores },
    ))
}

/// Affinity-weighted neighbour sum in the projected space, mapped back:
/// `v_i = r(Σ_j A_ij · g(y_j))`, before renormalization.
///
/// `g` is row-major `l × C`, `r` is `C × l`.
pub fn attention_aggregate<T: Real>(y: &Tensor<T>, map: &AttentionMap<T>, g: &[T], r: &[T]) -> Result<Tensor<T>> {
    Ok(aggregate_parts(y, map, g, r)?.2)
}

fn aggregate_parts<T: Real>(
    y: &Tensor<T>,
    map: &AttentionMap<T>,
    g: &[T],
    r: &[T],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if y.dims() != map.dims {
        return Err(Error::Shape(format!("map dims {:?} vs attention {:?}", y.dims(), map.dims)));
    }
    let c = y.channels();
    if g.len() % c != 0 || r.len() != g.len() {
        return Err(Error::Shape("g must be l x C and r must be C x l".into()));
    }
    let l = g.len() / c;
    let gy = conv3d_forward(y, g, None, l, 1);
    let n = y.voxels();
    let mut z = Tensor::zeros(l, y.dims());
    {
        let (gs, zs) = (gy.data(), z.data_mut());
        for ch in 0..l {
            let src = &gs[ch * n..(ch + 1) * n];
            let dst = &mut zs[ch * n..(ch + 1) * n];
            for (i, out) in dst.iter_mut().enumerate() {
                let mut s = T::ZERO;
                for k in 0..NUM_NEIGHBORS {
                    if let Some(j) = map.neighbors[i * NUM_NEIGHBORS + k] {
                        s += map.weights[i * NUM_NEIGHBORS + k] * src[j as usize];
                    }
                }
                *out = s;
            }
        }
    }
    let v = conv3d_forward(&z, r, None, c, 1);
    Ok((gy, z, v))
}

/// Projects each voxel back onto the probability simplex:
/// `relu(v) / Σ relu(v)`, uniform where the mass vanishes.
pub fn renormalize<T: Real>(v: &Tensor<T>) -> Tensor<T> {
    let c = v.channels();
    let n = v.voxels();
    let mut out = Tensor::zeros(c, v.dims());
    let (src, dst) = (v.data(), out.data_mut());
    for i in 0..n {
        let s: f64 = (0..c).map(|k| src[k * n + i].max(T::ZERO).to_f64()).sum();
        for k in 0..c {
            dst[k * n + i] = if s < RENORM_EPS {
                T::from_f64(1.0 / c as f64)
            } else {
                T::from_f64(src[k * n + i].max(T::ZERO).to_f64() / s)
            };
        }
    }
    out
}

fn renormalize_backward<T: Real>(v: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    let c = v.channels();
    let n = v.voxels();
    let mut dv = Tensor::zeros(c, v.dims());
    let (src, g, dst) = (v.data(), d_out.data(), dv.data_mut());
    for i in 0..n {
        let s: T = (0..c).map(|k| src[k * n + i].max(T::ZERO)).sum();
        if s.to_f64() < RENORM_EPS {
            continue;
        }
        // out_k = relu(v_k)/s;  d out_k / d v_m = 1[v_m>0] (δ_km/s − relu(v_k)/s²)
        let dot: T = (0..c).map(|k| g[k * n + i] * src[k * n + i].max(T::ZERO)).sum();
        for m in 0..c {
            if src[m * n + i] > T::ZERO {
                dst[m * n + i] = (g[m * n + i] - dot / s) / s;
            }
        }
    }
    dv
}

/// Refined map: [`attention_aggregate`] followed by [`renormalize`].
pub fn attention_refine<T: Real>(y: &Tensor<T>, map: &AttentionMap<T>, g: &[T], r: &[T]) -> Result<Tensor<T>> {
    Ok(renormalize(&attention_aggregate(y, map, g, r)?))
}

/// Concatenates the chunk with `l`-channel squeezes of `enc1` and of
/// `enc2` (resized to chunk dims): `1 + 2l` channels.
pub fn build_attention_input<T: Real>(
    chunk: &Tensor<T>,
    enc1: &Tensor<T>,
    enc2: &Tensor<T>,
    squeeze1: &[T],
    squeeze2: &[T],
    l: usize,
) -> Result<Tensor<T>> {
    Ok(attention_input_parts(chunk, enc1, enc2, squeeze1, squeeze2, l)?.0)
}

fn attention_input_parts<T: Real>(
    chunk: &Tensor<T>,
    enc1: &Tensor<T>,
    enc2: &Tensor<T>,
    squeeze1: &[T],
    squeeze2: &[T],
    l: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if enc1.dims() != chunk.dims() {
        return Err(Error::Shape("enc1 must match chunk dims".into()));
    }
    if squeeze1.len() != l * enc1.channels() || squeeze2.len() != l * enc2.channels() {
        return Err(Error::Shape("squeeze weights do not match encoder widths".into()));
    }
    let s1 = conv3d_forward(enc1, squeeze1, None, l, 1);
    let s2_small = conv3d_forward(enc2, squeeze2, None, l, 1);
    let s2 = resize_trilinear(&s2_small, chunk.dims());
    Ok((Tensor::concat(&[chunk, &s1, &s2])?, s2_small))
}

/// Trainable attention parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub l: usize,
    /// `l × F0`
    pub squeeze1: Param<T>,
    /// `l × 2F0`
    pub squeeze2: Param<T>,
    /// `l × (1 + 2l)`
    pub theta: Param<T>,
    /// `l × (1 + 2l)`
    pub phi: Param<T>,
    /// `l × C`
    pub g: Param<T>,
    /// `C × l`
    pub r: Param<T>,
}

pub struct AttentionForward<T> {
    pub input: Tensor<T>,
    pub map: AttentionMap<T>,
    pub cache: AffinityCache<T>,
    pub refined: Tensor<T>,
    y: Tensor<T>,
    gy: Tensor<T>,
    z: Tensor<T>,
    v: Tensor<T>,
}

impl<T: Real> Attention<T> {
    /// Random projections; `g` gets orthonormal columns and `r = gᵀ`, so the
    /// module starts as pure affinity-weighted smoothing of the input map.
    pub fn new(l: usize, f0: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if l < classes {
            return Err(Error::Config(format!(
                "attention_dim {l} must be >= the {classes} classes for an invertible projection"
            )));
        }
        let cx = 1 + 2 * l;
        let mut g = Param::zeros("attention.g", &[l, classes]);
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < classes {
            let mut v: Vec<f64> = (0..l).map(|_| StandardNormal.sample(rng)).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                cols.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        let mut r = Param::zeros("attention.r", &[classes, l]);
        for (c, col) in cols.iter().enumerate() {
            for (row, &val) in col.iter().enumerate() {
                g.value[row * classes + c] = T::from_f64(val);
                r.value[c * l + row] = T::from_f64(val);
            }
        }
        Ok(Self {
            l,
            squeeze1: Param::he_normal("attention.squeeze1", &[l, f0], f0, rng),
            squeeze2: Param::he_normal("attention.squeeze2", &[l, 2 * f0], 2 * f0, rng),
            theta: Param::he_normal("attention.theta", &[l, cx], cx, rng),
            phi: Param::he_normal("attention.phi", &[l, cx], cx, rng),
            g,
            r,
        })
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.squeeze1, &self.squeeze2, &self.theta, &self.phi, &self.g, &self.r]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.squeeze1,
            &mut self.squeeze2,
            &mut self.theta,
            &mut self.phi,
            &mut self.g,
            &mut self.r,
        ]
    }

    /// Refines `y`; the encoder features are treated as constants.
    pub fn forward(&self, chunk: &Tensor<T>, enc1: &Tensor<T>, enc2: &Tensor<T>, y: &Tensor<T>) -> Result<AttentionForward<T>> {
        let (input, _) = attention_input_parts(chunk, enc1, enc2, &self.squeeze1.value, &self.squeeze2.value, self.l)?;
        let (map, cache) = compute_affinities(&input, &self.theta.value, &self.phi.value, self.l)?;
        let (gy, z, v) = aggregate_parts(y, &map, &self.g.value, &self.r.value)?;
        let refined = renormalize(&v);
        Ok(AttentionForward {
            input,
            map,
            cache,
            refined,
            y: y.clone(),
            gy,
            z,
            v,
        })
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `y`.
    /// No gradient is produced for the chunk or the encoder features.
    pub fn backward(&mut self, fwd: &AttentionForward<T>, enc1: &Tensor<T>, enc2: &Tensor<T>, d_refined: &Tensor<T>) -> Tensor<T> {
        let l = self.l;
        let n = fwd.y.voxels();
        let dims = fwd.y.dims();
        let map = &fwd.map;

        let dv = renormalize_backward(&fwd.v, d_refined);
        let dz = conv3d_backward(&fwd.z, &self.r.value, &dv, 1, &mut self.r.grad, None, true).expect("dx requested");

        // Z_i = Σ_k A_ik G_j  →  dA_ik = ⟨dZ_i, G_j⟩,  dG_j += A_ik dZ_i
        let mut d_a = vec![T::ZERO; n * NUM_NEIGHBORS];
        let mut d_gy = Tensor::zeros(l, dims);
        {
            let (gs, dzs, dgs) = (fwd.gy.data(), dz.data(), d_gy.data_mut());
            for ch in 0..l {
                let g_c = &gs[ch * n..(ch + 1) * n];
                let dz_c = &dzs[ch * n..(ch + 1) * n];
                let dg_c = &mut dgs[ch * n..(ch + 1) * n];
                for i in 0..n {
                    let dzi = dz_c[i];
                    for k in 0..NUM_NEIGHBORS {
                        if let Some(j) = map.neighbors[i * NUM_NEIGHBORS + k] {
                            let j = j as usize;
                            d_a[i * NUM_NEIGHBORS + k] += dzi * g_c[j];
                            dg_c[j] += map.weights[i * NUM_NEIGHBORS + k] * dzi;
                        }
                    }
                }
            }
        }
        let dy = conv3d_backward(&fwd.y, &self.g.value, &d_gy, 1, &mut self.g.grad, None, true).expect("dx requested");

        // Softmax over gated logits u = max(s, 0).
        let mut d_s = vec![T::ZERO; n * NUM_NEIGHBORS];
        for i in 0..n {
            let row = i * NUM_NEIGHBORS..(i + 1) * NUM_NEIGHBORS;
            let dot: T = row.clone().map(|k| map.weights[k] * d_a[k]).sum();
            for k in row {
                if map.validity[k] && fwd.cache.scores[k] > T::ZERO {
                    d_s[k] = map.weights[k] * (d_a[k] - dot);
                }
            }
        }

        // s_ik = ⟨Θ_i, Φ_j⟩
        let mut d_theta_x = Tensor::zeros(l, dims);
        let mut d_phi_x = Tensor::zeros(l, dims);
        {
            let (th, ph) = (fwd.cache.theta_x.data(), fwd.cache.phi_x.data());
            let (dth, dph) = (d_theta_x.data_mut(), d_phi_x.data_mut());
            for ch in 0..l {
                let off = ch * n;
                for i in 0..n {
                    for k in 0..NUM_NEIGHBORS {
                        let ds = d_s[i * NUM_NEIGHBORS + k];
                        if ds == T::ZERO {
                            continue;
                        }
                        if let Some(j) = map.neighbors[i * NUM_NEIGHBORS + k] {
                            let j = j as usize;
                            dth[off + i] += ds * ph[off + j];
                            dph[off + j] += ds * th[off + i];
                        }
                    }
                }
            }
        }
        let mut dx = conv3d_backward(&fwd.input, &self.theta.value, &d_theta_x, 1, &mut self.theta.grad, None, true)
            .expect("dx requested");
        let dx_phi = conv3d_backward(&fwd.input, &self.phi.value, &d_phi_x, 1, &mut self.phi.grad, None, true)
            .expect("dx requested");
        dx.add_assign(&dx_phi);

        let parts = dx.split(&[1, l, l]);
        conv3d_backward(enc1, &self.squeeze1.value, &parts[1], 1, &mut self.squeeze1.grad, None, false);
        let d_s2_small = resize_trilinear_backward(&parts[2], enc2.dims());
        conv3d_backward(enc2, &self.squeeze2.value, &d_s2_small, 1, &mut self.squeeze2.grad, None, false);
        dy
    }

    pub fn cast<U: Real>(&self) -> Attention<U> {
        Attention {
            l: self.l,
            squeeze1: self.squeeze1.cast(),
            squeeze2: self.squeeze2.cast(),
            theta: self.theta.cast(),
            phi: self.phi.cast(),
            g: self.g.cast(),
            r: self.r.cast(),
        }
    }
}
