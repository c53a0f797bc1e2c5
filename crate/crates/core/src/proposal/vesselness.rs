//! Multiscale Hessian vesselness for bright tubular structures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VesselnessConfig {
    /// Gaussian scales in millimetres.
    pub scales_mm: Vec<f64>,
    /// Plate-versus-line sensitivity.
    pub alpha: f64,
    /// Blob sensitivity.
    pub beta_blob: f64,
    /// Structureness normalisation.
    pub gamma: f64,
    /// Cut-off on the max-over-scales response for the vessel mask.
    pub response_threshold: f64,
}

impl Default for VesselnessConfig {
    fn default() -> Self {
        Self {
            scales_mm: vec![0.8, 1.0, 1.5, 2.0, 4.0],
            alpha: 0.5,
            beta_blob: 0.5,
            gamma: 15.0,
            response_threshold: 0.05,
        }
    }
}

impl VesselnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales_mm.is_empty() || self.scales_mm.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("vesselness scales must be positive".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta_blob", self.beta_blob), ("gamma", self.gamma)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("vesselness {name} must be > 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.response_threshold) {
            return Err(Error::Config("response_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Sampled Gaussian derivative kernels (orders 0, 1, 2) for correlation,
/// moment-corrected so they are exact on polynomials up to degree two.
fn derivative_kernels(sigma_mm: f64, spacing_mm: f64) -> [Vec<f64>; 3] {
    let radius = ((3.0 * sigma_mm / spacing_mm).ceil() as isize).max(1);
    let xs: Vec<f64> = (-radius..=radius).map(|i| i as f64 * spacing_mm).collect();
    let g: Vec<f64> = xs.iter().map(|x| (-x * x / (2.0 * sigma_mm * sigma_mm)).exp()).collect();
    let gs: f64 = g.iter().sum();
    let k0: Vec<f64> = g.iter().map(|v| v / gs).collect();

    let raw1: Vec<f64> = xs.iter().zip(&g).map(|(x, v)| x * v).collect();
    let m1: f64 = raw1.iter().zip(&xs).map(|(k, x)| k * x).sum();
    let k1: Vec<f64> = raw1.iter().map(|k| k / m1).collect();

    let raw2: Vec<f64> = xs
        .iter()
        .zip(&g)
        .map(|(x, v)| (x * x / (sigma_mm * sigma_mm) - 1.0) * v)
        .collect();
    let mean_shift: f64 = raw2.iter().sum::<f64>();
    let zero_sum: Vec<f64> = raw2.iter().zip(&k0).map(|(r, k)| r - mean_shift * k).collect();
    let m2: f64 = zero_sum.iter().zip(&xs).map(|(k, x)| k * x * x / 2.0).sum();
    let k2: Vec<f64> = zero_sum.iter().map(|k| k / m2).collect();
    [k0, k1, k2]
}

/// Correlates `data` with `kernel` along `axis`, replicating border values.
fn filter_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let n = dims[axis] as isize;
    let stride = strides[axis] as isize;
    let mut out = vec![0.0; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let coord = ((i / strides[axis]) % dims[axis]) as isize;
        let base = i as isize - coord * stride;
        let mut s = 0.0;
        for (j, &k) in kernel.iter().enumerate() {
            let c = (coord + j as isize - r).clamp(0, n - 1);
            s += k * data[(base + c * stride) as usize];
        }
        *o = s;
    }
    out
}

/// Eigenvalues of a symmetric 3×3 matrix, unsorted.
pub fn symmetric_eigenvalues(a11: f64, a22: f64, a33: f64, a12: f64, a13: f64, a23: f64) -> [f64; 3] {
    let p1 = a12 * a12 + a13 * a13 + a23 * a23;
    if p1 == 0.0 {
        return [a11, a22, a33];
    }
    let q = (a11 + a22 + a33) / 3.0;
    let p2 = (a11 - q).powi(2) + (a22 - q).powi(2) + (a33 - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let (b11, b22, b33) = ((a11 - q) / p, (a22 - q) / p, (a33 - q) / p);
    let (b12, b13, b23) = (a12 / p, a13 / p, a23 / p);
    let det = b11 * (b22 * b33 - b23 * b23) - b12 * (b12 * b33 - b23 * b13) + b13 * (b12 * b23 - b22 * b13);
    let r = (det / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

/// Bright-tube response from eigenvalues sorted `|λ1| <= |λ2| <= |λ3|`.
pub fn tube_response(l1: f64, l2: f64, l3: f64, cfg: &VesselnessConfig) -> f64 {
    if l2 >= 0.0 || l3 >= 0.0 {
        return 0.0;
    }
    let ra = l2.abs() / l3.abs();
    let rb = l1.abs() / (l2.abs() * l3.abs()).sqrt();
    let s2 = l1 * l1 + l2 * l2 + l3 * l3;
    let a = 1.0 - (-ra * ra / (2.0 * cfg.alpha * cfg.alpha)).exp();
    let b = (-rb * rb / (2.0 * cfg.beta_blob * cfg.beta_blob)).exp();
    let c = 1.0 - (-s2 / (2.0 * cfg.gamma * cfg.gamma)).exp();
    (a * b * c).clamp(0.0, 1.0)
}

/// Max-over-scales vesselness in `[0, 1]`, computed from scale-normalized
/// (`σ²`-weighted) Gaussian second derivatives in millimetre units.
pub fn hessian_vesselness(image: &Volume, cfg: &VesselnessConfig) -> Result<Volume> {
    cfg.validate()?;
    let dims = image.dims();
    let spacing = image.spacing();
    if spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Domain("image spacing must be positive".into()));
    }
    let data: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    let mut best = vec![0.0f64; data.len()];
    for &sigma in &cfg.scales_mm {
        let k: Vec<[Vec<f64>; 3]> = (0..3).map(|a| derivative_kernels(sigma, spacing[a] as f64)).collect();
        let along_d: Vec<Vec<f64>> = (0..3).map(|o| filter_axis(&data, dims, 0, &k[0][o])).collect();
        let sep = |od: usize, ow: usize, oh: usize| {
            let t = filter_axis(&along_d[od], dims, 1, &k[1][ow]);
            filter_axis(&t, dims, 2, &k[2][oh])
        };
        let norm = sigma * sigma;
        let hdd = sep(2, 0, 0);
        let hww = sep(0, 2, 0);
        let hhh = sep(0, 0, 2);
        let hdw = sep(1, 1, 0);
        let hdh = sep(1, 0, 1);
        let hwh = sep(0, 1, 1);
        for i in 0..data.len() {
            let mut ev = symmetric_eigenvalues(
                norm * hdd[i],
                norm * hww[i],
                norm * hhh[i],
                norm * hdw[i],
                norm * hdh[i],
                norm * hwh[i],
            );
            ev.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
            let v = tube_response(ev[0], ev[1], ev[2], cfg);
            if v > best[i] {
                best[i] = v;
            }
        }
    }
    Grid::from_vec(dims, spacing, best.into_iter().map(|v| v as f32).collect())
}

/// Test shapes for checking tube selectivity: a background at `base` with a
/// bright structure `contrast` above it, centred in an `n`³ grid.
pub mod shapes {
    use crate::volume::{Grid, Volume};

    fn render(n: usize, spacing: f32, base: f32, contrast: f32, inside: impl Fn([f64; 3]) -> bool) -> Volume {
        let c = n as f64 / 2.0;
        Grid::from_fn([n; 3], [spacing; 3], |d, w, h| {
            let p = [d as f64 + 0.5 - c, w as f64 + 0.5 - c, h as f64 + 0.5 - c];
            if inside(p) {
                base + contrast
            } else {
                base
            }
        })
    }

    /// Cylinder along the last axis with the given radius in voxels.
    pub fn cylinder(n: usize, spacing: f32, radius: f64, base: f32, contrast: f32) -> Volume {
        render(n, spacing, base, contrast, |p| p[0] * p[0] + p[1] * p[1] <= radius * radius)
    }

    pub fn sphere(n: usize, spacing: f32, radius: f64, base: f32, contrast: f32) -> Volume {
        render(n, spacing, base, contrast, |p| p.iter().map(|x| x * x).sum::<f64>() <= radius * radius)
    }

    /// Slab normal to the first axis, `thickness` voxels thick.
    pub fn plate(n: usize, spacing: f32, thickness: usize, base: f32, contrast: f32) -> Volume {
        let half = thickness as f64 / 2.0;
        render(n, spacing, base, contrast, |p| p[0].abs() < half)
    }
}
