//! Procedural thoracic phantoms with known lobe, vessel and lesion masks.
//!
//! Each case is a pair of ellipsoidal lungs split into lobes by parallel
//! oblique planes, a random-walk vessel tree per lung, and lesions built from
//! unions of soft-edged anisotropic ellipsoids placed with a peripheral bias.
//! Lobe severity scores are derived from the exact lesion fractions and may be
//! perturbed by one level to mimic visual-scoring error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Interval;
use crate::volume::{Grid, LabelMap, Volume};

pub const HU_AIR: f32 = -990.0;
pub const HU_PARENCHYMA: f32 = -850.0;
pub const HU_GROUND_GLASS: f32 = -550.0;
pub const HU_CONSOLIDATION: f32 = -50.0;
pub const HU_VESSEL: f32 = 30.0;

/// Lesion subtype codes used in `lesion_map`.
pub const GROUND_GLASS: u8 = 1;
pub const CONSOLIDATION: u8 = 2;
pub const MIXED: u8 = 3;

/// Score bands: `(score, lower, upper)` lesion fraction per lobe.
pub const SEVERITY_BANDS: [(u8, f64, f64); 6] = [
    (0, 0.00, 0.00),
    (1, 0.01, 0.05),
    (2, 0.05, 0.25),
    (3, 0.25, 0.50),
    (4, 0.50, 0.75),
    (5, 0.75, 1.00),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub grid_size: usize,
    pub spacing_mm: f32,
    pub num_lobes: usize,
    /// Range from which each case's mean lobe lesion fraction is drawn.
    pub lesion_burden: [f64; 2],
    /// Probabilities of ground-glass, consolidation and mixed lesions.
    pub subtype_mix: [f64; 3],
    pub noise_sigma: f32,
    pub label_noise_prob: f64,
    /// Probability that a lobe is left lesion-free in a diseased case.
    pub healthy_lobe_prob: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid_size: 64,
            spacing_mm: 1.4,
            num_lobes: 5,
            lesion_burden: [0.0, 0.3],
            subtype_mix: [0.5, 0.2, 0.3],
            noise_sigma: 40.0,
            label_noise_prob: 0.0,
            healthy_lobe_prob: 0.2,
            seed: 7,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom: {m}")));
        if self.grid_size == 0 || self.grid_size % 8 != 0 {
            return bad("grid_size must be a positive multiple of 8");
        }
        if self.grid_size < 16 {
            return bad("grid_size must be at least 16");
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return bad("spacing_mm must be > 0");
        }
        if self.num_lobes == 0 || self.num_lobes > 10 {
            return bad("num_lobes must lie in 1..=10");
        }
        let [lo, hi] = self.lesion_burden;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("lesion_burden must be a sub-range of [0, 1]");
        }
        if self.subtype_mix.iter().any(|p| !(0.0..=1.0).contains(p))
            || (self.subtype_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("subtype_mix must be probabilities summing to 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0");
        }
        for (name, p) in [
            ("label_noise_prob", self.label_noise_prob),
            ("healthy_lobe_prob", self.healthy_lobe_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    fn spacing(&self) -> [f32; 3] {
        [self.spacing_mm; 3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityRecord {
    pub lobe_id: u8,
    pub true_fraction: f64,
    pub score: u8,
    pub interval: Interval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub image: Volume,
    pub lobe_map: LabelMap,
    pub lesion_map: LabelMap,
    pub vessel_map: LabelMap,
    pub severity: Vec<SeverityRecord>,
}

impl PhantomCase {
    pub fn lung_mask(&self) -> Vec<bool> {
        self.lobe_map.nonzero_mask()
    }

    /// Binary lesion mask (any subtype).
    pub fn lesion_mask(&self) -> Vec<bool> {
        self.lesion_map.nonzero_mask()
    }
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

/// Maps a lobe lesion fraction to its ordinal severity score. Band upper
/// edges are closed: 0.05 scores 1, 0.25 scores 2, and so on.
pub fn score_from_fraction(p: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("fraction {p} outside [0, 1]")));
    }
    Ok(match p {
        p if p == 0.0 => 0,
        p if p <= 0.05 => 1,
        p if p <= 0.25 => 2,
        p if p <= 0.50 => 3,
        p if p <= 0.75 => 4,
        _ => 5,
    })
}

pub fn interval_from_score(score: u8) -> Result<Interval> {
    SEVERITY_BANDS
        .iter()
        .find(|b| b.0 == score)
        .map(|&(_, lower, upper)| Interval { lower, upper })
        .ok_or_else(|| Error::Domain(format!("severity score {score} outside 0..=5")))
}

/// Fraction of the lobe's voxels that carry a nonzero lesion label.
pub fn true_fraction(lesion_map: &LabelMap, lobe_map: &LabelMap, lobe_id: u8) -> Result<f64> {
    lesion_map.ensure_aligned(lobe_map, "true_fraction")?;
    let mut lobe = 0usize;
    let mut hit = 0usize;
    for (&l, &o) in lesion_map.data().iter().zip(lobe_map.data()) {
        if o == lobe_id {
            lobe += 1;
            if l > 0 {
                hit += 1;
            }
        }
    }
    if lobe == 0 {
        return Err(Error::Domain(format!("lobe {lobe_id} is empty")));
    }
    Ok(hit as f64 / lobe as f64)
}

struct Lung {
    center: [f64; 3],
    radii: [f64; 3],
    lobes: usize,
    hilum: [f64; 3],
}

impl Lung {
    /// Normalized ellipsoid radius; < 1 inside.
    fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn jitter(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    1.0 + rng.gen_range(-scale..scale)
}

fn build_lungs(n: f64, num_lobes: usize, rng: &mut ChaCha8Rng) -> Vec<Lung> {
    if num_lobes == 1 {
        return vec![Lung {
            center: [0.5 * n, 0.5 * n, 0.5 * n],
            radii: [0.42 * n * jitter(rng, 0.05), 0.32 * n * jitter(rng, 0.05), 0.36 * n * jitter(rng, 0.05)],
            lobes: 1,
            hilum: [0.5 * n, 0.55 * n, 0.5 * n],
        }];
    }
    let right = num_lobes.div_ceil(2);
    let left = num_lobes - right;
    [(0.29, right, 0.42), (0.71, left, 0.58)]
        .into_iter()
        .filter(|&(_, lobes, _)| lobes > 0)
        .map(|(hc, lobes, hil)| Lung {
            center: [0.5 * n * jitter(rng, 0.03), 0.5 * n * jitter(rng, 0.03), hc * n],
            radii: [
                0.42 * n * jitter(rng, 0.05),
                0.32 * n * jitter(rng, 0.05),
                0.19 * n * jitter(rng, 0.05),
            ],
            lobes,
            hilum: [0.48 * n, 0.55 * n, hil * n],
        })
        .collect()
}

/// Assigns lobe labels by splitting each lung at equal-count quantiles of an
/// oblique coordinate.
fn build_lobes(dims: [usize; 3], spacing: [f32; 3], lungs: &[Lung], rng: &mut ChaCha8Rng) -> (LabelMap, Vec<u8>) {
    let mut lobe_map: LabelMap = Grid::new(dims, spacing);
    let mut lung_of = vec![0u8; lobe_map.len()];
    let mut next_label = 1u8;
    for (li, lung) in lungs.iter().enumerate() {
        let tilt = rng.gen_range(0.3..0.6);
        let mut coords: Vec<(f64, usize)> = Vec::new();
        for i in 0..lobe_map.len() {
            let c = lobe_map.coords(i);
            let p = [c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5];
            if lung.rho(p) < 1.0 && lung_of[i] == 0 {
                lung_of[i] = li as u8 + 1;
                coords.push((p[0] + tilt * (p[1] - lung.center[1]), i));
            }
        }
        coords.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let total = coords.len();
        for (rank, &(_, i)) in coords.iter().enumerate() {
            let piece = (rank * lung.lobes / total).min(lung.lobes - 1);
            lobe_map.data_mut()[i] = next_label + piece as u8;
        }
        next_label += lung.lobes as u8;
    }
    (lobe_map, lung_of)
}

/// Soft occupancy of a capsule of radius `r` around segment `a→b`.
fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab.iter().map(|v| v * v).sum::<f64>();
    let t = if len2 > 0.0 {
        (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3)
        .map(|k| (p[k] - a[k] - t * ab[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

struct Segment {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Random-walk vessel tree rooted at each lung's hilum.
fn grow_vessels(lungs: &[Lung], n: f64, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let mut segments = Vec::new();
    let step = (n / 16.0).max(2.0);
    for lung in lungs {
        let mut stack: Vec<([f64; 3], [f64; 3], f64, usize)> = Vec::new();
        let trunks = 5;
        for _ in 0..trunks {
            let dir = normalize({
                let u = random_unit(rng);
                // Point away from the hilum into the lung body.
                let out = [lung.center[0] - lung.hilum[0], 0.0, lung.center[2] - lung.hilum[2]];
                [u[0] + out[0] * 0.05, u[1] - 0.3, u[2] + out[2] * 0.1]
            });
            stack.push((lung.hilum, dir, rng.gen_range(2.2..3.0), 0));
        }
        while let Some((start, dir, radius, depth)) = stack.pop() {
            let mut pos = start;
            let mut dir = dir;
            let mut r = radius;
            for _ in 0..40 {
                let u = random_unit(rng);
                dir = normalize([dir[0] + 0.35 * u[0], dir[1] + 0.35 * u[1], dir[2] + 0.35 * u[2]]);
                let next = [pos[0] + step * dir[0], pos[1] + step * dir[1], pos[2] + step * dir[2]];
                if lung.rho(next) > 0.97 {
                    break;
                }
                segments.push(Segment { a: pos, b: next, radius: r });
                pos = next;
                r = (r * 0.93).max(1.0);
                if depth < 2 && r > 1.3 && rng.gen_bool(0.18) {
                    let side = random_unit(rng);
                    let child = normalize([dir[0] + side[0], dir[1] + side[1], dir[2] + side[2]]);
                    stack.push((pos, child, r * 0.75, depth + 1));
                }
            }
        }
    }
    segments
}

fn rotation_matrix(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let a = random_unit(rng);
    let mut b = random_unit(rng);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    b = normalize([b[0] - dot * a[0], b[1] - dot * a[1], b[2] - dot * a[2]]);
    let c = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    [a, b, c]
}

struct Blob {
    center: [f64; 3],
    axes: [[f64; 3]; 3],
    radii: [f64; 3],
    subtype: u8,
    contrast: f32,
}

impl Blob {
    /// Squared normalized ellipsoid radius.
    fn q(&self, p: [f64; 3]) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        (0..3)
            .map(|k| {
                let proj: f64 = (0..3).map(|j| self.axes[k][j] * d[j]).sum();
                (proj / self.radii[k]).powi(2)
            })
            .sum()
    }

    fn mean_radius(&self) -> f64 {
        (self.radii[0] * self.radii[1] * self.radii[2]).cbrt()
    }

    /// Soft membership in (0, 1); exactly 0.5 on the ellipsoid surface.
    fn weight(&self, p: [f64; 3]) -> f64 {
        let dist = (self.q(p).sqrt() - 1.0) * self.mean_radius();
        1.0 / (1.0 + (dist / 0.6).exp())
    }

    fn bbox(&self, dims: [usize; 3]) -> ([usize; 3], [usize; 3]) {
        let r = self.radii.iter().cloned().fold(0.0, f64::max) + 3.0;
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            lo[a] = (self.center[a] - r).floor().max(0.0) as usize;
            hi[a] = ((self.center[a] + r).ceil() as usize + 1).min(dims[a]);
        }
        (lo, hi)
    }
}

fn pick_subtype(mix: &[f64; 3], rng: &mut ChaCha8Rng) -> u8 {
    let u: f64 = rng.gen();
    if u < mix[0] {
        GROUND_GLASS
    } else if u < mix[0] + mix[1] {
        CONSOLIDATION
    } else {
        MIXED
    }
}

/// Per-lobe lesion fraction targets whose mean is the case burden.
fn lobe_targets(cfg: &PhantomConfig, burden: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cfg.num_lobes;
    if burden <= 0.0 {
        return vec![0.0; n];
    }
    let mut weights: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen_bool(cfg.healthy_lobe_prob) {
                0.0
            } else {
                let e: f64 = Exp1.sample(rng);
                0.25 + e
            }
        })
        .collect();
    if weights.iter().all(|&w| w == 0.0) {
        let k = rng.gen_range(0..n);
        weights[k] = 1.0;
    }
    let total: f64 = weights.iter().sum();
    weights
        .iter()
        .map(|w| (burden * n as f64 * w / total).min(0.9))
        .collect()
}

/// Generates one phantom; deterministic in `(config, case_index)`.
pub fn generate_case(config: &PhantomConfig, case_index: u64) -> Result<PhantomCase> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(case_index);

    let n = config.grid_size;
    let nf = n as f64;
    let dims = [n; 3];
    let spacing = config.spacing();
    let lungs = build_lungs(nf, config.num_lobes, &mut rng);
    let (lobe_map, lung_of) = build_lobes(dims, spacing, &lungs, &mut rng);
    let total = lobe_map.len();
    let center_of = |i: usize| {
        let c = lobe_map.coords(i);
        [c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5]
    };

    // Vessels: hard mask for dist <= r, soft occupancy for the image.
    let segments = grow_vessels(&lungs, nf, &mut rng);
    let mut vessel_occ = vec![0f32; total];
    let mut vessel_map: LabelMap = Grid::new(dims, spacing);
    for seg in &segments {
        let r = seg.radius + 1.5;
        let lo: Vec<usize> = (0..3)
            .map(|a| (seg.a[a].min(seg.b[a]) - r).floor().max(0.0) as usize)
            .collect();
        let hi: Vec<usize> = (0..3)
            .map(|a| ((seg.a[a].max(seg.b[a]) + r).ceil() as usize + 1).min(n))
            .collect();
        for d in lo[0]..hi[0] {
            for w in lo[1]..hi[1] {
                for h in lo[2]..hi[2] {
                    let i = lobe_map.index(d, w, h);
                    if lobe_map.data()[i] == 0 {
                        continue;
                    }
                    let p = [d as f64 + 0.5, w as f64 + 0.5, h as f64 + 0.5];
                    let dist = segment_distance(p, seg.a, seg.b);
                    let occ = (seg.radius + 0.5 - dist).clamp(0.0, 1.0) as f32;
                    vessel_occ[i] = vessel_occ[i].max(occ);
                    if dist <= seg.radius {
                        vessel_map.data_mut()[i] = 1;
                    }
                }
            }
        }
    }

    // Lesions.
    let burden = if config.lesion_burden[1] > config.lesion_burden[0] {
        rng.gen_range(config.lesion_burden[0]..config.lesion_burden[1])
    } else {
        config.lesion_burden[0]
    };
    let targets = lobe_targets(config, burden, &mut rng);
    let mut lesion_map: LabelMap = Grid::new(dims, spacing);
    let mut lesion_weight = vec![0f32; total];
    let mut lesion_hu = vec![HU_PARENCHYMA; total];
    let lobe_ids = lobe_map.labels();
    let mut lobe_voxels: Vec<Vec<usize>> = vec![Vec::new(); lobe_ids.len()];
    for i in 0..total {
        let l = lobe_map.data()[i];
        if l > 0 {
            lobe_voxels[(l - 1) as usize].push(i);
        }
    }
    for (li, &target) in targets.iter().enumerate() {
        let lobe_id = li as u8 + 1;
        let voxels = &lobe_voxels[li];
        if target <= 0.0 || voxels.is_empty() {
            continue;
        }
        let lung = &lungs[(lung_of[voxels[0]] - 1) as usize];
        let lobe_size = voxels.len() as f64;
        let mut count = 0usize;
        for _ in 0..400 {
            let frac = count as f64 / lobe_size;
            if frac >= target {
                break;
            }
            // Peripheral bias: best of four candidates by distance to pleura.
            let center = (0..4)
                .map(|_| center_of(voxels[rng.gen_range(0..voxels.len())]))
                .max_by(|a, b| lung.rho(*a).total_cmp(&lung.rho(*b)))
                .expect("four samples");
            let remaining = (target - frac) * lobe_size;
            let r_cap = (remaining * 1.2 / (4.0 / 3.0 * std::f64::consts::PI)).cbrt();
            let r_nominal = rng.gen_range(3.0..(nf / 6.0).max(4.0));
            let r0 = r_nominal.min(r_cap).max(2.5);
            let radii = [r0 * jitter(&mut rng, 0.35), r0 * jitter(&mut rng, 0.35), r0 * jitter(&mut rng, 0.35)];
            let subtype = pick_subtype(&config.subtype_mix, &mut rng);
            let blob = Blob {
                center,
                axes: rotation_matrix(&mut rng),
                radii,
                subtype,
                contrast: rng.gen_range(-40.0..40.0),
            };
            let (lo, hi) = blob.bbox(dims);
            for d in lo[0]..hi[0] {
                for w in lo[1]..hi[1] {
                    for h in lo[2]..hi[2] {
                        let i = lobe_map.index(d, w, h);
                        if lobe_map.data()[i] != lobe_id {
                            continue;
                        }
                        let p = [d as f64 + 0.5, w as f64 + 0.5, h as f64 + 0.5];
                        let wgt = blob.weight(p) as f32;
                        let hu = match blob.subtype {
                            GROUND_GLASS => HU_GROUND_GLASS + blob.contrast,
                            CONSOLIDATION => HU_CONSOLIDATION + blob.contrast,
                            _ => {
                                let core = (1.0 - blob.q(p) / 0.45).clamp(0.0, 1.0) as f32;
                                HU_GROUND_GLASS + blob.contrast + core * (HU_CONSOLIDATION - HU_GROUND_GLASS)
                            }
                        };
                        let contribution = wgt * (hu - HU_PARENCHYMA);
                        if contribution > lesion_weight[i] * (lesion_hu[i] - HU_PARENCHYMA) {
                            lesion_weight[i] = wgt;
                            lesion_hu[i] = hu;
                        }
                        if wgt >= 0.5 && vessel_map.data()[i] == 0 {
                            if lesion_map.data()[i] == 0 {
                                count += 1;
                                lesion_map.data_mut()[i] = blob.subtype;
                            } else if lesion_map.data()[i] != blob.subtype {
                                lesion_map.data_mut()[i] = MIXED;
                            }
                        }
                    }
                }
            }
        }
    }

    // Image: smooth parenchymal texture, lesions, vessels, then noise.
    let texture = smooth_field(dims, &mut rng, 3.0);
    let noise = Normal::new(0.0f32, config.noise_sigma.max(0.0)).expect("finite sigma");
    let mut image: Volume = Grid::new(dims, spacing);
    for i in 0..total {
        let inside = lobe_map.data()[i] > 0;
        let mut v = if inside {
            let base = HU_PARENCHYMA + 25.0 * texture[i];
            base + lesion_weight[i] * (lesion_hu[i] - base)
        } else {
            HU_AIR
        };
        if inside {
            v += vessel_occ[i] * (HU_VESSEL - v);
        }
        if config.noise_sigma > 0.0 {
            v += noise.sample(&mut rng);
        }
        image.data_mut()[i] = v;
    }

    let mut severity = Vec::with_capacity(lobe_ids.len());
    for &lobe_id in &lobe_ids {
        let tf = true_fraction(&lesion_map, &lobe_map, lobe_id)?;
        let mut score = score_from_fraction(tf)?;
        if config.label_noise_prob > 0.0 && rng.gen_bool(config.label_noise_prob) {
            score = if rng.gen_bool(0.5) {
                score.saturating_sub(1)
            } else {
                (score + 1).min(5)
            };
        }
        severity.push(SeverityRecord {
            lobe_id,
            true_fraction: tf,
            score,
            interval: interval_from_score(score)?,
        });
    }

    Ok(PhantomCase {
        image,
        lobe_map,
        lesion_map,
        vessel_map,
        severity,
    })
}

/// Unit-variance-ish low-frequency field from box-blurred white noise.
fn smooth_field(dims: [usize; 3], rng: &mut ChaCha8Rng, width: f64) -> Vec<f32> {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut field: Vec<f32> = (0..dims[0] * dims[1] * dims[2]).map(|_| normal.sample(rng)).collect();
    let r = width.round().max(1.0) as isize;
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let mut out = vec![0f32; field.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let coord = (i / strides[axis]) % dims[axis];
            let mut s = 0.0;
            let mut cnt = 0.0;
            for k in -r..=r {
                let c = coord as isize + k;
                if c >= 0 && c < dims[axis] as isize {
                    s += field[(i as isize + k * strides[axis] as isize) as usize];
                    cnt += 1.0;
                }
            }
            *o = s / cnt;
        }
        field = out;
    }
    let var = field.iter().map(|v| v * v).sum::<f32>() / field.len() as f32;
    let sd = var.sqrt().max(1e-6);
    field.iter().map(|v| v / sd).collect()
}
