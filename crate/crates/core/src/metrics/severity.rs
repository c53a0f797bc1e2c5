//! Lobe severity agreement: accuracy, confusion matrix and linearly
//! weighted kappa with a bootstrap confidence interval.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::phantom::{score_from_fraction, SeverityRecord};
use crate::volume::LabelMap;

pub const NUM_SCORES: usize = 6;
pub const BOOTSTRAP_RESAMPLES: usize = 2000;

/// Lobe counts indexed `[predicted score][target score]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_SCORES]; NUM_SCORES],
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: &[(u8, u8)]) -> Self {
        let mut cm = Self::default();
        for &(p, t) in pairs {
            cm.counts[p as usize][t as usize] += 1;
        }
        cm
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..NUM_SCORES).map(|i| self.counts[i][i]).sum::<u64>() as f64 / total as f64)
    }
}

/// `(predicted, target)` score pairs for every lobe with a severity record:
/// the predicted score comes from the lesion fraction of `lesion_mask`.
pub fn severity_pairs(lesion_mask: &[bool], lobe_map: &LabelMap, severity: &[SeverityRecord]) -> Result<Vec<(u8, u8)>> {
    if lesion_mask.len() != lobe_map.len() {
        return Err(Error::Shape("severity: prediction and lobe map differ in size".into()));
    }
    let mut lobe = [0usize; 256];
    let mut hit = [0usize; 256];
    for (&l, &o) in lesion_mask.iter().zip(lobe_map.data()) {
        lobe[o as usize] += 1;
        hit[o as usize] += l as usize;
    }
    severity
        .iter()
        .map(|r| {
            let n = lobe[r.lobe_id as usize];
            if r.lobe_id == 0 || n == 0 {
                return Err(Error::Domain(format!("lobe {} is empty", r.lobe_id)));
            }
            Ok((score_from_fraction(hit[r.lobe_id as usize] as f64 / n as f64)?, r.score))
        })
        .collect()
}

/// Accuracy and confusion matrix of predicted against reference scores.
pub fn severity_accuracy(
    lesion_mask: &[bool],
    lobe_map: &LabelMap,
    severity: &[SeverityRecord],
) -> Result<(f64, ConfusionMatrix)> {
    let cm = ConfusionMatrix::from_pairs(&severity_pairs(lesion_mask, lobe_map, severity)?);
    let acc = cm.accuracy().ok_or_else(|| Error::Domain("no lobes to score".into()))?;
    Ok((acc, cm))
}

/// Linearly weighted kappa of a square count matrix, weights
/// `1 − |i − j| / (k − 1)`.
pub fn weighted_kappa(counts: &[Vec<u64>]) -> Result<f64> {
    let k = counts.len();
    if k < 2 || counts.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("kappa needs a square matrix of at least 2 categories".into()));
    }
    let total: u64 = counts.iter().flatten().sum();
    if total == 0 {
        return Err(Error::UndefinedKappa("empty confusion matrix".into()));
    }
    let n = total as f64;
    let rows: Vec<f64> = counts.iter().map(|r| r.iter().sum::<u64>() as f64 / n).collect();
    let cols: Vec<f64> = (0..k).map(|j| counts.iter().map(|r| r[j]).sum::<u64>() as f64 / n).collect();
    let (mut obs, mut exp) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = 1.0 - (i as f64 - j as f64).abs() / (k - 1) as f64;
            obs += w * counts[i][j] as f64 / n;
            exp += w * rows[i] * cols[j];
        }
    }
    let denom = 1.0 - exp;
    if denom.abs() < 1e-12 {
        return Err(Error::UndefinedKappa("degenerate marginals".into()));
    }
    Ok((obs - exp) / denom)
}

pub fn linear_weighted_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    weighted_kappa(&cm.counts.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KappaReport {
    pub kappa: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

/// Linear interpolation between order statistics of sorted `v`.
fn quantile(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Kappa over lobe pairs with a 95% percentile-bootstrap interval; resamples
/// with undefined kappa are dropped. Resample `r` draws from its own
/// stream of a generator seeded with `seed`.
pub fn kappa_with_ci(pairs: &[(u8, u8)], resamples: usize, seed: u64) -> Result<KappaReport> {
    let kappa = linear_weighted_kappa(&ConfusionMatrix::from_pairs(pairs))?;
    let mut boot: Vec<f64> = (0..resamples)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let sample: Vec<(u8, u8)> = (0..pairs.len()).map(|_| pairs[rng.gen_range(0..pairs.len())]).collect();
            linear_weighted_kappa(&ConfusionMatrix::from_pairs(&sample)).ok()
        })
        .collect();
    if boot.is_empty() {
        return Err(Error::UndefinedKappa("every bootstrap resample is degenerate".into()));
    }
    boot.sort_by(f64::total_cmp);
    Ok(KappaReport {
        kappa,
        ci_low: quantile(&boot, 0.025),
        ci_high: quantile(&boot, 0.975),
        n: pairs.len(),
    })
}
