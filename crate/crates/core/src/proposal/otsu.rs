use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 256;

/// Relative slack under which two between-class variances count as tied.
const TIE_EPS: f64 = 1e-12;

/// Otsu's threshold over a `num_bins` histogram spanning `[min, max]`.
///
/// Candidate thresholds are the interior bin edges; the edge maximizing the
/// between-class variance wins, ties going to the lowest edge. Class means
/// use the actual values in each bin rather than bin centres. Values at or
/// above the returned threshold form the upper class.
pub fn otsu_threshold(values: &[f32], num_bins: usize) -> Result<f64> {
    if num_bins < 2 {
        return Err(Error::Domain("otsu needs at least two bins".into()));
    }
    if values.len() < 2 {
        return Err(Error::DegenerateHistogram(format!("{} values", values.len())));
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
        (a.min(v as f64), b.max(v as f64))
    });
    let range = hi - lo;
    if !(range > 1e-9 * lo.abs().max(hi.abs()).max(1.0)) || !range.is_finite() {
        return Err(Error::DegenerateHistogram(format!("constant input ({lo})")));
    }
    let width = range / num_bins as f64;
    let mut counts = vec![0f64; num_bins];
    let mut sums = vec![0f64; num_bins];
    for &v in values {
        let b = bin_of(v as f64, lo, width, num_bins);
        counts[b] += 1.0;
        sums[b] += v as f64;
    }
    let n = values.len() as f64;
    let total: f64 = sums.iter().sum();
    let mut best = f64::NEG_INFINITY;
    let mut best_k = 1;
    let (mut c0, mut s0) = (0.0, 0.0);
    for k in 1..num_bins {
        c0 += counts[k - 1];
        s0 += sums[k - 1];
        let c1 = n - c0;
        let var = if c0 == 0.0 || c1 == 0.0 {
            0.0
        } else {
            let m0 = s0 / c0;
            let m1 = (total - s0) / c1;
            (c0 / n) * (c1 / n) * (m0 - m1) * (m0 - m1)
        };
        if best == f64::NEG_INFINITY || var > best * (1.0 + TIE_EPS) {
            best = var;
            best_k = k;
        }
    }
    Ok(lo + best_k as f64 * width)
}

#[inline]
pub(crate) fn bin_of(v: f64, lo: f64, width: f64, num_bins: usize) -> usize {
    (((v - lo) / width).floor().max(0.0) as usize).min(num_bins - 1)
}
