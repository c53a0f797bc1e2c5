//! Pseudo-labels for refinement and binarization of activation maps.

use crate::error::{Error, Result};
use crate::losses::argmax_channel;
use crate::model::{BACKGROUND, LESION, VESSEL};
use crate::nn::{Real, Tensor};
use crate::proposal::{otsu_threshold, DEFAULT_BINS};
use crate::volume::{Grid, LabelMap, Volume};

/// One-hot targets from the current map: lesion where the map's argmax is
/// the lesion class and a candidate lies inside the lobe, vessel where a
/// detected vessel lies inside the lobe (and not lesion), background
/// elsewhere.
pub fn make_pseudo_labels<T: Real>(
    dram: &Tensor<T>,
    candidates: &[bool],
    vessels: &[bool],
    lobe_mask: &[bool],
) -> Result<Tensor<T>> {
    let n = dram.voxels();
    if dram.channels() != 3 {
        return Err(Error::Shape(format!("pseudo labels need 3 channels, got {}", dram.channels())));
    }
    if [candidates.len(), vessels.len(), lobe_mask.len()].iter().any(|&l| l != n) {
        return Err(Error::Shape("pseudo label masks do not match the map".into()));
    }
    let mut t = Tensor::zeros(3, dram.dims());
    let data = t.data_mut();
    for i in 0..n {
        let class = if lobe_mask[i] && candidates[i] && argmax_channel(dram, i) == LESION {
            LESION
        } else if lobe_mask[i] && vessels[i] {
            VESSEL
        } else {
            BACKGROUND
        };
        data[class * n + i] = T::ONE;
    }
    Ok(t)
}

/// Per lobe: rectify, min-max rescale, Otsu-binarize; optionally restricted
/// to candidate voxels. Returns a 0/1 map. Lobes whose rescaled map is
/// constant predict nothing.
pub fn binarize_cam(cam: &Volume, lobe_map: &LabelMap, candidates: Option<&LabelMap>) -> Result<LabelMap> {
    cam.ensure_aligned(lobe_map, "binarize_cam")?;
    if let Some(c) = candidates {
        c.ensure_aligned(lobe_map, "binarize_cam")?;
    }
    let mut out: LabelMap = Grid::new(cam.dims(), cam.spacing());
    for lobe_id in lobe_map.labels() {
        let idx: Vec<usize> = (0..lobe_map.len()).filter(|&i| lobe_map.data()[i] == lobe_id).collect();
        let rect: Vec<f32> = idx.iter().map(|&i| cam.data()[i].max(0.0)).collect();
        let (lo, hi) = rect.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !(hi > lo) {
            continue;
        }
        let scaled: Vec<f32> = rect.iter().map(|&v| (v - lo) / (hi - lo)).collect();
        let t = match otsu_threshold(&scaled, DEFAULT_BINS) {
            Ok(t) => t,
            Err(Error::DegenerateHistogram(_)) => continue,
            Err(e) => return Err(e),
        };
        for (&i, &v) in idx.iter().zip(&scaled) {
            let allowed = candidates.map_or(true, |c| c.data()[i] > 0);
            if v as f64 >= t && allowed {
                out.data_mut()[i] = 1;
            }
        }
    }
    Ok(out)
}

/// CAM post-processing: [`binarize_cam`] intersected with the candidates.
pub fn postprocess_cam(cam: &Volume, lobe_map: &LabelMap, candidates: &LabelMap) -> Result<LabelMap> {
    binarize_cam(cam, lobe_map, Some(candidates))
}
