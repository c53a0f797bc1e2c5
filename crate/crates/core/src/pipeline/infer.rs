//! Scan-level predictions by tiling per-lobe chunk outputs.

use crate::error::{Error, Result};
use crate::model::{Model, ModelKind, BACKGROUND, LESION};
use crate::nn::{Real, Tensor};
use crate::pipeline::{binarize_cam, extract_chunk, normalize_intensity, ChunkGeometry};
use crate::volume::{Grid, LabelMap, Volume};

/// Writes a chunk-space map onto the voxels of its lobe. `put(i, values)`
/// receives the scan index and the per-channel values there.
fn paint_lobe<T: Real>(
    geometry: &ChunkGeometry,
    chunk_map: &Tensor<T>,
    lobe_map: &LabelMap,
    mut put: impl FnMut(usize, &dyn Fn(usize) -> T),
) {
    let back = geometry.to_bbox(chunk_map);
    let bb = geometry.bbox;
    let size = bb.size();
    let n = back.voxels();
    let data = back.data();
    for d in 0..size[0] {
        for w in 0..size[1] {
            for h in 0..size[2] {
                let i = lobe_map.index(bb.lo[0] + d, bb.lo[1] + w, bb.lo[2] + h);
                if lobe_map.data()[i] != geometry.lobe_id {
                    continue;
                }
                let j = (d * size[1] + w) * size[2] + h;
                put(i, &|c| data[c * n + j]);
            }
        }
    }
}

/// Label map from per-lobe softmax maps: every lobe voxel takes the class
/// of maximum activation after mapping the chunk output back; voxels outside
/// all lobes are background.
pub fn tile_drams<T: Real>(lobe_map: &LabelMap, drams: &[(ChunkGeometry, Tensor<T>)]) -> LabelMap {
    let mut out: LabelMap = Grid::new(lobe_map.dims(), lobe_map.spacing());
    for (geometry, dram) in drams {
        let c = dram.channels();
        paint_lobe(geometry, dram, lobe_map, |i, v| {
            let mut best = 0;
            for k in 1..c {
                if v(k) > v(best) {
                    best = k;
                }
            }
            out.data_mut()[i] = best as u8;
        });
    }
    out
}

/// Segmentation of a scan (HU intensities) by a regression model.
pub fn infer_scan(model: &Model<f32>, image: &Volume, lobe_map: &LabelMap) -> Result<LabelMap> {
    if model.kind != ModelKind::Regression {
        return Err(Error::Config("infer_scan needs a regression model".into()));
    }
    let norm = normalize_intensity(image);
    let chunk_dims = model.config().chunk_size;
    let mut drams = Vec::new();
    for lobe_id in lobe_map.labels() {
        let chunk = extract_chunk(&norm, lobe_map, lobe_id, chunk_dims)?;
        let fwd = model.forward_regression(&chunk.image)?;
        drams.push((chunk.geometry, fwd.output().clone()));
    }
    Ok(tile_drams(lobe_map, &drams))
}

/// Scan-space class activation map of a classifier model (zero outside the
/// lobes).
pub fn scan_cam(model: &Model<f32>, image: &Volume, lobe_map: &LabelMap) -> Result<Volume> {
    let norm = normalize_intensity(image);
    let chunk_dims = model.config().chunk_size;
    let mut out: Volume = Grid::new(image.dims(), image.spacing());
    for lobe_id in lobe_map.labels() {
        let chunk = extract_chunk(&norm, lobe_map, lobe_id, chunk_dims)?;
        let fwd = model.forward_classifier(&chunk.image, &chunk.mask)?;
        paint_lobe(&chunk.geometry, &fwd.cam, lobe_map, |i, v| out.data_mut()[i] = v(0));
    }
    Ok(out)
}

/// Final label map of any model kind. With `post`, lesion predictions are
/// restricted to candidate voxels (activation maps are Otsu-binarized per
/// lobe either way).
pub fn predict(
    model: &Model<f32>,
    image: &Volume,
    lobe_map: &LabelMap,
    candidates: &LabelMap,
    post: bool,
) -> Result<LabelMap> {
    match model.kind {
        ModelKind::Regression => {
            let mut labels = infer_scan(model, image, lobe_map)?;
            if post {
                for (l, &c) in labels.data_mut().iter_mut().zip(candidates.data()) {
                    if *l == LESION as u8 && c == 0 {
                        *l = BACKGROUND as u8;
                    }
                }
            }
            Ok(labels)
        }
        ModelKind::DenseClassifier | ModelKind::SlimClassifier => {
            let cam = scan_cam(model, image, lobe_map)?;
            let bin = binarize_cam(&cam, lobe_map, post.then_some(candidates))?;
            Ok(bin.map(|v| if v > 0 { LESION as u8 } else { BACKGROUND as u8 }))
        }
    }
}
