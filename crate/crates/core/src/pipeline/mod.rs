//! Chunk preparation, augmentation, pseudo-labels, training and scan-level
//! inference.

mod affine;
mod chunk;
mod infer;
mod labels;
mod train;

pub use affine::{apply_affine, sample_affine, AffineTransform, SCALE_RANGE};
pub use chunk::{extract_chunk, normalize_intensity, Chunk, ChunkGeometry, HU_MAX, HU_MIN};
pub use infer::{infer_scan, predict, scan_cam, tile_drams};
pub use labels::{binarize_cam, make_pseudo_labels, postprocess_cam};
pub use train::{
    build_samples, checkpoint_path, classifier_step, regression_step, train, LogRow, LossComponents, RunOutput,
    Sample, TrainConfig, TrainOutcome, Variant, CHECKPOINT_DIR, LOG_FILE, LOG_HEADER,
};

#[cfg(test)]
mod tests;
