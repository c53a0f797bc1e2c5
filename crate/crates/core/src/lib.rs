//! Weakly-supervised 3D lesion segmentation from lobe-wise severity scores.
//!
//! A 3D U-Net is trained to regress the lesion fraction of each lobe against
//! a calibrated interval; its dense output is the segmentation. Optional
//! equivariant consistency, bootstrapped pseudo-label refinement and a local
//! affinity attention module sharpen the maps. Synthetic phantoms with exact
//! ground truth, CAM/dCAM baselines and the full evaluation metric suite are
//! included.

pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod proposal;
pub mod volume;

pub use error::{Error, Result};
