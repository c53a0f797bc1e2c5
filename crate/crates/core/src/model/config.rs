use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output channel order of every dense map.
pub const BACKGROUND: usize = 0;
pub const VESSEL: usize = 1;
pub const LESION: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Feature count of the first encoder stage; doubles per stage.
    pub base_width: usize,
    /// Number of 2× downsampling stages.
    pub depth: usize,
    /// Projected subspace size of the attention module.
    pub attention_dim: usize,
    pub chunk_size: [usize; 3],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 3,
            base_width: 16,
            depth: 3,
            attention_dim: 8,
            chunk_size: [80; 3],
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels != 1 {
            return bad("in_channels must be 1".into());
        }
        if self.num_classes != 3 {
            return bad("num_classes must be 3 (background, vessel, lesion)".into());
        }
        if self.base_width == 0 || self.attention_dim == 0 {
            return bad("base_width and attention_dim must be >= 1".into());
        }
        if !(2..=5).contains(&self.depth) {
            return bad("depth must lie in 2..=5".into());
        }
        self.check_dims(self.chunk_size).map_err(|e| Error::Config(e.to_string()))
    }

    /// Spatial dims the network accepts: positive multiples of `2^depth`.
    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let m = 1usize << self.depth;
        if dims.iter().any(|&d| d == 0 || d % m != 0) {
            return Err(Error::Shape(format!("spatial dims {dims:?} not divisible by {m}")));
        }
        Ok(())
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }
}
