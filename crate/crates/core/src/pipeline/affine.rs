//! Random affine transforms for the equivariance branch: quarter-turn
//! rotations in an axis pair followed by per-axis rescaling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{resize_trilinear, resize_trilinear_backward, Real, Tensor};

pub const SCALE_RANGE: [f64; 2] = [0.8, 1.2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    /// Per-axis resize factors applied after rotation.
    pub scale: [f64; 3],
    /// Number of 90° turns; 0 only for the identity.
    pub quarter_turns: u8,
    /// Rotation plane; a turn maps axis `axes[1]` onto axis `axes[0]`.
    pub axes: [usize; 2],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            scale: [1.0; 3],
            quarter_turns: 0,
            axes: [0, 1],
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let scale = [0; 3].map(|_| rng.gen_range(SCALE_RANGE[0]..=SCALE_RANGE[1]));
        let quarter_turns = rng.gen_range(1..=3u8);
        let mut axes = [0usize, 1, 2];
        axes.shuffle(rng);
        Self {
            scale,
            quarter_turns,
            axes: [axes[0], axes[1]],
        }
    }

    pub fn rotated_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let mut out = dims;
        if self.quarter_turns % 2 == 1 {
            out.swap(self.axes[0], self.axes[1]);
        }
        out
    }

    /// Rotated dims rescaled and rounded to a positive multiple of
    /// `multiple` (the network's size constraint).
    pub fn transformed_dims(&self, dims: [usize; 3], multiple: usize) -> [usize; 3] {
        let r = self.rotated_dims(dims);
        let mut out = [0; 3];
        for a in 0..3 {
            let k = (r[a] as f64 * self.scale[a] / multiple as f64).round().max(1.0) as usize;
            out[a] = k * multiple;
        }
        out
    }

    pub fn rotate<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        (0..self.quarter_turns % 4).fold(x.clone(), |acc, _| quarter_turn(&acc, self.axes))
    }

    /// Inverse rotation; also the adjoint of [`Self::rotate`].
    pub fn unrotate<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        (0..(4 - self.quarter_turns % 4) % 4).fold(x.clone(), |acc, _| quarter_turn(&acc, self.axes))
    }

    /// `T(x)`: rotate, then resize to [`Self::transformed_dims`].
    pub fn apply<T: Real>(&self, x: &Tensor<T>, multiple: usize) -> Tensor<T> {
        resize_trilinear(&self.rotate(x), self.transformed_dims(x.dims(), multiple))
    }

    /// Maps a transformed map back to the original frame with dims `dims`.
    pub fn invert<T: Real>(&self, y: &Tensor<T>, dims: [usize; 3]) -> Tensor<T> {
        self.unrotate(&resize_trilinear(y, self.rotated_dims(dims)))
    }

    /// Resizes a map on the transformed grid to the rotated frame of an
    /// input with dims `dims`, for comparison with `rotate(F(x))`.
    pub fn to_rotated_frame<T: Real>(&self, y: &Tensor<T>, dims: [usize; 3]) -> Tensor<T> {
        resize_trilinear(y, self.rotated_dims(dims))
    }

    /// Adjoint of [`Self::to_rotated_frame`].
    pub fn to_rotated_frame_backward<T: Real>(&self, dy: &Tensor<T>, transformed_dims: [usize; 3]) -> Tensor<T> {
        resize_trilinear_backward(dy, transformed_dims)
    }
}

/// Deterministic transform for a seed.
pub fn sample_affine(seed: u64) -> AffineTransform {
    AffineTransform::sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// [`AffineTransform::apply`] with no size constraint.
pub fn apply_affine<T: Real>(map: &Tensor<T>, transform: &AffineTransform) -> Tensor<T> {
    transform.apply(map, 1)
}

/// One 90° turn in plane `(a, b)`: voxel `(i_a, i_b)` moves to
/// `(n_b − 1 − i_b, i_a)`, where `n_b` is the input extent along `b`.
fn quarter_turn<T: Real>(x: &Tensor<T>, [a, b]: [usize; 2]) -> Tensor<T> {
    let di = x.dims();
    let mut dout = di;
    dout.swap(a, b);
    let mut y = Tensor::zeros(x.channels(), dout);
    let n_b = di[b];
    for c in 0..x.channels() {
        for o0 in 0..dout[0] {
            for o1 in 0..dout[1] {
                for o2 in 0..dout[2] {
                    let o = [o0, o1, o2];
                    let mut s = o;
                    s[a] = o[b];
                    s[b] = n_b - 1 - o[a];
                    *y.at_mut(c, o0, o1, o2) = x.at(c, s[0], s[1], s[2]);
                }
            }
        }
    }
    y
}
