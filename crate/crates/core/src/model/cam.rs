//! Binary lesion classifier on lobe-pooled features and its class
//! activation maps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{resize_trilinear, Param, Real, Tensor};

/// Index of the "lesion present" class.
pub const POSITIVE: usize = 1;

/// Two-class linear layer on mean-pooled features: `logits = W·f̄ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    /// `2 × F`
    pub weight: Param<T>,
    /// `2`
    pub bias: Param<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutput<T> {
    pub logits: [f64; 2],
    /// Pooled features `f̄`.
    pub pooled: Vec<T>,
    /// `⟨features_i, W[positive]⟩` at every voxel of the feature grid.
    pub cam: Tensor<T>,
}

impl<T: Real> Classifier<T> {
    pub fn new(features: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::he_normal("classifier.weight", &[2, features], features, rng),
            bias: Param::zeros("classifier.bias", &[2]),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Logits from lobe-mean-pooled `features` and the dense CAM.
pub fn classification_head_forward<T: Real>(
    features: &Tensor<T>,
    lobe_mask: &[bool],
    weight: &[T],
    bias: &[T],
) -> Result<ClassifierOutput<T>> {
    let f = features.channels();
    let n = features.voxels();
    if lobe_mask.len() != n {
        return Err(Error::Shape(format!("mask of {} voxels for {n}-voxel features", lobe_mask.len())));
    }
    if weight.len() != 2 * f || bias.len() != 2 {
        return Err(Error::Shape(format!("classifier weights must be 2x{f}")));
    }
    let count = lobe_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Domain("empty lobe mask".into()));
    }
    let pooled: Vec<T> = (0..f)
        .map(|c| {
            let s: f64 = features
                .channel(c)
                .iter()
                .zip(lobe_mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| v.to_f64())
                .sum();
            T::from_f64(s / count as f64)
        })
        .collect();
    let mut logits = [0.0; 2];
    for (k, logit) in logits.iter_mut().enumerate() {
        *logit = bias[k].to_f64() + (0..f).map(|c| weight[k * f + c].to_f64() * pooled[c].to_f64()).sum::<f64>();
    }
    let mut cam = Tensor::zeros(1, features.dims());
    for c in 0..f {
        let w = weight[POSITIVE * f + c];
        for (o, &v) in cam.data_mut().iter_mut().zip(features.channel(c)) {
            *o += w * v;
        }
    }
    Ok(ClassifierOutput { logits, pooled, cam })
}

/// Accumulates classifier gradients for `d_logits` and returns the gradient
/// w.r.t. the features.
pub fn classification_head_backward<T: Real>(
    classifier: &mut Classifier<T>,
    features: &Tensor<T>,
    lobe_mask: &[bool],
    out: &ClassifierOutput<T>,
    d_logits: [f64; 2],
) -> Tensor<T> {
    let f = features.channels();
    let count = lobe_mask.iter().filter(|&&m| m).count() as f64;
    let mut d_pooled = vec![0.0f64; f];
    for (k, &dl) in d_logits.iter().enumerate() {
        classifier.bias.grad[k] += T::from_f64(dl);
        for c in 0..f {
            classifier.weight.grad[k * f + c] += T::from_f64(dl * out.pooled[c].to_f64());
            d_pooled[c] += dl * classifier.weight.value[k * f + c].to_f64();
        }
    }
    let mut d_features = Tensor::zeros(f, features.dims());
    for (c, &dp) in d_pooled.iter().enumerate() {
        let g = T::from_f64(dp / count);
        for (o, &m) in d_features.channel_mut(c).iter_mut().zip(lobe_mask) {
            if m {
                *o = g;
            }
        }
    }
    d_features
}

/// A lobe mask reduced by `factor` per axis: a coarse voxel is in the lobe
/// when any of its fine voxels is.
pub fn downsample_mask(mask: &[bool], dims: [usize; 3], factor: usize) -> (Vec<bool>, [usize; 3]) {
    let od = [dims[0] / factor, dims[1] / factor, dims[2] / factor];
    let mut out = vec![false; od[0] * od[1] * od[2]];
    for d in 0..dims[0] {
        for w in 0..dims[1] {
            for h in 0..dims[2] {
                if mask[(d * dims[1] + w) * dims[2] + h] {
                    let (cd, cw, ch) = (d / factor, w / factor, h / factor);
                    if cd < od[0] && cw < od[1] && ch < od[2] {
                        out[(cd * od[1] + cw) * od[2] + ch] = true;
                    }
                }
            }
        }
    }
    (out, od)
}

/// Upsamples a low-resolution CAM to `dims`.
pub fn upsample_cam<T: Real>(cam: &Tensor<T>, dims: [usize; 3]) -> Tensor<T> {
    resize_trilinear(cam, dims)
}
