//! Segmentation network, classification baselines and attention refinement.

mod attention;
mod cam;
mod checkpoint;
mod config;
mod unet;

pub use attention::{
    attention_aggregate, attention_refine, build_attention_input, compute_affinities, neighbor_offsets, renormalize,
    AffinityCache, Attention, AttentionForward, AttentionMap, NUM_NEIGHBORS, RENORM_EPS,
};
pub use cam::{
    classification_head_backward, classification_head_forward, downsample_mask, upsample_cam, Classifier,
    ClassifierOutput, POSITIVE,
};
pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{NetworkConfig, BACKGROUND, LESION, VESSEL};
pub use unet::{Conv, DenseFeatureBundle, DoubleConv, UNet, UNetForward};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, Real, Tensor};

/// Which output a model is trained to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Dense softmax map regressed against lobe fraction intervals.
    Regression,
    /// Lobe classifier on full-resolution decoder features (dCAM).
    DenseClassifier,
    /// Lobe classifier on bottleneck features (CAM).
    SlimClassifier,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub attention: bool,
}

/// Backbone plus the optional attention module or classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub kind: ModelKind,
    pub unet: UNet<T>,
    pub attention: Option<Attention<T>>,
    pub classifier: Option<Classifier<T>>,
}

/// Forward state of a regression model.
pub struct RegressionForward<T> {
    pub unet: UNetForward<T>,
    pub attention: Option<AttentionForward<T>>,
    input: Tensor<T>,
}

impl<T: Real> RegressionForward<T> {
    /// The backbone softmax map before attention.
    pub fn raw_dram(&self) -> &Tensor<T> {
        self.unet.dram.as_ref().expect("regression forward has a dram")
    }

    /// The map used for all losses: refined when attention is enabled.
    pub fn output(&self) -> &Tensor<T> {
        match &self.attention {
            Some(a) => &a.refined,
            None => self.raw_dram(),
        }
    }
}

/// Forward state of a classifier model for one lobe.
pub struct ClassifierForward<T> {
    pub unet: UNetForward<T>,
    pub head: ClassifierOutput<T>,
    mask: Vec<bool>,
    /// Full-resolution CAM (upsampled for the slim variant).
    pub cam: Tensor<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: &NetworkConfig, spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unet = UNet::new(config, &mut rng)?;
        if spec.attention && spec.kind != ModelKind::Regression {
            return Err(Error::Config("attention applies to regression models only".into()));
        }
        let attention = if spec.attention {
            Some(Attention::new(
                config.attention_dim,
                config.base_width,
                config.num_classes,
                &mut rng,
            )?)
        } else {
            None
        };
        let classifier = match spec.kind {
            ModelKind::Regression => None,
            ModelKind::DenseClassifier => Some(Classifier::new(config.width(0), &mut rng)),
            ModelKind::SlimClassifier => Some(Classifier::new(config.width(config.depth), &mut rng)),
        };
        Ok(Self {
            kind: spec.kind,
            unet,
            attention,
            classifier,
        })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.kind,
            attention: self.attention.is_some(),
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.unet.config
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.unet.params();
        if let Some(a) = &self.attention {
            out.extend(a.params());
        }
        if let Some(c) = &self.classifier {
            out.extend(c.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.unet.params_mut();
        if let Some(a) = &mut self.attention {
            out.extend(a.params_mut());
        }
        if let Some(c) = &mut self.classifier {
            out.extend(c.params_mut());
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn sgd_step(&mut self, lr: f64, momentum: f64) {
        let (lr, mu) = (T::from_f64(lr), T::from_f64(momentum));
        for p in self.params_mut() {
            p.sgd_step(lr, mu);
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            kind: self.kind,
            unet: self.unet.cast(),
            attention: self.attention.as_ref().map(Attention::cast),
            classifier: self.classifier.as_ref().map(Classifier::cast),
        }
    }

    pub fn forward_regression(&self, chunk: &Tensor<T>) -> Result<RegressionForward<T>> {
        if self.kind != ModelKind::Regression {
            return Err(Error::Config("not a regression model".into()));
        }
        let unet = self.unet.forward(chunk)?;
        let attention = match &self.attention {
            Some(a) => {
                let dram = unet.dram.as_ref().expect("full forward");
                Some(a.forward(chunk, unet.enc1(), unet.enc2(), dram)?)
            }
            None => None,
        };
        Ok(RegressionForward {
            unet,
            attention,
            input: chunk.clone(),
        })
    }

    /// Accumulates gradients for an upstream gradient on `fwd.output()`.
    pub fn backward_regression(&mut self, fwd: &RegressionForward<T>, d_output: &Tensor<T>) {
        let d_dram = match (&mut self.attention, &fwd.attention) {
            (Some(att), Some(af)) => att.backward(af, fwd.unet.enc1(), fwd.unet.enc2(), d_output),
            _ => d_output.clone(),
        };
        debug_assert_eq!(fwd.input.dims(), d_dram.dims());
        self.unet.backward(&fwd.unet, Some(&d_dram), None, None);
    }

    /// Classifier logits and CAM for the lobe given by `lobe_mask`
    /// (chunk resolution).
    pub fn forward_classifier(&self, chunk: &Tensor<T>, lobe_mask: &[bool]) -> Result<ClassifierForward<T>> {
        let cls = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Config("not a classifier model".into()))?;
        match self.kind {
            ModelKind::DenseClassifier => {
                let unet = self.unet.forward(chunk)?;
                let head = classification_head_forward(unet.final_dense(), lobe_mask, &cls.weight.value, &cls.bias.value)?;
                let cam = head.cam.clone();
                Ok(ClassifierForward {
                    unet,
                    head,
                    mask: lobe_mask.to_vec(),
                    cam,
                })
            }
            ModelKind::SlimClassifier => {
                let unet = self.unet.forward_encoder(chunk)?;
                let factor = 1 << self.unet.config.depth;
                let (mask, _) = downsample_mask(lobe_mask, chunk.dims(), factor);
                let head = classification_head_forward(unet.bottleneck(), &mask, &cls.weight.value, &cls.bias.value)?;
                let cam = upsample_cam(&head.cam, chunk.dims());
                Ok(ClassifierForward { unet, head, mask, cam })
            }
            ModelKind::Regression => unreachable!("regression models have no classifier"),
        }
    }

    pub fn backward_classifier(&mut self, fwd: &ClassifierForward<T>, d_logits: [f64; 2]) {
        let cls = self.classifier.as_mut().expect("classifier model");
        match self.kind {
            ModelKind::DenseClassifier => {
                let d = classification_head_backward(cls, fwd.unet.final_dense(), &fwd.mask, &fwd.head, d_logits);
                self.unet.backward(&fwd.unet, None, Some(&d), None);
            }
            ModelKind::SlimClassifier => {
                let d = classification_head_backward(cls, fwd.unet.bottleneck(), &fwd.mask, &fwd.head, d_logits);
                self.unet.backward(&fwd.unet, None, None, Some(&d));
            }
            ModelKind::Regression => unreachable!("regression models have no classifier"),
        }
    }
}

/// Backbone pass on a chunk: dense features and the softmax map.
pub fn backbone_forward<T: Real>(unet: &UNet<T>, chunk: &Tensor<T>) -> Result<(DenseFeatureBundle<T>, Tensor<T>)> {
    if chunk.dims() != unet.config.chunk_size {
        unet.config.check_dims(chunk.dims())?;
    }
    let fwd = unet.forward(chunk)?;
    let dram = fwd.dram.clone().expect("full forward");
    Ok((fwd.bundle(), dram))
}

/// Low-resolution CAM from the bottleneck and its upsampled version.
pub fn slim_forward<T: Real>(
    unet: &UNet<T>,
    classifier: &Classifier<T>,
    chunk: &Tensor<T>,
    lobe_mask: &[bool],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let fwd = unet.forward_encoder(chunk)?;
    let (mask, _) = downsample_mask(lobe_mask, chunk.dims(), 1 << unet.config.depth);
    let head = classification_head_forward(fwd.bottleneck(), &mask, &classifier.weight.value, &classifier.bias.value)?;
    let up = upsample_cam(&head.cam, chunk.dims());
    Ok((head.cam, up))
}

/// Mean of `channel` over the voxels where `lobe_mask` is set.
pub fn lobe_mean_pool<T: Real>(dram: &Tensor<T>, lobe_mask: &[bool], channel: usize) -> Result<f64> {
    if lobe_mask.len() != dram.voxels() {
        return Err(Error::Shape(format!(
            "mask of {} voxels for a {}-voxel map",
            lobe_mask.len(),
            dram.voxels()
        )));
    }
    let count = lobe_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Domain("empty lobe mask".into()));
    }
    let s: f64 = dram
        .channel(channel)
        .iter()
        .zip(lobe_mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v.to_f64())
        .sum();
    Ok(s / count as f64)
}

/// Gradient of [`lobe_mean_pool`] scaled by `upstream`.
pub fn lobe_mean_pool_grad<T: Real>(
    shape: (usize, [usize; 3]),
    lobe_mask: &[bool],
    channel: usize,
    upstream: f64,
) -> Tensor<T> {
    let count = lobe_mask.iter().filter(|&&m| m).count().max(1);
    let mut g = Tensor::zeros(shape.0, shape.1);
    let v = T::from_f64(upstream / count as f64);
    for (o, &m) in g.channel_mut(channel).iter_mut().zip(lobe_mask) {
        if m {
            *o = v;
        }
    }
    g
}
