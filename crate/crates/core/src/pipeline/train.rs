//! Per-lobe training samples, single-step objectives and the training loop.

use std::fs::{self, File};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Case;
use crate::error::{Error, Result};
use crate::losses::{
    bootstrap_loss_grad, calibrate_interval, equivariance_loss_grad, interval_regression_loss, softmax_cross_entropy,
    total_loss, Interval, LossWeights,
};
use crate::model::{
    lobe_mean_pool, lobe_mean_pool_grad, save_checkpoint, Model, ModelKind, ModelSpec, NetworkConfig, LESION,
    POSITIVE,
};
use crate::nn::{Real, Tensor};
use crate::pipeline::{extract_chunk, make_pseudo_labels, normalize_intensity, AffineTransform};
use crate::proposal::CandidateResult;

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (the final epoch is always
    /// saved); 0 saves only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            momentum: 0.9,
            epochs: 40,
            weights: LossWeights::default(),
            seed: 7,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        self.weights.validate()
    }
}

/// Which auxiliary objectives a regression run adds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Variant {
    pub er: bool,
    pub refine: bool,
    pub attention: bool,
}

/// One lobe chunk with everything a training step needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T = f32> {
    pub case_id: String,
    pub lobe_id: u8,
    pub image: Tensor<T>,
    pub mask: Vec<bool>,
    pub candidates: Vec<bool>,
    pub vessels: Vec<bool>,
    /// Calibrated lesion-fraction interval.
    pub interval: Interval,
    /// Lobe label for the classifiers: severity score above zero.
    pub positive: bool,
}

impl<T: Real> Sample<T> {
    pub fn cast<U: Real>(&self) -> Sample<U> {
        Sample {
            case_id: self.case_id.clone(),
            lobe_id: self.lobe_id,
            image: self.image.cast(),
            mask: self.mask.clone(),
            candidates: self.candidates.clone(),
            vessels: self.vessels.clone(),
            interval: self.interval,
            positive: self.positive,
        }
    }
}

/// Chunks every lobe of a case that carries a severity record.
pub fn build_samples(case: &Case, proposal: &CandidateResult, chunk_dims: [usize; 3]) -> Result<Vec<Sample>> {
    let image = normalize_intensity(&case.image);
    let dims = case.image.dims();
    let cand = proposal.candidate_map.nonzero_mask();
    let vessels = proposal.vessel_map.nonzero_mask();
    let mut out = Vec::new();
    for lobe_id in case.lobe_map.labels() {
        let Some(record) = case.severity_of(lobe_id) else {
            continue;
        };
        let chunk = extract_chunk(&image, &case.lobe_map, lobe_id, chunk_dims)?;
        let p_star = proposal.p_star(lobe_id).unwrap_or(0.0);
        let and_mask = |m: Vec<bool>| m.into_iter().zip(&chunk.mask).map(|(a, &b)| a && b).collect();
        out.push(Sample {
            case_id: case.id.clone(),
            lobe_id,
            candidates: and_mask(chunk.geometry.mask_to_chunk(&cand, dims)),
            vessels: and_mask(chunk.geometry.mask_to_chunk(&vessels, dims)),
            image: chunk.image,
            mask: chunk.mask,
            interval: calibrate_interval(&record.interval, p_star),
            positive: record.score > 0,
        });
    }
    Ok(out)
}

/// Loss components of one step (unweighted, except `total`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub regression: f64,
    pub equivariance: f64,
    pub refinement: f64,
}

impl LossComponents {
    fn is_finite(&self) -> bool {
        [self.total, self.regression, self.equivariance, self.refinement]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Forward and backward pass of the regression objective on one sample;
/// gradients are accumulated into `model`. `er` selects the transform of
/// the equivariance branch, `refine` enables the bootstrapping term.
pub fn regression_step<T: Real>(
    model: &mut Model<T>,
    sample: &Sample<T>,
    weights: &LossWeights,
    er: Option<&AffineTransform>,
    refine: bool,
) -> Result<LossComponents> {
    let fwd = model.forward_regression(&sample.image)?;
    let q = fwd.output();
    let shape = (q.channels(), q.dims());

    let p = lobe_mean_pool(q, &sample.mask, LESION)?;
    if !p.is_finite() {
        return Ok(LossComponents {
            total: f64::NAN,
            regression: f64::NAN,
            ..Default::default()
        });
    }
    let (reg, dp) = interval_regression_loss(p.clamp(0.0, 1.0), &sample.interval)?;
    let mut d_out: Tensor<T> = lobe_mean_pool_grad(shape, &sample.mask, LESION, weights.w_regression * dp);

    let mut refinement = 0.0;
    if refine {
        let t_star = make_pseudo_labels(q, &sample.candidates, &sample.vessels, &sample.mask)?;
        let (l, mut g) = bootstrap_loss_grad(q, &t_star, weights.bootstrap_beta)?;
        g.scale(T::from_f64(weights.w_refinement));
        d_out.add_assign(&g);
        refinement = l;
    }

    let mut equivariance = 0.0;
    if let Some(t) = er {
        let multiple = 1 << model.config().depth;
        let moved = t.apply(&sample.image, multiple);
        let fwd2 = model.forward_regression(&moved)?;
        let a = t.to_rotated_frame(fwd2.output(), q.dims());
        let b = t.rotate(q);
        let (l, mut g) = equivariance_loss_grad(&a, &b)?;
        g.scale(T::from_f64(weights.w_equivariance));
        let d2 = t.to_rotated_frame_backward(&g, moved.dims());
        model.backward_regression(&fwd2, &d2);
        g.scale(-T::ONE);
        d_out.add_assign(&t.unrotate(&g));
        equivariance = l;
    }

    model.backward_regression(&fwd, &d_out);
    Ok(LossComponents {
        total: total_loss(reg, equivariance, refinement, weights),
        regression: reg,
        equivariance,
        refinement,
    })
}

/// Cross-entropy step of a classifier baseline; the loss is reported as the
/// regression component.
pub fn classifier_step<T: Real>(model: &mut Model<T>, sample: &Sample<T>) -> Result<LossComponents> {
    let fwd = model.forward_classifier(&sample.image, &sample.mask)?;
    let label = if sample.positive { POSITIVE } else { 1 - POSITIVE };
    let (loss, g) = softmax_cross_entropy(&fwd.head.logits, label);
    model.backward_classifier(&fwd, [g[0], g[1]]);
    Ok(LossComponents {
        total: loss,
        regression: loss,
        ..Default::default()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_reg: f64,
    pub loss_er: f64,
    pub loss_ref: f64,
}

pub const LOG_FILE: &str = "log.csv";
pub const LOG_HEADER: [&str; 6] = ["step", "epoch", "loss_total", "loss_reg", "loss_er", "loss_ref"];
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> std::path::PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.ckpt"))
}

/// Where training writes its log and checkpoints.
pub struct RunOutput<'a> {
    pub dir: &'a Path,
    /// Resolved configuration stored inside every checkpoint.
    pub echo: &'a str,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<LogRow>,
}

struct LogSink {
    writer: Option<csv::Writer<File>>,
    rows: Vec<LogRow>,
}

impl LogSink {
    fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.serialize(row)?;
            w.flush().map_err(|e| Error::Csv(e.into()))?;
        }
        self.rows.push(row);
        Ok(())
    }
}

/// Trains a model of `spec` on `samples`: one lobe chunk per step, lobes
/// visited in a seed-shuffled order every epoch, SGD with momentum.
///
/// With `out`, every step is appended to `log.csv` as it happens and
/// checkpoints are written to `checkpoints/`; a non-finite loss aborts with
/// [`Error::Divergence`] after the offending step has been logged.
pub fn train(
    samples: &[Sample],
    network: &NetworkConfig,
    spec: ModelSpec,
    variant: Variant,
    config: &TrainConfig,
    out: Option<RunOutput>,
) -> Result<TrainOutcome> {
    config.validate()?;
    network.validate()?;
    if spec.kind != ModelKind::Regression && (variant.er || variant.refine) {
        return Err(Error::Config("equivariance and refinement apply to regression models only".into()));
    }
    if spec.attention != variant.attention {
        return Err(Error::Config("model spec and variant disagree on attention".into()));
    }
    let mut model: Model<f32> = Model::new(network, spec, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_7A1E);
    let mut sink = LogSink {
        writer: None,
        rows: Vec::new(),
    };
    if let Some(o) = &out {
        fs::create_dir_all(o.dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(o.dir, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(o.dir.join(LOG_FILE))?;
        w.write_record(LOG_HEADER)?;
        w.flush().map_err(|e| Error::io(o.dir.join(LOG_FILE), e))?;
        sink.writer = Some(w);
    }
    let save = |epoch: usize, model: &Model<f32>| -> Result<()> {
        match &out {
            Some(o) => save_checkpoint(&checkpoint_path(o.dir, epoch), model, o.echo),
            None => Ok(()),
        }
    };

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let transform = variant.er.then(|| AffineTransform::sample(&mut rng));
            model.zero_grad();
            let loss = match spec.kind {
                ModelKind::Regression => {
                    regression_step(&mut model, &samples[i], &config.weights, transform.as_ref(), variant.refine)?
                }
                _ => classifier_step(&mut model, &samples[i])?,
            };
            step += 1;
            sink.push(LogRow {
                step,
                epoch,
                loss_total: loss.total,
                loss_reg: loss.regression,
                loss_er: loss.equivariance,
                loss_ref: loss.refinement,
            })?;
            let grads_finite = model.params().iter().all(|p| p.grad.iter().all(|g| g.is_finite()));
            if !loss.is_finite() || !grads_finite {
                return Err(Error::Divergence {
                    step,
                    detail: format!(
                        "case {} lobe {}: loss {loss:?}, finite gradients: {grads_finite}",
                        samples[i].case_id, samples[i].lobe_id
                    ),
                });
            }
            model.sgd_step(config.learning_rate, config.momentum);
        }
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 && epoch != config.epochs {
            save(epoch, &model)?;
        }
    }
    save(config.epochs, &model)?;
    Ok(TrainOutcome { model, log: sink.rows })
}
