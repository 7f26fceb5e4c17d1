//! White-box inversion attack: recover the private input batch behind an
//! intercepted activation by optimizing a randomly initialized image until a
//! replica encoder reproduces the activation.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::metrics::{self, MetricsError, SsimParams};
use crate::model::{ModelError, SplitEncoder, ENCODER_LEVELS};
use crate::nn::{Adam, CosineSchedule, NnError, Param, ParamTape};
use crate::seeds;
use crate::tensor::{Graph, Tensor, TensorData, TensorError, TensorShape};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("encoder does not produce level {0} (levels are 0..=4)")]
    BadLevel(usize),
    #[error("{0}")]
    Invalid(String),
}

/// Attack hyperparameters: loss weights 1e-3 / 1e-4 / 1e-5, Adam with cosine
/// decay from 0.1 over `steps` iterations, candidate initialized uniform [0,1).
#[derive(Clone, Copy, Debug)]
pub struct AttackConfig {
    pub alpha_act: f32,
    pub alpha_tv: f32,
    pub alpha_l2: f32,
    pub steps: usize,
    pub init_lr: f32,
    /// Invert each sample of the batch independently instead of jointly.
    pub per_sample: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            alpha_act: 1e-3,
            alpha_tv: 1e-4,
            alpha_l2: 1e-5,
            steps: 2000,
            init_lr: 0.1,
            per_sample: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.alpha_act < 0.0 || self.alpha_tv < 0.0 || self.alpha_l2 < 0.0 {
            return Err(AttackError::Invalid(
                "loss weights must be non-negative".into(),
            ));
        }
        if self.steps == 0 {
            return Err(AttackError::Invalid("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Anisotropic total variation of an image batch, normalized by element count.
pub fn total_variation(img: &Tensor) -> Result<Tensor, TensorError> {
    img.total_variation_op()
}

/// The inversion objective:
/// `alpha_act * ||x_target - x_candidate||_2 + alpha_tv * TV(img) + alpha_l2 * ||img||_2`
/// with un-squared Euclidean norms.
pub fn inversion_loss(
    x_target: &Tensor,
    x_candidate: &Tensor,
    img: &Tensor,
    cfg: &AttackConfig,
) -> Result<Tensor, TensorError> {
    if x_target.shape() != x_candidate.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "target {} vs candidate {}",
            x_target.shape(),
            x_candidate.shape()
        )));
    }
    let act = x_target.sub(x_candidate)?.norm2().scale(cfg.alpha_act);
    let tv = total_variation(img)?.scale(cfg.alpha_tv);
    let l2 = img.norm2().scale(cfg.alpha_l2);
    act.add(&tv)?.add(&l2)
}

/// Result of one inversion run.
#[derive(Clone, Debug)]
pub struct InversionResult {
    pub recovered: TensorData,
    pub final_loss: f32,
    pub loss_trace: Vec<f32>,
    pub level: usize,
    pub site: usize,
}

/// Recovers an image batch from `target`, the (possibly guarded) level-`level`
/// activation, using `encoder` as the white-box replica. The candidate starts
/// uniform [0, 1) and follows Adam under cosine decay; the best-loss iterate
/// is returned.
pub fn invert(
    encoder: &SplitEncoder,
    level: usize,
    target: &TensorData,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<InversionResult, AttackError> {
    cfg.validate()?;
    if level >= ENCODER_LEVELS {
        return Err(AttackError::BadLevel(level));
    }
    if target.shape.channels != encoder.widths[level] {
        return Err(AttackError::Invalid(format!(
            "target has {} channels but level {level} of this encoder produces {}",
            target.shape.channels, encoder.widths[level]
        )));
    }
    if cfg.per_sample && target.shape.batch > 1 {
        return invert_per_sample(encoder, level, target, cfg, seed);
    }
    let scale = 1usize << level;
    let img_shape = TensorShape::new(
        target.shape.batch,
        encoder.in_channels,
        target.shape.height * scale,
        target.shape.width * scale,
    )?;
    let mut rng = seeds::rng(seed, &[seeds::TAG_ATTACK]);
    let mut candidate = Param {
        name: "img".to_string(),
        value: TensorData {
            shape: img_shape,
            values: (0..img_shape.numel()).map(|_| rng.random::<f32>()).collect(),
        },
    };
    let mut optimizer = Adam::new();
    let schedule = CosineSchedule {
        eta0: cfg.init_lr,
        total: cfg.steps,
    };
    let mut best_loss = f32::INFINITY;
    let mut best = candidate.value.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let graph = Graph::new();
        let img = graph.leaf(candidate.value.clone());
        let mut tape = ParamTape::new();
        let x_cand = encoder.forward_to_level(&img, level, &mut tape)?;
        let x_target = graph.leaf(target.clone());
        let loss = inversion_loss(&x_target, &x_cand, &img, cfg)?;
        let loss_value = loss.data()[0];
        trace.push(loss_value);
        if loss_value < best_loss {
            best_loss = loss_value;
            best = candidate.value.clone();
        }
        loss.backward()?;
        let grad = img.grad().expect("image leaf is reachable from the loss");
        let mut grads = BTreeMap::new();
        grads.insert("img".to_string(), grad);
        optimizer.step(vec![&mut candidate], &grads, schedule.rate(step))?;
    }
    Ok(InversionResult {
        recovered: best,
        final_loss: best_loss,
        loss_trace: trace,
        level,
        site: encoder.site,
    })
}

/// Batch inversion sample by sample; the per-sample objectives are
/// independent because every recorded op acts within one sample.
fn invert_per_sample(
    encoder: &SplitEncoder,
    level: usize,
    target: &TensorData,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<InversionResult, AttackError> {
    let s = target.shape;
    let chunk = s.channels * s.hw();
    let single = TensorShape::new(1, s.channels, s.height, s.width)?;
    let sub = AttackConfig {
        per_sample: false,
        ..*cfg
    };
    let parts: Vec<InversionResult> = (0..s.batch)
        .map(|b| {
            let t = TensorData::new(single, target.values[b * chunk..(b + 1) * chunk].to_vec())?;
            invert(encoder, level, &t, &sub, seeds::derive(seed, &[b as u64]))
        })
        .collect::<Result<_, _>>()?;
    let scale = 1usize << level;
    let img_shape = TensorShape::new(
        s.batch,
        encoder.in_channels,
        s.height * scale,
        s.width * scale,
    )?;
    let mut values = Vec::with_capacity(img_shape.numel());
    let mut final_loss = 0.0f32;
    let steps = parts[0].loss_trace.len();
    let mut trace = vec![0.0f32; steps];
    for p in &parts {
        values.extend_from_slice(&p.recovered.values);
        final_loss += p.final_loss;
        for (t, v) in trace.iter_mut().zip(&p.loss_trace) {
            *t += *v;
        }
    }
    Ok(InversionResult {
        recovered: TensorData {
            shape: img_shape,
            values,
        },
        final_loss,
        loss_trace: trace,
        level,
        site: encoder.site,
    })
}

/// One unit of sweep work: invert the dump of (site, level).
#[derive(Clone, Debug)]
pub struct SweepItem {
    pub site: usize,
    pub level: usize,
    pub target: TensorData,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub site: usize,
    pub level: usize,
    pub result: InversionResult,
    pub ssim_per_sample: Vec<f32>,
    pub ssim_mean: f32,
}

/// Runs one inversion per item (in parallel; each owns its graph) and scores
/// every reconstruction against the site's original input batch with SSIM.
pub fn level_sweep(
    encoders: &BTreeMap<usize, &SplitEncoder>,
    originals: &BTreeMap<usize, TensorData>,
    items: &[SweepItem],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<SweepOutcome>, AttackError> {
    cfg.validate()?;
    let mut outcomes: Vec<SweepOutcome> = items
        .par_iter()
        .map(|item| -> Result<SweepOutcome, AttackError> {
            let encoder = encoders.get(&item.site).ok_or_else(|| {
                AttackError::Invalid(format!("no encoder replica for site {}", item.site))
            })?;
            let original = originals.get(&item.site).ok_or_else(|| {
                AttackError::Invalid(format!("no original batch for site {}", item.site))
            })?;
            let item_seed = seeds::derive(
                seed,
                &[seeds::TAG_ATTACK, item.site as u64, item.level as u64],
            );
            let result = invert(encoder, item.level, &item.target, cfg, item_seed)?;
            let scores = metrics::ssim(original, &result.recovered, &SsimParams::default())?;
            Ok(SweepOutcome {
                site: item.site,
                level: item.level,
                result,
                ssim_per_sample: scores.per_sample,
                ssim_mean: scores.mean,
            })
        })
        .collect::<Result<_, _>>()?;
    outcomes.sort_by_key(|o| (o.site, o.level));
    Ok(outcomes)
}
