//! Layers, losses, optimizers and schedulers composed from the tensor module.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::seeds;
use crate::tensor::{Graph, Tensor, TensorData, TensorError, TensorShape};

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("no gradient for parameter '{0}'")]
    MissingGrad(String),
    #[error("invalid probability {0}: dropout needs 0 <= p < 1")]
    BadDropout(f32),
    #[error("invalid sigma {0}: noise needs sigma >= 0")]
    BadSigma(f32),
}

/// Smoothing term of the soft-Dice loss.
pub const DICE_SMOOTH: f32 = 1e-5;
/// Epsilon inside conv-block instance norms.
pub const NORM_EPS: f32 = 1e-5;

/// A named trainable parameter living outside any graph. Forward passes bind
/// it into the current graph as a leaf; the optimizer writes updates back.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: TensorData,
}

impl Param {
    /// Kaiming-uniform fan-in initialization (leaky-ReLU gain), bias zero.
    fn kaiming(name: String, shape: TensorShape, fan_in: usize, rng: &mut impl Rng) -> Self {
        let gain = (2.0f32 / (1.0 + crate::tensor::LEAKY_SLOPE.powi(2))).sqrt();
        let bound = gain * (3.0f32 / fan_in as f32).sqrt();
        let values = (0..shape.numel())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            name,
            value: TensorData { shape, values },
        }
    }

    fn zeros(name: String, shape: TensorShape) -> Self {
        Self {
            name,
            value: TensorData::zeros(shape),
        }
    }

    fn bind(&self, g: &Graph, tape: &mut ParamTape) -> Tensor {
        let t = g.leaf(self.value.clone());
        tape.entries.push((self.name.clone(), t.clone()));
        t
    }
}

/// Records the graph leaf created for each parameter during one forward pass,
/// so gradients can be pulled out after backward.
#[derive(Default)]
pub struct ParamTape {
    pub entries: Vec<(String, Tensor)>,
}

impl ParamTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Collects gradients per parameter name after a backward pass.
    pub fn grads(&self) -> Result<BTreeMap<String, Vec<f32>>, NnError> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.entries {
            let g = t.grad().ok_or_else(|| NnError::MissingGrad(name.clone()))?;
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

/// 3x3 same-padding convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let wshape = TensorShape::new(cout, cin, 3, 3).expect("static shape");
        Self {
            weight: Param::kaiming(format!("{name}.w"), wshape, cin * 9, rng),
            bias: Param::zeros(
                format!("{name}.b"),
                TensorShape::new(1, cout, 1, 1).expect("static shape"),
            ),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor, tape: &mut ParamTape) -> Result<Tensor, TensorError> {
        let w = self.weight.bind(x.graph(), tape);
        let b = self.bias.bind(x.graph(), tape);
        x.conv2d(&w, &b, self.stride)
    }
}

/// 1x1 convolution (classification head).
#[derive(Clone, Debug)]
pub struct Conv1x1 {
    pub weight: Param,
    pub bias: Param,
}

impl Conv1x1 {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let wshape = TensorShape::new(cout, cin, 1, 1).expect("static shape");
        Self {
            weight: Param::kaiming(format!("{name}.w"), wshape, cin, rng),
            bias: Param::zeros(
                format!("{name}.b"),
                TensorShape::new(1, cout, 1, 1).expect("static shape"),
            ),
        }
    }

    pub fn forward(&self, x: &Tensor, tape: &mut ParamTape) -> Result<Tensor, TensorError> {
        let w = self.weight.bind(x.graph(), tape);
        let b = self.bias.bind(x.graph(), tape);
        x.conv1x1(&w, &b)
    }
}

/// 2x2 stride-2 transposed convolution (upsampling).
#[derive(Clone, Debug)]
pub struct TConv2d {
    pub weight: Param,
    pub bias: Param,
}

impl TConv2d {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let wshape = TensorShape::new(cin, cout, 2, 2).expect("static shape");
        Self {
            weight: Param::kaiming(format!("{name}.w"), wshape, cin * 4, rng),
            bias: Param::zeros(
                format!("{name}.b"),
                TensorShape::new(1, cout, 1, 1).expect("static shape"),
            ),
        }
    }

    pub fn forward(&self, x: &Tensor, tape: &mut ParamTape) -> Result<Tensor, TensorError> {
        let w = self.weight.bind(x.graph(), tape);
        let b = self.bias.bind(x.graph(), tape);
        x.transposed_conv2d(&w, &b)
    }
}

/// Two (conv3x3 -> instance norm -> leaky ReLU) stages; preserves H,W.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ConvBlock {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.c1"), cin, cout, 1, rng),
            conv2: Conv2d::new(&format!("{name}.c2"), cout, cout, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor, tape: &mut ParamTape) -> Result<Tensor, TensorError> {
        let h = self
            .conv1
            .forward(x, tape)?
            .instance_norm2d(NORM_EPS)?
            .leaky_relu();
        Ok(self
            .conv2
            .forward(&h, tape)?
            .instance_norm2d(NORM_EPS)?
            .leaky_relu())
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
        ]
    }
}

/// Combined soft-Dice (all classes, smoothing 1e-5) and mean pixelwise
/// cross-entropy over channel softmax of `logits`. Labels are integer class
/// ids 0..C-1 with shape (B, 1, H, W).
pub fn dice_ce_loss(logits: &Tensor, labels: &[u8]) -> Result<Tensor, TensorError> {
    logits.dice_ce_op(labels, DICE_SMOOTH)
}

/// Forward-only Dice / cross-entropy components for reporting.
pub fn dice_ce_parts(logits: &TensorData, labels: &[u8]) -> Result<(f32, f32), TensorError> {
    let g = Graph::new();
    let t = g.leaf(logits.clone());
    let probs = t.softmax_channels().to_data();
    let s = logits.shape;
    let (b, c, hw) = (s.batch, s.channels, s.hw());
    if labels.len() != b * hw {
        return Err(TensorError::DataLength {
            got: labels.len(),
            want: b * hw,
            shape: s,
        });
    }
    let mut num = vec![DICE_SMOOTH; b * c];
    let mut den = vec![DICE_SMOOTH; b * c];
    let mut ce = 0.0f32;
    for bi in 0..b {
        for i in 0..hw {
            let t = labels[bi * hw + i] as usize;
            ce -= probs.values[(bi * c + t) * hw + i].max(1e-12).ln();
            for ch in 0..c {
                let p = probs.values[(bi * c + ch) * hw + i];
                den[bi * c + ch] += p;
                if ch == t {
                    num[bi * c + ch] += 2.0 * p;
                    den[bi * c + ch] += 1.0;
                }
            }
        }
    }
    ce /= (b * hw) as f32;
    let dice: f32 = (0..b * c).map(|i| num[i] / den[i]).sum::<f32>() / (b * c) as f32;
    Ok((1.0 - dice, ce))
}

/// Inverted dropout: each element is zeroed with probability `p`, survivors
/// are scaled by 1/(1-p). The mask is drawn from the given seed and reused by
/// backward. `p = 0` is the identity.
pub fn dropout(x: &Tensor, p: f32, seed: u64) -> Result<Tensor, NnError> {
    if !(0.0..1.0).contains(&p) {
        return Err(NnError::BadDropout(p));
    }
    if p == 0.0 {
        return Ok(x.dropout_op(vec![1.0; x.shape().numel()])?);
    }
    let mut rng = seeds::rng(seed, &[seeds::TAG_DROPOUT]);
    let keep = 1.0 / (1.0 - p);
    let mask = (0..x.shape().numel())
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
        .collect();
    Ok(x.dropout_op(mask)?)
}

/// Additive Gaussian noise N(0, sigma^2); backward is the identity.
/// `sigma = 0` is the identity.
pub fn gaussian_noise(x: &Tensor, sigma: f32, seed: u64) -> Result<Tensor, NnError> {
    if sigma < 0.0 {
        return Err(NnError::BadSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(x.add_noise_op(&vec![0.0; x.shape().numel()])?);
    }
    let mut rng = seeds::rng(seed, &[seeds::TAG_NOISE]);
    let normal = Normal::new(0.0f32, sigma).expect("sigma validated");
    let noise: Vec<f32> = (0..x.shape().numel())
        .map(|_| normal.sample(&mut rng))
        .collect();
    Ok(x.add_noise_op(&noise)?)
}

/// Cosine learning-rate decay from `eta0` at step 0 to 0 at step `total`.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub eta0: f32,
    pub total: usize,
}

impl CosineSchedule {
    pub fn rate(&self, step: usize) -> f32 {
        let s = step.min(self.total) as f32;
        self.eta0 * 0.5 * (1.0 + (std::f32::consts::PI * s / self.total as f32).cos())
    }
}

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Bias-corrected Adam (beta1 0.9, beta2 0.999, eps 1e-8). Moment buffers are
/// keyed by parameter name and created lazily on first sight.
#[derive(Default)]
pub struct Adam {
    state: BTreeMap<String, Moments>,
    step_count: u64,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over `params` with gradients looked up by name.
    /// Every parameter must have a gradient.
    pub fn step(
        &mut self,
        params: Vec<&mut Param>,
        grads: &BTreeMap<String, Vec<f32>>,
        lr: f32,
    ) -> Result<(), NnError> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for p in params {
            let g = grads
                .get(&p.name)
                .ok_or_else(|| NnError::MissingGrad(p.name.clone()))?;
            let n = p.value.values.len();
            let mom = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            for i in 0..n {
                mom.m[i] = ADAM_BETA1 * mom.m[i] + (1.0 - ADAM_BETA1) * g[i];
                mom.v[i] = ADAM_BETA2 * mom.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mh = mom.m[i] / bc1;
                let vh = mom.v[i] / bc2;
                p.value.values[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
