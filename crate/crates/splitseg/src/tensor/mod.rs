//! Minimal dense 4-D tensor type with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape of recorded operations. [`Tensor`] handles point into
//! the tape; cloning a handle is cheap. A graph and its tensors form one
//! single-threaded unit of work (`Rc` inside), distinct graphs may live on
//! distinct threads. Plain values cross thread or process boundaries as
//! [`TensorData`].

mod kernels;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

/// Negative-side slope used by every leaky ReLU in this crate.
pub const LEAKY_SLOPE: f32 = 0.1;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("backward needs a scalar loss, got shape {0}")]
    NonScalarLoss(TensorShape),
    #[error("tensors belong to different graphs")]
    GraphMismatch,
    #[error("data length {got} does not match shape {shape} ({want} elements)")]
    DataLength {
        got: usize,
        want: usize,
        shape: TensorShape,
    },
}

/// (batch, channels, height, width), all >= 1.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorShape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub fn new(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self, TensorError> {
        if batch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(TensorError::InvalidShape(format!(
                "all dimensions must be >= 1, got ({batch}, {channels}, {height}, {width})"
            )));
        }
        batch
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(height))
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| {
                TensorError::InvalidShape(format!(
                    "element count of ({batch}, {channels}, {height}, {width}) overflows"
                ))
            })?;
        Ok(Self {
            batch,
            channels,
            height,
            width,
        })
    }

    pub fn scalar() -> Self {
        Self {
            batch: 1,
            channels: 1,
            height: 1,
            width: 1,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn hw(&self) -> usize {
        self.height * self.width
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// A plain shaped value with no graph attached. This is the form tensors
/// take in files, protocol messages and anything that crosses threads.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData {
    pub shape: TensorShape,
    pub values: Vec<f32>,
}

impl TensorData {
    pub fn new(shape: TensorShape, values: Vec<f32>) -> Result<Self, TensorError> {
        if values.len() != shape.numel() {
            return Err(TensorError::DataLength {
                got: values.len(),
                want: shape.numel(),
                shape,
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Self {
            values: vec![0.0; shape.numel()],
            shape,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: TensorShape::scalar(),
            values: vec![v],
        }
    }
}

enum OpRecord {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        ksize: usize,
        stride: usize,
    },
    TConv2d {
        input: usize,
        weight: usize,
        bias: usize,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<u32>,
    },
    InstanceNorm {
        input: usize,
        inv_std: Vec<f32>,
    },
    LeakyRelu {
        input: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: f32,
    },
    SoftmaxChannels {
        input: usize,
    },
    ConcatChannels {
        inputs: Vec<usize>,
    },
    SumAll {
        input: usize,
    },
    Norm2 {
        input: usize,
    },
    TotalVariation {
        input: usize,
    },
    DiceCe {
        logits: usize,
        labels: Vec<u8>,
        probs: Vec<f32>,
        dice_num: Vec<f32>,
        dice_den: Vec<f32>,
    },
    Dropout {
        input: usize,
        mask: Vec<f32>,
    },
    GaussianNoise {
        input: usize,
    },
}

struct Node {
    shape: TensorShape,
    data: Vec<f32>,
    op: OpRecord,
}

struct GraphInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

/// Recording tape for reverse-mode differentiation. Backward visits nodes in
/// exact reverse recording order, so a node's gradient is fully accumulated
/// before its own backward rule runs.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
    shape: TensorShape,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, shape: TensorShape, data: Vec<f32>, op: OpRecord) -> Tensor {
        debug_assert_eq!(data.len(), shape.numel());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by a forward op"
        );
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { shape, data, op });
        inner.grads.push(None);
        Tensor {
            graph: self.clone(),
            id,
            shape,
        }
    }

    pub fn leaf(&self, data: TensorData) -> Tensor {
        self.push(data.shape, data.values, OpRecord::Leaf)
    }

    pub fn leaf_from(&self, values: Vec<f32>, shape: TensorShape) -> Result<Tensor, TensorError> {
        Ok(self.leaf(TensorData::new(shape, values)?))
    }

    pub fn scalar(&self, v: f32) -> Tensor {
        self.leaf(TensorData::scalar(v))
    }

    pub fn zeros(&self, shape: TensorShape) -> Tensor {
        self.leaf(TensorData::zeros(shape))
    }

    /// Channel concatenation in the order given; all parts must share (B, H, W).
    pub fn concat_channels(&self, parts: &[Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape(
                "concat_channels needs at least one input".into(),
            ));
        }
        let first = parts[0].shape;
        let mut channels = 0;
        for p in parts {
            if !Rc::ptr_eq(&p.graph.inner, &self.inner) {
                return Err(TensorError::GraphMismatch);
            }
            let s = p.shape;
            if (s.batch, s.height, s.width) != (first.batch, first.height, first.width) {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat_channels requires identical (B, H, W); got {s} vs {first}"
                )));
            }
            channels += s.channels;
        }
        let out_shape = TensorShape::new(first.batch, channels, first.height, first.width)?;
        let hw = first.hw();
        let mut out = vec![0.0f32; out_shape.numel()];
        {
            let inner = self.inner.borrow();
            for b in 0..first.batch {
                let mut co = 0;
                for p in parts {
                    let c = p.shape.channels;
                    let src = &inner.nodes[p.id].data[b * c * hw..(b + 1) * c * hw];
                    out[(b * channels + co) * hw..(b * channels + co + c) * hw]
                        .copy_from_slice(src);
                    co += c;
                }
            }
        }
        Ok(self.push(
            out_shape,
            out,
            OpRecord::ConcatChannels {
                inputs: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }

    /// Standard reverse pass from a scalar loss. Every leaf reachable from
    /// the loss gets a populated gradient; unreached leaves get zeros.
    pub fn backward(&self, loss: &Tensor) -> Result<(), TensorError> {
        if !Rc::ptr_eq(&loss.graph.inner, &self.inner) {
            return Err(TensorError::GraphMismatch);
        }
        if !loss.shape.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss.shape));
        }
        let one = [1.0f32];
        self.backward_seeded(&[(loss, &one[..])])
    }

    /// Reverse pass seeded with explicit output gradients. This is what lets
    /// a site continue backpropagation from gradients received over the wire.
    pub fn backward_seeded(&self, seeds: &[(&Tensor, &[f32])]) -> Result<(), TensorError> {
        let mut inner = self.inner.borrow_mut();
        for (t, g) in seeds {
            if !Rc::ptr_eq(&t.graph.inner, &self.inner) {
                return Err(TensorError::GraphMismatch);
            }
            if g.len() != t.shape.numel() {
                return Err(TensorError::DataLength {
                    got: g.len(),
                    want: t.shape.numel(),
                    shape: t.shape,
                });
            }
            let slot = inner.grads[t.id].get_or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in slot.iter_mut().zip(*g) {
                *a += *b;
            }
        }
        let GraphInner { nodes, grads } = &mut *inner;
        for j in (0..nodes.len()).rev() {
            if grads[j].is_none() {
                continue;
            }
            let (gh, gt) = grads.split_at_mut(j);
            let gout = gt[0].as_deref().expect("checked above");
            backward_step(nodes, j, gout, gh);
        }
        for j in 0..nodes.len() {
            if matches!(nodes[j].op, OpRecord::Leaf) && grads[j].is_none() {
                grads[j] = Some(vec![0.0; nodes[j].shape.numel()]);
            }
        }
        Ok(())
    }
}

fn acc(slot: &mut Option<Vec<f32>>, n: usize) -> &mut [f32] {
    slot.get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
}

fn backward_step(nodes: &[Node], j: usize, gout: &[f32], gh: &mut [Option<Vec<f32>>]) {
    match &nodes[j].op {
        OpRecord::Leaf => {}
        OpRecord::Conv2d {
            input,
            weight,
            bias,
            ksize,
            stride,
        } => {
            let xs = nodes[*input].shape;
            let ws = nodes[*weight].shape;
            let mut dx = vec![0.0f32; xs.numel()];
            let mut dw = vec![0.0f32; ws.numel()];
            let mut db = vec![0.0f32; nodes[*bias].shape.numel()];
            kernels::conv_backward(
                &nodes[*input].data,
                xs.batch,
                xs.channels,
                xs.height,
                xs.width,
                &nodes[*weight].data,
                ws.batch,
                *ksize,
                *stride,
                gout,
                &mut dx,
                &mut dw,
                &mut db,
            );
            add_into(acc(&mut gh[*input], xs.numel()), &dx);
            add_into(acc(&mut gh[*weight], ws.numel()), &dw);
            add_into(acc(&mut gh[*bias], db.len()), &db);
        }
        OpRecord::TConv2d {
            input,
            weight,
            bias,
        } => {
            let xs = nodes[*input].shape;
            let ws = nodes[*weight].shape;
            let mut dx = vec![0.0f32; xs.numel()];
            let mut dw = vec![0.0f32; ws.numel()];
            let mut db = vec![0.0f32; nodes[*bias].shape.numel()];
            kernels::tconv_backward(
                &nodes[*input].data,
                xs.batch,
                xs.channels,
                xs.height,
                xs.width,
                &nodes[*weight].data,
                ws.channels,
                gout,
                &mut dx,
                &mut dw,
                &mut db,
            );
            add_into(acc(&mut gh[*input], xs.numel()), &dx);
            add_into(acc(&mut gh[*weight], ws.numel()), &dw);
            add_into(acc(&mut gh[*bias], db.len()), &db);
        }
        OpRecord::MaxPool2 { input, argmax } => {
            let xs = nodes[*input].shape;
            let dx = acc(&mut gh[*input], xs.numel());
            for (o, &src) in argmax.iter().enumerate() {
                dx[src as usize] += gout[o];
            }
        }
        OpRecord::InstanceNorm { input, inv_std } => {
            let xs = nodes[*input].shape;
            let dx = acc(&mut gh[*input], xs.numel());
            kernels::instance_norm_backward(
                &nodes[j].data,
                xs.batch * xs.channels,
                xs.hw(),
                inv_std,
                gout,
                dx,
            );
        }
        OpRecord::LeakyRelu { input } => {
            let x = &nodes[*input].data;
            let dx = acc(&mut gh[*input], x.len());
            for i in 0..x.len() {
                dx[i] += if x[i] > 0.0 {
                    gout[i]
                } else {
                    LEAKY_SLOPE * gout[i]
                };
            }
        }
        OpRecord::Add { a, b } => {
            add_into(acc(&mut gh[*a], gout.len()), gout);
            add_into(acc(&mut gh[*b], gout.len()), gout);
        }
        OpRecord::Sub { a, b } => {
            add_into(acc(&mut gh[*a], gout.len()), gout);
            let db = acc(&mut gh[*b], gout.len());
            for (d, g) in db.iter_mut().zip(gout) {
                *d -= *g;
            }
        }
        OpRecord::Mul { a, b } => {
            let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
            {
                let da = acc(&mut gh[*a], gout.len());
                for i in 0..gout.len() {
                    da[i] += gout[i] * bd[i];
                }
            }
            let dbg = acc(&mut gh[*b], gout.len());
            for i in 0..gout.len() {
                dbg[i] += gout[i] * ad[i];
            }
        }
        OpRecord::Scale { input, factor } => {
            let dx = acc(&mut gh[*input], gout.len());
            for (d, g) in dx.iter_mut().zip(gout) {
                *d += factor * g;
            }
        }
        OpRecord::SoftmaxChannels { input } => {
            let xs = nodes[*input].shape;
            let dx = acc(&mut gh[*input], xs.numel());
            kernels::softmax_channels_backward(
                &nodes[j].data,
                xs.batch,
                xs.channels,
                xs.hw(),
                gout,
                dx,
            );
        }
        OpRecord::ConcatChannels { inputs } => {
            let out_shape = nodes[j].shape;
            let hw = out_shape.hw();
            let mut co = 0;
            for &inp in inputs {
                let s = nodes[inp].shape;
                let dx = acc(&mut gh[inp], s.numel());
                for b in 0..s.batch {
                    let src =
                        &gout[(b * out_shape.channels + co) * hw..][..s.channels * hw];
                    add_into(&mut dx[b * s.channels * hw..(b + 1) * s.channels * hw], src);
                }
                co += s.channels;
            }
        }
        OpRecord::SumAll { input } => {
            let g = gout[0];
            let dx = acc(&mut gh[*input], nodes[*input].shape.numel());
            for d in dx.iter_mut() {
                *d += g;
            }
        }
        OpRecord::Norm2 { input } => {
            let n = nodes[j].data[0];
            let x = &nodes[*input].data;
            let dx = acc(&mut gh[*input], x.len());
            if n > 1e-12 {
                let g = gout[0] / n;
                for i in 0..x.len() {
                    dx[i] += g * x[i];
                }
            }
        }
        OpRecord::TotalVariation { input } => {
            let xs = nodes[*input].shape;
            let dx = acc(&mut gh[*input], xs.numel());
            kernels::total_variation_backward(
                &nodes[*input].data,
                xs.batch * xs.channels,
                xs.height,
                xs.width,
                gout[0],
                dx,
            );
        }
        OpRecord::DiceCe {
            logits,
            labels,
            probs,
            dice_num,
            dice_den,
        } => {
            let xs = nodes[*logits].shape;
            let (b, c, hw) = (xs.batch, xs.channels, xs.hw());
            let dx = acc(&mut gh[*logits], xs.numel());
            let g = gout[0];
            let npix = (b * hw) as f32;
            let nslices = (b * c) as f32;
            // dice gradient in probability space, then chained through softmax
            for bi in 0..b {
                for i in 0..hw {
                    let t = labels[bi * hw + i] as usize;
                    let mut dot = 0.0f32;
                    let mut gp = [0.0f32; 8];
                    for ch in 0..c {
                        let idx = (bi * c + ch) * hw + i;
                        let tv = if ch == t { 1.0 } else { 0.0 };
                        let num = dice_num[bi * c + ch];
                        let den = dice_den[bi * c + ch];
                        let gd = -(2.0 * tv * den - num) / (den * den) / nslices;
                        gp[ch] = gd;
                        dot += probs[idx] * gd;
                    }
                    for ch in 0..c {
                        let idx = (bi * c + ch) * hw + i;
                        let tv = if ch == t { 1.0 } else { 0.0 };
                        let dice_term = probs[idx] * (gp[ch] - dot);
                        let ce_term = (probs[idx] - tv) / npix;
                        dx[idx] += g * (dice_term + ce_term);
                    }
                }
            }
        }
        OpRecord::Dropout { input, mask } => {
            let dx = acc(&mut gh[*input], gout.len());
            for i in 0..gout.len() {
                dx[i] += gout[i] * mask[i];
            }
        }
        OpRecord::GaussianNoise { input } => {
            add_into(acc(&mut gh[*input], gout.len()), gout);
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl Tensor {
    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn data(&self) -> Vec<f32> {
        self.graph.inner.borrow().nodes[self.id].data.clone()
    }

    pub fn to_data(&self) -> TensorData {
        TensorData {
            shape: self.shape,
            values: self.data(),
        }
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.graph.inner.borrow().grads[self.id].clone()
    }

    pub fn backward(&self) -> Result<(), TensorError> {
        self.graph.backward(self)
    }

    fn same_graph(&self, other: &Tensor) -> Result<(), TensorError> {
        if Rc::ptr_eq(&self.graph.inner, &other.graph.inner) {
            Ok(())
        } else {
            Err(TensorError::GraphMismatch)
        }
    }

    /// 3x3 convolution with "same" zero padding of 1. Stride 1 preserves
    /// (H, W); stride 2 halves them and requires both to be even.
    /// Weight layout is (Cout, Cin, 3, 3), bias (1, Cout, 1, 1).
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor, TensorError> {
        let ws = weight.shape;
        if ws.height != 3 || ws.width != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d expects a 3x3 kernel, got {ws}"
            )));
        }
        self.conv_impl(weight, bias, 3, stride)
    }

    /// 1x1 convolution (classification head). Stride is always 1.
    pub fn conv1x1(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        let ws = weight.shape;
        if ws.height != 1 || ws.width != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "conv1x1 expects a 1x1 kernel, got {ws}"
            )));
        }
        self.conv_impl(weight, bias, 1, 1)
    }

    fn conv_impl(
        &self,
        weight: &Tensor,
        bias: &Tensor,
        ksize: usize,
        stride: usize,
    ) -> Result<Tensor, TensorError> {
        self.same_graph(weight)?;
        self.same_graph(bias)?;
        let xs = self.shape;
        let ws = weight.shape;
        let (cout, cin) = (ws.batch, ws.channels);
        if !matches!(stride, 1 | 2) {
            return Err(TensorError::InvalidValue(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        if xs.channels != cin {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d input has {} channels but the kernel expects {cin}",
                xs.channels
            )));
        }
        if bias.shape != TensorShape::new(1, cout, 1, 1)? {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d bias must be (1, {cout}, 1, 1), got {}",
                bias.shape
            )));
        }
        if stride == 2 && (xs.height % 2 != 0 || xs.width % 2 != 0) {
            return Err(TensorError::ShapeMismatch(format!(
                "stride-2 conv2d requires even H and W, got {xs}"
            )));
        }
        let (oh, ow) = kernels::conv_out_hw(xs.height, xs.width, ksize, stride);
        let out_shape = TensorShape::new(xs.batch, cout, oh, ow)?;
        let mut out = vec![0.0f32; out_shape.numel()];
        {
            let inner = self.graph.inner.borrow();
            kernels::conv_forward(
                &inner.nodes[self.id].data,
                xs.batch,
                cin,
                xs.height,
                xs.width,
                &inner.nodes[weight.id].data,
                &inner.nodes[bias.id].data,
                cout,
                ksize,
                stride,
                &mut out,
            );
        }
        Ok(self.graph.push(
            out_shape,
            out,
            OpRecord::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                ksize,
                stride,
            },
        ))
    }

    /// 2x2 transposed convolution with stride 2 and no padding; doubles H and W.
    /// Weight layout is (Cin, Cout, 2, 2), bias (1, Cout, 1, 1).
    pub fn transposed_conv2d(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        self.same_graph(weight)?;
        self.same_graph(bias)?;
        let xs = self.shape;
        let ws = weight.shape;
        let (cin, cout) = (ws.batch, ws.channels);
        if ws.height != 2 || ws.width != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "transposed_conv2d expects a 2x2 kernel, got {ws}"
            )));
        }
        if xs.channels != cin {
            return Err(TensorError::ShapeMismatch(format!(
                "transposed_conv2d input has {} channels but the kernel expects {cin}",
                xs.channels
            )));
        }
        if bias.shape != TensorShape::new(1, cout, 1, 1)? {
            return Err(TensorError::ShapeMismatch(format!(
                "transposed_conv2d bias must be (1, {cout}, 1, 1), got {}",
                bias.shape
            )));
        }
        let out_shape = TensorShape::new(xs.batch, cout, 2 * xs.height, 2 * xs.width)?;
        let mut out = vec![0.0f32; out_shape.numel()];
        {
            let inner = self.graph.inner.borrow();
            kernels::tconv_forward(
                &inner.nodes[self.id].data,
                xs.batch,
                cin,
                xs.height,
                xs.width,
                &inner.nodes[weight.id].data,
                &inner.nodes[bias.id].data,
                cout,
                &mut out,
            );
        }
        Ok(self.graph.push(
            out_shape,
            out,
            OpRecord::TConv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
            },
        ))
    }

    /// 2x2 max pooling with stride 2. Backward routes each output gradient to
    /// the window argmax only (first element in scan order wins ties).
    pub fn max_pool2(&self) -> Result<Tensor, TensorError> {
        let xs = self.shape;
        if xs.height % 2 != 0 || xs.width % 2 != 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "max_pool2 requires even H and W, got {xs}"
            )));
        }
        let out_shape = TensorShape::new(xs.batch, xs.channels, xs.height / 2, xs.width / 2)?;
        let mut out = vec![0.0f32; out_shape.numel()];
        let mut argmax = vec![0u32; out_shape.numel()];
        {
            let inner = self.graph.inner.borrow();
            kernels::max_pool2_forward(
                &inner.nodes[self.id].data,
                xs.batch * xs.channels,
                xs.height,
                xs.width,
                &mut out,
                &mut argmax,
            );
        }
        Ok(self.graph.push(
            out_shape,
            out,
            OpRecord::MaxPool2 {
                input: self.id,
                argmax,
            },
        ))
    }

    /// Per-(b,c) normalization to zero mean / unit variance.
    pub fn instance_norm2d(&self, eps: f32) -> Result<Tensor, TensorError> {
        let xs = self.shape;
        if xs.hw() < 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "instance_norm2d needs H*W >= 2, got {xs}"
            )));
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidValue(format!(
                "instance_norm2d eps must be positive, got {eps}"
            )));
        }
        let planes = xs.batch * xs.channels;
        let mut out = vec![0.0f32; xs.numel()];
        let mut inv_std = vec![0.0f32; planes];
        {
            let inner = self.graph.inner.borrow();
            kernels::instance_norm_forward(
                &inner.nodes[self.id].data,
                planes,
                xs.hw(),
                eps,
                &mut out,
                &mut inv_std,
            );
        }
        Ok(self.graph.push(
            xs,
            out,
            OpRecord::InstanceNorm {
                input: self.id,
                inv_std,
            },
        ))
    }

    pub fn leaky_relu(&self) -> Tensor {
        let out = {
            let inner = self.graph.inner.borrow();
            inner.nodes[self.id]
                .data
                .iter()
                .map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
                .collect()
        };
        self.graph
            .push(self.shape, out, OpRecord::LeakyRelu { input: self.id })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(other, "add", |a, b| a + b, |a, b| OpRecord::Add { a, b })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(other, "sub", |a, b| a - b, |a, b| OpRecord::Sub { a, b })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(other, "mul", |a, b| a * b, |a, b| OpRecord::Mul { a, b })
    }

    fn binary(
        &self,
        other: &Tensor,
        name: &str,
        f: impl Fn(f32, f32) -> f32,
        rec: impl Fn(usize, usize) -> OpRecord,
    ) -> Result<Tensor, TensorError> {
        self.same_graph(other)?;
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(format!(
                "{name} requires identical shapes, got {} vs {}",
                self.shape, other.shape
            )));
        }
        let out = {
            let inner = self.graph.inner.borrow();
            inner.nodes[self.id]
                .data
                .iter()
                .zip(&inner.nodes[other.id].data)
                .map(|(&a, &b)| f(a, b))
                .collect()
        };
        Ok(self.graph.push(self.shape, out, rec(self.id, other.id)))
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        let out = {
            let inner = self.graph.inner.borrow();
            inner.nodes[self.id].data.iter().map(|&v| factor * v).collect()
        };
        self.graph.push(
            self.shape,
            out,
            OpRecord::Scale {
                input: self.id,
                factor,
            },
        )
    }

    /// Softmax over the channel axis; output sums to 1 at every (b,h,w).
    pub fn softmax_channels(&self) -> Tensor {
        let xs = self.shape;
        let mut out = vec![0.0f32; xs.numel()];
        {
            let inner = self.graph.inner.borrow();
            kernels::softmax_channels_forward(
                &inner.nodes[self.id].data,
                xs.batch,
                xs.channels,
                xs.hw(),
                &mut out,
            );
        }
        self.graph
            .push(xs, out, OpRecord::SoftmaxChannels { input: self.id })
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        let mut s = 0.0f32;
        {
            let inner = self.graph.inner.borrow();
            for v in &inner.nodes[self.id].data {
                s += *v;
            }
        }
        self.graph.push(
            TensorShape::scalar(),
            vec![s],
            OpRecord::SumAll { input: self.id },
        )
    }

    /// Euclidean norm over all elements (un-squared), as a scalar tensor.
    pub fn norm2(&self) -> Tensor {
        let mut s = 0.0f32;
        {
            let inner = self.graph.inner.borrow();
            for v in &inner.nodes[self.id].data {
                s += *v * *v;
            }
        }
        self.graph.push(
            TensorShape::scalar(),
            vec![s.sqrt()],
            OpRecord::Norm2 { input: self.id },
        )
    }

    /// Anisotropic total variation normalized by element count; needs H,W >= 2.
    pub(crate) fn total_variation_op(&self) -> Result<Tensor, TensorError> {
        let xs = self.shape;
        if xs.height < 2 || xs.width < 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "total variation needs H,W >= 2, got {xs}"
            )));
        }
        let tv = {
            let inner = self.graph.inner.borrow();
            kernels::total_variation_forward(
                &inner.nodes[self.id].data,
                xs.batch * xs.channels,
                xs.height,
                xs.width,
            )
        };
        Ok(self.graph.push(
            TensorShape::scalar(),
            vec![tv],
            OpRecord::TotalVariation { input: self.id },
        ))
    }

    /// Soft-Dice (all classes, smoothing `smooth`) plus mean pixelwise
    /// cross-entropy, computed on channel softmax of `self` as logits.
    /// `labels` are per-pixel class ids of shape (B, 1, H, W).
    pub(crate) fn dice_ce_op(&self, labels: &[u8], smooth: f32) -> Result<Tensor, TensorError> {
        let xs = self.shape;
        let (b, c, hw) = (xs.batch, xs.channels, xs.hw());
        if c > 8 {
            return Err(TensorError::InvalidShape(format!(
                "dice_ce supports up to 8 classes, got {c}"
            )));
        }
        if labels.len() != b * hw {
            return Err(TensorError::DataLength {
                got: labels.len(),
                want: b * hw,
                shape: TensorShape::new(b, 1, xs.height, xs.width)?,
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(TensorError::InvalidValue(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0f32; xs.numel()];
        {
            let inner = self.graph.inner.borrow();
            kernels::softmax_channels_forward(&inner.nodes[self.id].data, b, c, hw, &mut probs);
        }
        // per-(b,c): num = 2*sum(p*t) + smooth, den = sum(p) + sum(t) + smooth
        let mut dice_num = vec![smooth; b * c];
        let mut dice_den = vec![smooth; b * c];
        let mut ce = 0.0f32;
        for bi in 0..b {
            for i in 0..hw {
                let t = labels[bi * hw + i] as usize;
                let pt = probs[(bi * c + t) * hw + i];
                ce -= pt.max(1e-12).ln();
                for ch in 0..c {
                    let p = probs[(bi * c + ch) * hw + i];
                    dice_den[bi * c + ch] += p;
                    if ch == t {
                        dice_num[bi * c + ch] += 2.0 * p;
                        dice_den[bi * c + ch] += 1.0;
                    }
                }
            }
        }
        ce /= (b * hw) as f32;
        let mut dice_mean = 0.0f32;
        for s in 0..b * c {
            dice_mean += dice_num[s] / dice_den[s];
        }
        dice_mean /= (b * c) as f32;
        let loss = (1.0 - dice_mean) + ce;
        Ok(self.graph.push(
            TensorShape::scalar(),
            vec![loss],
            OpRecord::DiceCe {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
                dice_num,
                dice_den,
            },
        ))
    }

    /// Inverted dropout with a caller-supplied mask of 0.0 / (1/(1-p)) factors.
    pub(crate) fn dropout_op(&self, mask: Vec<f32>) -> Result<Tensor, TensorError> {
        if mask.len() != self.shape.numel() {
            return Err(TensorError::DataLength {
                got: mask.len(),
                want: self.shape.numel(),
                shape: self.shape,
            });
        }
        let out = {
            let inner = self.graph.inner.borrow();
            inner.nodes[self.id]
                .data
                .iter()
                .zip(&mask)
                .map(|(&v, &m)| v * m)
                .collect()
        };
        Ok(self.graph.push(
            self.shape,
            out,
            OpRecord::Dropout {
                input: self.id,
                mask,
            },
        ))
    }

    /// Additive noise with identity Jacobian; `noise` is added elementwise.
    pub(crate) fn add_noise_op(&self, noise: &[f32]) -> Result<Tensor, TensorError> {
        if noise.len() != self.shape.numel() {
            return Err(TensorError::DataLength {
                got: noise.len(),
                want: self.shape.numel(),
                shape: self.shape,
            });
        }
        let out = {
            let inner = self.graph.inner.borrow();
            inner.nodes[self.id]
                .data
                .iter()
                .zip(noise)
                .map(|(&v, &n)| v + n)
                .collect()
        };
        Ok(self
            .graph
            .push(self.shape, out, OpRecord::GaussianNoise { input: self.id }))
    }
}
