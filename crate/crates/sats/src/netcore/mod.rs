//! Compact differentiable per-pixel segmentation network: three 3x3 conv
//! layers with tanh activations (3 -> 16 -> 16 -> 16 channels) and a 1x1
//! classifier head with K or K+1 output channels. All arithmetic is f64 so
//! analytic gradients survive finite-difference scrutiny.

mod checkpoint;
mod conv;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{optimizer_step, optimizer_step_scaled, OptimConfig, OptimState};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datamodel::{LabelMap, LabeledImage, ProbMap, IGNORE_INDEX};
use crate::{Error, Result};

/// Hidden width of every conv layer and of the head input.
pub const HIDDEN_CHANNELS: usize = 16;

/// One 3x3 convolution layer, weights `[out][in][ky*3+kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvLayer {
    fn zeros(in_channels: usize, out_channels: usize) -> Self {
        ConvLayer {
            weights: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
            in_channels,
            out_channels,
        }
    }

    fn random(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / ((in_channels * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut layer = ConvLayer::zeros(in_channels, out_channels);
        for w in layer.weights.iter_mut() {
            *w = normal.sample(rng);
        }
        layer
    }
}

/// Which learning-rate group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
}

/// Parameters of the segmentation network; also used as the container for
/// gradients and optimizer moments, which share its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    /// `[head_channels][HIDDEN_CHANNELS]`
    pub head_weights: Vec<f64>,
    pub head_bias: Vec<f64>,
    pub num_known: usize,
}

impl NetworkParams {
    /// Random initialization with a K-channel head (one output per known
    /// class); expand with [`expand_head`] before open-set training.
    pub fn init(num_known: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = ConvLayer::random(3, HIDDEN_CHANNELS, &mut rng);
        let conv2 = ConvLayer::random(HIDDEN_CHANNELS, HIDDEN_CHANNELS, &mut rng);
        let conv3 = ConvLayer::random(HIDDEN_CHANNELS, HIDDEN_CHANNELS, &mut rng);
        let head_std = 1.0 / (HIDDEN_CHANNELS as f64).sqrt();
        let normal = Normal::new(0.0, head_std).expect("valid std");
        let head_weights = (0..num_known * HIDDEN_CHANNELS)
            .map(|_| normal.sample(&mut rng))
            .collect();
        NetworkParams {
            conv1,
            conv2,
            conv3,
            head_weights,
            head_bias: vec![0.0; num_known],
            num_known,
        }
    }

    pub fn head_channels(&self) -> usize {
        self.head_bias.len()
    }

    /// True once the head carries the extra unknown channel.
    pub fn is_expanded(&self) -> bool {
        self.head_channels() == self.num_known + 1
    }

    /// Same shapes, all values zero; the gradient/moment container.
    pub fn zeros_like(&self) -> Self {
        NetworkParams {
            conv1: ConvLayer::zeros(self.conv1.in_channels, self.conv1.out_channels),
            conv2: ConvLayer::zeros(self.conv2.in_channels, self.conv2.out_channels),
            conv3: ConvLayer::zeros(self.conv3.in_channels, self.conv3.out_channels),
            head_weights: vec![0.0; self.head_weights.len()],
            head_bias: vec![0.0; self.head_bias.len()],
            num_known: self.num_known,
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.num_known == other.num_known
            && self.head_weights.len() == other.head_weights.len()
            && self.head_bias.len() == other.head_bias.len()
            && self.conv1.weights.len() == other.conv1.weights.len()
            && self.conv2.weights.len() == other.conv2.weights.len()
            && self.conv3.weights.len() == other.conv3.weights.len()
    }

    /// All tensors with their learning-rate group, in a fixed order.
    pub fn tensors(&self) -> [(&[f64], ParamGroup); 8] {
        [
            (&self.conv1.weights, ParamGroup::Backbone),
            (&self.conv1.bias, ParamGroup::Backbone),
            (&self.conv2.weights, ParamGroup::Backbone),
            (&self.conv2.bias, ParamGroup::Backbone),
            (&self.conv3.weights, ParamGroup::Backbone),
            (&self.conv3.bias, ParamGroup::Backbone),
            (&self.head_weights, ParamGroup::Head),
            (&self.head_bias, ParamGroup::Head),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&mut Vec<f64>, ParamGroup); 8] {
        let NetworkParams {
            conv1,
            conv2,
            conv3,
            head_weights,
            head_bias,
            ..
        } = self;
        [
            (&mut conv1.weights, ParamGroup::Backbone),
            (&mut conv1.bias, ParamGroup::Backbone),
            (&mut conv2.weights, ParamGroup::Backbone),
            (&mut conv2.bias, ParamGroup::Backbone),
            (&mut conv3.weights, ParamGroup::Backbone),
            (&mut conv3.bias, ParamGroup::Backbone),
            (head_weights, ParamGroup::Head),
            (head_bias, ParamGroup::Head),
        ]
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(t, _)| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn axpy(&mut self, other: &Self, scale: f64) {
        debug_assert!(self.same_shape(other));
        for ((dst, _), (src, _)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (tensor, _) in self.tensors() {
            if tensor.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: context.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Activations retained by a forward pass for backpropagation.
pub struct ForwardTrace {
    /// Normalized input planes, `[3][h*w]`.
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    a3: Vec<f64>,
    /// Pre-softmax head outputs, `[C][h*w]`.
    pub logits: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

fn normalize_input(image: &LabeledImage) -> Vec<f64> {
    let n = image.width * image.height;
    let mut planes = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            planes[c * n + p] = f64::from(image.pixels[3 * p + c]) / 255.0 - 0.5;
        }
    }
    planes
}

fn tanh_inplace(buf: &mut [f64]) {
    for v in buf.iter_mut() {
        *v = v.tanh();
    }
}

fn check_plane_finite(buf: &[f64], layer: &str) -> Result<()> {
    if buf.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("activation of {layer}"),
        });
    }
    Ok(())
}

/// Run the network, keeping activations for a later backward pass.
pub fn forward_trace(params: &NetworkParams, image: &LabeledImage) -> Result<ForwardTrace> {
    let (h, w) = (image.height, image.width);
    if h < 8 || w < 8 {
        return Err(Error::validation(format!(
            "input must be at least 8x8, got {w}x{h}"
        )));
    }
    let n = h * w;
    let input = normalize_input(image);
    let mut padded = Vec::new();

    conv::pad_planes(&input, 3, h, w, &mut padded);
    let mut a1 = vec![0.0; HIDDEN_CHANNELS * n];
    conv::forward(&padded, 3, h, w, &params.conv1.weights, &params.conv1.bias, &mut a1);
    tanh_inplace(&mut a1);
    check_plane_finite(&a1, "conv1")?;

    conv::pad_planes(&a1, HIDDEN_CHANNELS, h, w, &mut padded);
    let mut a2 = vec![0.0; HIDDEN_CHANNELS * n];
    conv::forward(&padded, HIDDEN_CHANNELS, h, w, &params.conv2.weights, &params.conv2.bias, &mut a2);
    tanh_inplace(&mut a2);
    check_plane_finite(&a2, "conv2")?;

    conv::pad_planes(&a2, HIDDEN_CHANNELS, h, w, &mut padded);
    let mut a3 = vec![0.0; HIDDEN_CHANNELS * n];
    conv::forward(&padded, HIDDEN_CHANNELS, h, w, &params.conv3.weights, &params.conv3.bias, &mut a3);
    tanh_inplace(&mut a3);
    check_plane_finite(&a3, "conv3")?;

    let channels = params.head_channels();
    let mut logits = vec![0.0; channels * n];
    for c in 0..channels {
        let row = &mut logits[c * n..(c + 1) * n];
        row.fill(params.head_bias[c]);
        for f in 0..HIDDEN_CHANNELS {
            let k = params.head_weights[c * HIDDEN_CHANNELS + f];
            let feat = &a3[f * n..(f + 1) * n];
            for (r, v) in row.iter_mut().zip(feat) {
                *r += k * v;
            }
        }
    }
    check_plane_finite(&logits, "head")?;

    Ok(ForwardTrace {
        input,
        a1,
        a2,
        a3,
        logits,
        width: w,
        height: h,
    })
}

/// Per-pixel softmax of the head logits.
fn softmax(logits: &[f64], channels: usize, n: usize) -> Vec<f64> {
    let mut probs = vec![0.0; channels * n];
    for p in 0..n {
        let mut max = f64::NEG_INFINITY;
        for c in 0..channels {
            max = max.max(logits[c * n + p]);
        }
        let mut sum = 0.0;
        for c in 0..channels {
            let e = (logits[c * n + p] - max).exp();
            probs[c * n + p] = e;
            sum += e;
        }
        for c in 0..channels {
            probs[c * n + p] /= sum;
        }
    }
    probs
}

/// Full forward pass producing a normalized probability map.
pub fn forward(params: &NetworkParams, image: &LabeledImage) -> Result<ProbMap> {
    let trace = forward_trace(params, image)?;
    let channels = params.head_channels();
    let n = trace.width * trace.height;
    Ok(ProbMap {
        probs: softmax(&trace.logits, channels, n),
        channels,
        width: trace.width,
        height: trace.height,
    })
}

/// Mean cross-entropy over non-ignore pixels plus its gradient, optionally
/// scaled by a confidence weight. A zero weight or an all-ignore label
/// yields zero loss and zero gradients.
fn ce_loss_and_grad(
    params: &NetworkParams,
    image: &LabeledImage,
    label: &LabelMap,
    weight: f64,
) -> Result<(f64, NetworkParams)> {
    if label.width != image.width || label.height != image.height {
        return Err(Error::DimensionMismatch(format!(
            "label is {}x{} but image is {}x{}",
            label.width, label.height, image.width, image.height
        )));
    }
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::validation(format!(
            "confidence weight must be in [0,1], got {weight}"
        )));
    }
    let channels = params.head_channels();
    if weight == 0.0 {
        return Ok((0.0, params.zeros_like()));
    }

    let trace = forward_trace(params, image)?;
    let (h, w) = (trace.height, trace.width);
    let n = h * w;
    let probs = softmax(&trace.logits, channels, n);

    let counted = label
        .values
        .iter()
        .filter(|&&v| v != IGNORE_INDEX)
        .count();
    if counted == 0 {
        return Ok((0.0, params.zeros_like()));
    }

    // Loss and gradient w.r.t. logits in one pass.
    let mut loss = 0.0;
    let mut glogits = vec![0.0; channels * n];
    let inv = weight / counted as f64;
    for (p, &y) in label.values.iter().enumerate() {
        if y == IGNORE_INDEX {
            continue;
        }
        let y = usize::from(y);
        if y >= channels {
            return Err(Error::validation(format!(
                "label value {y} needs channel {y} but the head has {channels}"
            )));
        }
        loss -= probs[y * n + p].max(f64::MIN_POSITIVE).ln();
        for c in 0..channels {
            let indicator = f64::from(c == y);
            glogits[c * n + p] = (probs[c * n + p] - indicator) * inv;
        }
    }
    loss = loss * weight / counted as f64;

    // Backward through the head (1x1), then the conv stack.
    let mut grads = params.zeros_like();
    let mut ga3 = vec![0.0; HIDDEN_CHANNELS * n];
    for c in 0..channels {
        let g_row = &glogits[c * n..(c + 1) * n];
        grads.head_bias[c] = g_row.iter().sum();
        for f in 0..HIDDEN_CHANNELS {
            let feat = &trace.a3[f * n..(f + 1) * n];
            let mut acc = 0.0;
            let k = params.head_weights[c * HIDDEN_CHANNELS + f];
            let ga3_row = &mut ga3[f * n..(f + 1) * n];
            for ((g, a), ga) in g_row.iter().zip(feat).zip(ga3_row.iter_mut()) {
                acc += g * a;
                *ga += k * g;
            }
            grads.head_weights[c * HIDDEN_CHANNELS + f] = acc;
        }
    }

    let mut padded = Vec::new();

    // conv3: dz3 = ga3 * (1 - a3^2)
    let mut dz = ga3;
    for (d, a) in dz.iter_mut().zip(&trace.a3) {
        *d *= 1.0 - a * a;
    }
    conv::pad_planes(&trace.a2, HIDDEN_CHANNELS, h, w, &mut padded);
    conv::backward_params(
        &dz,
        HIDDEN_CHANNELS,
        &padded,
        HIDDEN_CHANNELS,
        h,
        w,
        &mut grads.conv3.weights,
        &mut grads.conv3.bias,
    );
    let mut ga2 = vec![0.0; HIDDEN_CHANNELS * n];
    conv::pad_planes(&dz, HIDDEN_CHANNELS, h, w, &mut padded);
    conv::backward_input(
        &padded,
        HIDDEN_CHANNELS,
        HIDDEN_CHANNELS,
        h,
        w,
        &params.conv3.weights,
        &mut ga2,
    );

    // conv2
    let mut dz = ga2;
    for (d, a) in dz.iter_mut().zip(&trace.a2) {
        *d *= 1.0 - a * a;
    }
    conv::pad_planes(&trace.a1, HIDDEN_CHANNELS, h, w, &mut padded);
    conv::backward_params(
        &dz,
        HIDDEN_CHANNELS,
        &padded,
        HIDDEN_CHANNELS,
        h,
        w,
        &mut grads.conv2.weights,
        &mut grads.conv2.bias,
    );
    let mut ga1 = vec![0.0; HIDDEN_CHANNELS * n];
    conv::pad_planes(&dz, HIDDEN_CHANNELS, h, w, &mut padded);
    conv::backward_input(
        &padded,
        HIDDEN_CHANNELS,
        HIDDEN_CHANNELS,
        h,
        w,
        &params.conv2.weights,
        &mut ga1,
    );

    // conv1; the gradient w.r.t. the image itself is not needed.
    let mut dz = ga1;
    for (d, a) in dz.iter_mut().zip(&trace.a1) {
        *d *= 1.0 - a * a;
    }
    conv::pad_planes(&trace.input, 3, h, w, &mut padded);
    conv::backward_params(
        &dz,
        HIDDEN_CHANNELS,
        &padded,
        3,
        h,
        w,
        &mut grads.conv1.weights,
        &mut grads.conv1.bias,
    );

    Ok((loss, grads))
}

/// Cross-entropy of the network prediction against a ground-truth label,
/// averaged over non-ignore pixels.
pub fn supervised_loss_and_grad(
    params: &NetworkParams,
    image: &LabeledImage,
    label: &LabelMap,
) -> Result<(f64, NetworkParams)> {
    ce_loss_and_grad(params, image, label, 1.0)
}

/// Supervised loss scaled by a pseudo-label confidence weight.
pub fn weighted_target_loss_and_grad(
    params: &NetworkParams,
    image: &LabeledImage,
    pseudo_label: &LabelMap,
    weight: f64,
) -> Result<(f64, NetworkParams)> {
    ce_loss_and_grad(params, image, pseudo_label, weight)
}

/// Add the unknown output channel: the K known head rows are preserved
/// bit-exactly and the new row starts at zero, a neutral prior under
/// softmax.
pub fn expand_head(params: &NetworkParams) -> Result<NetworkParams> {
    if params.is_expanded() {
        return Err(Error::validation("head is already expanded to K+1"));
    }
    if params.head_channels() != params.num_known {
        return Err(Error::validation(format!(
            "head has {} channels for {} known classes",
            params.head_channels(),
            params.num_known
        )));
    }
    let mut out = params.clone();
    out.head_weights.extend(std::iter::repeat_n(0.0, HIDDEN_CHANNELS));
    out.head_bias.push(0.0);
    Ok(out)
}

/// Exponential-moving-average update of the teacher toward the student:
/// every parameter becomes `alpha * teacher + (1 - alpha) * student`.
pub fn ema_update(
    teacher: &NetworkParams,
    student: &NetworkParams,
    alpha: f64,
) -> Result<NetworkParams> {
    if !teacher.same_shape(student) {
        return Err(Error::DimensionMismatch(
            "teacher and student shapes differ".into(),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation(format!(
            "smoothing factor must be in [0,1], got {alpha}"
        )));
    }
    let mut out = teacher.clone();
    for ((dst, _), (src, _)) in out.tensors_mut().into_iter().zip(student.tensors()) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = alpha * *d + (1.0 - alpha) * s;
        }
    }
    Ok(out)
}
