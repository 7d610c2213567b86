//! Quantized neural networks with full-precision shadow weights.
//!
//! Training keeps two copies of the parameters: the shadow weights, which SGD
//! updates and clips to `[-1, 1]`, and their stochastic quantization, which the
//! forward pass uses. Hidden activations are clipped to `[-1, 1]` and quantized
//! before they feed the next layer. The backward pass treats the quantizer as
//! the identity (straight-through), while batch-norm, the loss and the weight
//! update run at full precision.

use std::path::Path;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{self, clip_unit, quantize_vector, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `±1`; backpropagates as hard-tanh.
    Sign,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        height: usize,
        width: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    },
    MaxPool {
        height: usize,
        width: usize,
        channels: usize,
        size: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub batchnorm: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense {
                inputs,
                outputs,
                bias: true,
            },
            batchnorm: false,
            activation,
        }
    }

    pub fn with_batchnorm(mut self) -> Self {
        self.batchnorm = true;
        self
    }

    pub fn input_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv2d {
                height,
                width,
                in_channels,
                ..
            } => height * width * in_channels,
            LayerKind::MaxPool {
                height,
                width,
                channels,
                ..
            } => height * width * channels,
        }
    }

    pub fn output_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv2d { out_channels, .. } => {
                let (h, w) = self.conv_output_hw();
                h * w * out_channels
            }
            LayerKind::MaxPool {
                height,
                width,
                channels,
                size,
            } => (height / size) * (width / size) * channels,
        }
    }

    fn conv_output_hw(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv2d {
                height,
                width,
                kernel,
                stride,
                padding,
                ..
            } => {
                let out = |x: usize| match padding {
                    Padding::Same => x.div_ceil(stride),
                    Padding::Valid => (x + 1).saturating_sub(kernel).div_ceil(stride),
                };
                (out(height), out(width))
            }
            _ => (0, 0),
        }
    }

    fn check(&self) -> Result<()> {
        let bad = match self.kind {
            LayerKind::Dense { inputs, outputs, .. } => inputs == 0 || outputs == 0,
            LayerKind::Conv2d {
                height,
                width,
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                height == 0
                    || width == 0
                    || in_channels == 0
                    || out_channels == 0
                    || kernel == 0
                    || stride == 0
                    || self.output_len() == 0
            }
            LayerKind::MaxPool { size, .. } => size == 0 || self.output_len() == 0,
        };
        if bad {
            return Err(Error::shape(format!("degenerate layer {:?}", self.kind)));
        }
        Ok(())
    }
}

/// Checks every layer is well formed and each output feeds the next input.
pub fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    for (i, layer) in layers.iter().enumerate() {
        layer.check().map_err(|e| Error::shape(format!("layer {i}: {e}")))?;
    }
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[0].output_len() != pair[1].input_len() {
            return Err(Error::shape(format!(
                "layer {i} emits {} values but layer {} expects {}",
                pair[0].output_len(),
                i + 1,
                pair[1].input_len()
            )));
        }
    }
    Ok(())
}

/// Architecture counts consumed by the energy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NetworkArch {
    /// MAC operations per local iteration, `N_c`.
    pub n_mac: u64,
    /// Trainable parameters including biases, `N_s`; also the model dimension `d`.
    pub n_weights: u64,
    /// Intermediate outputs of the compute layers, `O_s`.
    pub n_outputs: u64,
}

impl NetworkArch {
    pub fn new(n_mac: u64, n_weights: u64, n_outputs: u64) -> Self {
        Self {
            n_mac,
            n_weights,
            n_outputs,
        }
    }

    pub fn dim(&self) -> u64 {
        self.n_weights
    }
}

/// Counts MACs, weights and outputs. Pooling layers add none of the three.
pub fn count_arch(layers: &[LayerSpec]) -> NetworkArch {
    let mut arch = NetworkArch::default();
    for layer in layers {
        match layer.kind {
            LayerKind::Dense {
                inputs,
                outputs,
                bias,
            } => {
                let (i, o) = (inputs as u64, outputs as u64);
                arch.n_mac += i * o;
                arch.n_weights += i * o + if bias { o } else { 0 };
                arch.n_outputs += o;
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let (h, w) = layer.conv_output_hw();
                let taps = (kernel * kernel * in_channels) as u64;
                let oc = out_channels as u64;
                arch.n_mac += (h * w) as u64 * oc * taps;
                arch.n_weights += taps * oc + if bias { oc } else { 0 };
                arch.n_outputs += (h * w) as u64 * oc;
            }
            LayerKind::MaxPool { .. } => {}
        }
    }
    arch
}

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Vec<f64>,
    width: usize,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, width: usize, labels: Vec<usize>) -> Result<Self> {
        if width == 0 && !inputs.is_empty() {
            return Err(Error::shape("zero-width rows"));
        }
        if width > 0 && inputs.len() != width * labels.len() {
            return Err(Error::shape(format!(
                "{} values do not form {} rows of width {width}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self {
            inputs,
            width,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.width..(i + 1) * self.width]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    /// Concatenates shards into one dataset.
    pub fn union<'a>(shards: impl IntoIterator<Item = &'a Dataset>) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut width = None;
        for shard in shards {
            match width {
                None => width = Some(shard.width),
                Some(w) if w != shard.width => {
                    return Err(Error::shape("shards disagree on feature width"))
                }
                _ => {}
            }
            inputs.extend_from_slice(&shard.inputs);
            labels.extend_from_slice(&shard.labels);
        }
        Dataset::new(inputs, width.unwrap_or(0), labels)
    }

    /// Uniform sample of `size` rows with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<MiniBatch> {
        if self.is_empty() {
            return Err(Error::domain("cannot sample from an empty shard"));
        }
        let mut inputs = Vec::with_capacity(size * self.width);
        let mut labels = Vec::with_capacity(size);
        for _ in 0..size {
            let i = rng.random_range(0..self.len());
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        MiniBatch::new(inputs, self.width, labels)
    }

    pub fn as_batch(&self) -> MiniBatch {
        MiniBatch {
            inputs: self.inputs.clone(),
            width: self.width,
            labels: self.labels.clone(),
        }
    }

    /// Reads `label,x0,x1,...` rows with a header line.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut width = None;
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let w = record.len().saturating_sub(1);
            if *width.get_or_insert(w) != w || w == 0 {
                return Err(Error::shape(format!("row {line} has {w} features")));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::shape(format!("row {line}: {e}")))
            };
            let label = record[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::shape(format!("row {line} label: {e}")))?;
            labels.push(label);
            for field in record.iter().skip(1) {
                inputs.push(parse(field)?);
            }
        }
        Dataset::new(inputs, width.unwrap_or(0), labels)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header = vec!["label".to_string()];
        header.extend((0..self.width).map(|j| format!("x{j}")));
        writer.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![self.labels[i].to_string()];
            row.extend(self.row(i).iter().map(|x| x.to_string()));
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// `classes` Gaussian clusters with centres uniform in `±0.6` and per-coordinate
/// standard deviation `spread`, clipped to `[-1, 1]`. Rows are grouped by class.
pub fn synthetic_blobs<R: Rng + ?Sized>(
    classes: usize,
    width: usize,
    per_class: usize,
    spread: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if classes == 0 || width == 0 || per_class == 0 {
        return Err(Error::domain("blobs need classes, width and points"));
    }
    let noise = Normal::new(0.0, spread).map_err(|e| Error::domain(format!("spread {spread}: {e}")))?;
    let mut inputs = Vec::with_capacity(classes * per_class * width);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let centre: Vec<f64> = (0..width).map(|_| rng.random_range(-0.6..=0.6)).collect();
        for _ in 0..per_class {
            inputs.extend(centre.iter().map(|m| (m + noise.sample(rng)).clamp(-1.0, 1.0)));
            labels.push(c);
        }
    }
    Dataset::new(inputs, width, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    inputs: Vec<f64>,
    width: usize,
    labels: Vec<usize>,
}

impl MiniBatch {
    pub fn new(inputs: Vec<f64>, width: usize, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != width * labels.len() {
            return Err(Error::shape(format!(
                "batch of {} labels needs {} inputs, got {}",
                labels.len(),
                width * labels.len(),
                inputs.len()
            )));
        }
        Ok(Self {
            inputs,
            width,
            labels,
        })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.width..(i + 1) * self.width]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Shadow weights and the quantized copy the forward pass reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    shadow: Vec<f64>,
    quantized: Vec<f64>,
    precision: Precision,
}

impl ModelState {
    /// Quantizes `shadow`, which must already lie in `[-1, 1]`.
    pub fn new<R: Rng + ?Sized>(shadow: Vec<f64>, precision: Precision, rng: &mut R) -> Result<Self> {
        let quantized = quantize_vector(&shadow, precision, rng)?.into_values();
        Ok(Self {
            shadow,
            quantized,
            precision,
        })
    }

    pub fn shadow(&self) -> &[f64] {
        &self.shadow
    }

    pub fn quantized(&self) -> &[f64] {
        &self.quantized
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn dim(&self) -> usize {
        self.shadow.len()
    }

    /// Re-quantizes the shadow weights.
    pub fn sync<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.quantized = quantize_vector(&self.shadow, self.precision, rng)?.into_values();
        Ok(())
    }
}

/// How the forward pass treats hidden activations.
pub enum ActQuant<'a> {
    /// Full precision; activations are still clipped to `[-1, 1]`.
    Off,
    Stochastic {
        precision: Precision,
        rng: &'a mut dyn RngCore,
    },
}

impl ActQuant<'_> {
    fn apply(&mut self, values: &mut [f64]) -> Result<()> {
        for v in values.iter_mut() {
            *v = clip_unit(*v)?;
        }
        if let ActQuant::Stochastic { precision, rng } = self {
            let kappa = precision.step();
            for v in values.iter_mut() {
                *v = quantizer::round_with(*v, kappa, rng.random());
            }
        }
        Ok(())
    }
}

/// A differentiable local objective trained by devices.
pub trait Learner: Send + Sync {
    fn dim(&self) -> usize;

    fn arch(&self) -> NetworkArch;

    /// Mean batch loss and its gradient at `weights` (normally the quantized copy).
    fn loss_and_grad(&self, weights: &[f64], batch: &MiniBatch, act: &mut ActQuant<'_>) -> Result<(f64, Vec<f64>)>;

    /// Full-precision mean loss over a dataset.
    fn loss(&self, weights: &[f64], data: &Dataset) -> Result<f64>;

    /// Layer that owns parameter `index`, for diagnostics.
    fn layer_of(&self, _index: usize) -> usize {
        0
    }
}

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct Dense {
    inputs: usize,
    outputs: usize,
    bias: bool,
    batchnorm: bool,
    activation: Activation,
    offset: usize,
}

impl Dense {
    fn weight_len(&self) -> usize {
        self.inputs * self.outputs + if self.bias { self.outputs } else { 0 }
    }
}

struct LayerTrace {
    input: Vec<f64>,
    // Normalized pre-activation when batch-norm is on, else unused.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    // Pre-activation after batch-norm.
    pre: Vec<f64>,
    // Post-activation before clip/quantization.
    post: Vec<f64>,
}

/// Multi-layer perceptron classifier with softmax cross-entropy.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    specs: Vec<LayerSpec>,
    dim: usize,
}

pub struct ForwardPass {
    pub outputs: Vec<Vec<f64>>,
    pub loss: f64,
}

impl Mlp {
    /// Builds a trainable network from dense layer specs.
    pub fn new(specs: &[LayerSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::shape("network needs at least one layer"));
        }
        validate_layers(specs)?;
        let mut layers = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for (i, spec) in specs.iter().enumerate() {
            let LayerKind::Dense {
                inputs,
                outputs,
                bias,
            } = spec.kind
            else {
                return Err(Error::shape(format!(
                    "layer {i}: only dense layers are trainable"
                )));
            };
            let layer = Dense {
                inputs,
                outputs,
                bias,
                batchnorm: spec.batchnorm,
                activation: spec.activation,
                offset,
            };
            offset += layer.weight_len();
            layers.push(layer);
        }
        Ok(Self {
            layers,
            specs: specs.to_vec(),
            dim: offset,
        })
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    /// Uniform Glorot initialisation inside `[-1, 1]`, zero biases.
    pub fn init_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut w = vec![0.0; self.dim];
        for l in &self.layers {
            let limit = (6.0 / (l.inputs + l.outputs) as f64).sqrt().min(1.0);
            for v in &mut w[l.offset..l.offset + l.inputs * l.outputs] {
                *v = rng.random_range(-limit..=limit);
            }
        }
        w
    }

    /// Quantized forward pass with the model's quantized weights.
    pub fn forward<R: RngCore>(&self, model: &ModelState, batch: &MiniBatch, rng: &mut R) -> Result<ForwardPass> {
        let mut act = ActQuant::Stochastic {
            precision: model.precision(),
            rng,
        };
        let (traces, logits) = self.run(model.quantized(), batch, &mut act)?;
        drop(traces);
        let c = self.classes();
        let loss = softmax_xent(&logits, batch.labels(), c, None)?;
        Ok(ForwardPass {
            outputs: logits.chunks(c).map(<[f64]>::to_vec).collect(),
            loss,
        })
    }

    fn run(&self, weights: &[f64], batch: &MiniBatch, act: &mut ActQuant<'_>) -> Result<(Vec<LayerTrace>, Vec<f64>)> {
        if weights.len() != self.dim {
            return Err(Error::shape(format!(
                "model has {} parameters, network needs {}",
                weights.len(),
                self.dim
            )));
        }
        if batch.width() != self.input_width() {
            return Err(Error::shape(format!(
                "batch width {} does not match network input {}",
                batch.width(),
                self.input_width()
            )));
        }
        let b = batch.size();
        let mut current = batch.inputs.clone();
        act.apply(&mut current)?;
        let mut traces = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let w = &weights[l.offset..l.offset + l.inputs * l.outputs];
            let mut pre = vec![0.0; b * l.outputs];
            for r in 0..b {
                let x = &current[r * l.inputs..(r + 1) * l.inputs];
                for o in 0..l.outputs {
                    let row = &w[o * l.inputs..(o + 1) * l.inputs];
                    let mut s: f64 = row.iter().zip(x).map(|(a, c)| a * c).sum();
                    if l.bias {
                        s += weights[l.offset + l.inputs * l.outputs + o];
                    }
                    pre[r * l.outputs + o] = s;
                }
            }
            let (xhat, inv_std) = if l.batchnorm {
                let (xhat, inv_std) = batchnorm_forward(&pre, b, l.outputs);
                pre.copy_from_slice(&xhat);
                (xhat, inv_std)
            } else {
                (Vec::new(), Vec::new())
            };
            let post: Vec<f64> = pre.iter().map(|&z| activate(l.activation, z)).collect();
            let mut next = post.clone();
            if li != last {
                act.apply(&mut next)?;
            }
            traces.push(LayerTrace {
                input: std::mem::replace(&mut current, next),
                xhat,
                inv_std,
                pre,
                post,
            });
        }
        Ok((traces, current))
    }
}

fn activate(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Relu => z.max(0.0),
        Activation::Sign => {
            if z >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        Activation::None => z,
    }
}

fn activate_grad(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Sign => {
            if z.abs() <= 1.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::None => 1.0,
    }
}

fn batchnorm_forward(z: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; z.len()];
    let mut inv_std = vec![0.0; cols];
    for c in 0..cols {
        let mean = (0..rows).map(|r| z[r * cols + c]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (z[r * cols + c] - mean).powi(2)).sum::<f64>() / rows as f64;
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[c] = is;
        for r in 0..rows {
            xhat[r * cols + c] = (z[r * cols + c] - mean) * is;
        }
    }
    (xhat, inv_std)
}

fn batchnorm_backward(dy: &[f64], xhat: &[f64], inv_std: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut dz = vec![0.0; dy.len()];
    let m = rows as f64;
    for c in 0..cols {
        let sum_dy: f64 = (0..rows).map(|r| dy[r * cols + c]).sum();
        let sum_dy_x: f64 = (0..rows).map(|r| dy[r * cols + c] * xhat[r * cols + c]).sum();
        for r in 0..rows {
            let i = r * cols + c;
            dz[i] = inv_std[c] / m * (m * dy[i] - sum_dy - xhat[i] * sum_dy_x);
        }
    }
    dz
}

/// Mean softmax cross-entropy; fills `grad` with `d loss / d logits` when given.
fn softmax_xent(logits: &[f64], labels: &[usize], classes: usize, mut grad: Option<&mut Vec<f64>>) -> Result<f64> {
    let b = labels.len();
    if let Some(g) = grad.as_deref_mut() {
        g.clear();
        g.resize(logits.len(), 0.0);
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::shape(format!("label {y} outside {classes} classes")));
        }
        let z = &logits[r * classes..(r + 1) * classes];
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_sum = max + sum.ln();
        total += log_sum - z[y];
        if let Some(g) = grad.as_deref_mut() {
            for c in 0..classes {
                let p = (z[c] - log_sum).exp();
                g[r * classes + c] = (p - if c == y { 1.0 } else { 0.0 }) / b as f64;
            }
        }
    }
    Ok(total / b as f64)
}

impl Learner for Mlp {
    fn dim(&self) -> usize {
        self.dim
    }

    fn arch(&self) -> NetworkArch {
        count_arch(&self.specs)
    }

    fn loss_and_grad(&self, weights: &[f64], batch: &MiniBatch, act: &mut ActQuant<'_>) -> Result<(f64, Vec<f64>)> {
        let (traces, logits) = self.run(weights, batch, act)?;
        let b = batch.size();
        let mut upstream = Vec::new();
        let loss = softmax_xent(&logits, batch.labels(), self.classes(), Some(&mut upstream))?;
        let mut grad = vec![0.0; self.dim];
        let last = self.layers.len() - 1;
        for li in (0..self.layers.len()).rev() {
            let l = self.layers[li];
            let t = &traces[li];
            // Gradient w.r.t. the layer's post-activation output.
            let mut dy: Vec<f64> = upstream;
            if li != last {
                // Clip passes gradient only where the activation was inside [-1, 1].
                for (g, &h) in dy.iter_mut().zip(&t.post) {
                    if h.abs() > 1.0 {
                        *g = 0.0;
                    }
                }
            }
            for (g, &z) in dy.iter_mut().zip(&t.pre) {
                *g *= activate_grad(l.activation, z);
            }
            let dz = if l.batchnorm {
                batchnorm_backward(&dy, &t.xhat, &t.inv_std, b, l.outputs)
            } else {
                dy
            };
            let w = &weights[l.offset..l.offset + l.inputs * l.outputs];
            for r in 0..b {
                let x = &t.input[r * l.inputs..(r + 1) * l.inputs];
                for o in 0..l.outputs {
                    let g = dz[r * l.outputs + o];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut grad[l.offset + o * l.inputs..l.offset + (o + 1) * l.inputs];
                    for (acc, xi) in row.iter_mut().zip(x) {
                        *acc += g * xi;
                    }
                    if l.bias {
                        grad[l.offset + l.inputs * l.outputs + o] += g;
                    }
                }
            }
            if li > 0 {
                let mut dx = vec![0.0; b * l.inputs];
                for r in 0..b {
                    for o in 0..l.outputs {
                        let g = dz[r * l.outputs + o];
                        if g == 0.0 {
                            continue;
                        }
                        let row = &w[o * l.inputs..(o + 1) * l.inputs];
                        for (d, wi) in dx[r * l.inputs..(r + 1) * l.inputs].iter_mut().zip(row) {
                            *d += g * wi;
                        }
                    }
                }
                upstream = dx;
            } else {
                upstream = Vec::new();
            }
        }
        Ok((loss, grad))
    }

    fn loss(&self, weights: &[f64], data: &Dataset) -> Result<f64> {
        let batch = data.as_batch();
        let (_, logits) = self.run(weights, &batch, &mut ActQuant::Off)?;
        softmax_xent(&logits, batch.labels(), self.classes(), None)
    }

    fn layer_of(&self, index: usize) -> usize {
        self.layers
            .iter()
            .rposition(|l| l.offset <= index)
            .unwrap_or(0)
    }
}

/// `f(w; x) = (c/2) ||w - x||²`: strongly convex with `L = μ = c`.
///
/// Rows of the dataset are the points `x`; labels are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticModel {
    pub dim: usize,
    pub curvature: f64,
}

impl Learner for QuadraticModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn arch(&self) -> NetworkArch {
        let d = self.dim as u64;
        NetworkArch::new(d, d, d)
    }

    fn loss_and_grad(&self, weights: &[f64], batch: &MiniBatch, _act: &mut ActQuant<'_>) -> Result<(f64, Vec<f64>)> {
        if weights.len() != self.dim || batch.width() != self.dim {
            return Err(Error::shape(format!(
                "quadratic model of dimension {} got weights {} and batch width {}",
                self.dim,
                weights.len(),
                batch.width()
            )));
        }
        let b = batch.size() as f64;
        let mut grad = vec![0.0; self.dim];
        let mut loss = 0.0;
        for r in 0..batch.size() {
            for (j, (&w, &x)) in weights.iter().zip(batch.row(r)).enumerate() {
                let diff = w - x;
                grad[j] += self.curvature * diff / b;
                loss += 0.5 * self.curvature * diff * diff / b;
            }
        }
        Ok((loss, grad))
    }

    fn loss(&self, weights: &[f64], data: &Dataset) -> Result<f64> {
        if weights.len() != self.dim || data.width() != self.dim {
            return Err(Error::shape("quadratic model dimension mismatch"));
        }
        let total: f64 = (0..data.len())
            .map(|r| {
                weights
                    .iter()
                    .zip(data.row(r))
                    .map(|(w, x)| (w - x).powi(2))
                    .sum::<f64>()
            })
            .sum();
        Ok(0.5 * self.curvature * total / data.len() as f64)
    }
}

/// One clipped SGD step on the shadow weights followed by re-quantization.
///
/// The gradient is taken at the quantized weights with quantized activations.
pub fn local_sgd_step(
    learner: &dyn Learner,
    model: &mut ModelState,
    batch: &MiniBatch,
    eta: f64,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::domain(format!("learning rate {eta} must be non-negative")));
    }
    let (loss, grad) = {
        let mut act = ActQuant::Stochastic {
            precision: model.precision,
            rng: &mut *rng,
        };
        learner.loss_and_grad(&model.quantized, batch, &mut act)?
    };
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            layer: learner.layer_of(i),
            what: "gradient",
        });
    }
    for (w, g) in model.shadow.iter_mut().zip(&grad) {
        *w = (*w - eta * g).clamp(-1.0, 1.0);
    }
    model.sync(rng)?;
    Ok(loss)
}

/// `steps` SGD iterations on fresh mini-batches; returns `final - initial` shadow weights.
pub fn local_round(
    learner: &dyn Learner,
    model: &mut ModelState,
    shard: &Dataset,
    steps: usize,
    eta: f64,
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::domain("local round needs at least one step"));
    }
    if shard.is_empty() {
        return Err(Error::domain("device shard is empty"));
    }
    if batch_size == 0 {
        return Err(Error::domain("batch size must be positive"));
    }
    let initial = model.shadow.clone();
    for _ in 0..steps {
        let batch = shard.sample_batch(batch_size, rng)?;
        local_sgd_step(learner, model, &batch, eta, rng)?;
    }
    Ok(model
        .shadow
        .iter()
        .zip(&initial)
        .map(|(a, b)| a - b)
        .collect())
}
