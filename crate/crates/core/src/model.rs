//! Small dense and convolutional classifiers with optional fake-quantized
//! inner layers.
//!
//! A layer computes `a(BN(D_w(Q_w(W)) · D_a(Q_a(x)) + b))`: the activation
//! quantizer sits on the layer input, the weight quantizer on `W`. The first
//! and last layers are never quantized. Convolutions run channels-last as
//! `im2col` followed by a matmul; a linear layer after a convolution applies
//! global average pooling first.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchMoments, ConvGeometry, Graph, NormStats, Tensor, Var};
use crate::data::{one_hot, Dataset, Splits};
use crate::error::{Error, Result};
use crate::losses::{distillation_graph, DistillLoss};
use crate::optim::RAdam;
use crate::quantizer::{integer_fuse, Activation, FakeQuantizer, FusedLayer, NoiseMode, QuantizedLayer};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum LayerKind {
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
    pub batchnorm: bool,
}

impl LayerSpec {
    pub fn linear(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Linear { inputs, outputs },
            activation,
            batchnorm: false,
        }
    }

    pub fn conv_bn_relu(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            activation: Activation::Relu,
            batchnorm: true,
        }
    }

    pub fn outputs(&self) -> usize {
        match self.kind {
            LayerKind::Linear { outputs, .. } => outputs,
            LayerKind::Conv2d { out_channels, .. } => out_channels,
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Linear { inputs, .. } => inputs,
            LayerKind::Conv2d { in_channels, kernel, .. } => kernel * kernel * in_channels,
        }
    }
}

/// Architecture description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// `[features]`, or `[height, width, channels]` when the first layer is a convolution.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

/// Spatial extent flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Extent {
    Flat(usize),
    Image { height: usize, width: usize, channels: usize },
}

/// Hidden width of the built-in MLPs.
pub const MLP_HIDDEN: usize = 32;

impl ModelSpec {
    pub const PRESETS: [&'static str; 4] = ["mlp", "mlp-deep", "mlp-small", "cnn"];

    /// Built-in architectures:
    /// `mlp` in→32→32→classes, `mlp-deep` in→32→32→32→classes,
    /// `mlp-small` in→32→classes (teacher only), and `cnn`, three
    /// conv-bn-relu blocks with a pooled linear head.
    pub fn preset(id: &str, input_shape: &[usize], num_classes: usize) -> Result<Self> {
        let features: usize = input_shape.iter().product();
        let h = MLP_HIDDEN;
        let mlp = |hidden: usize| {
            let mut layers = vec![LayerSpec::linear(features, h, Activation::Relu)];
            for _ in 1..hidden {
                layers.push(LayerSpec::linear(h, h, Activation::Relu));
            }
            layers.push(LayerSpec::linear(h, num_classes, Activation::Identity));
            layers
        };
        let (layers, shape) = match id {
            "mlp" => (mlp(2), vec![features]),
            "mlp-deep" => (mlp(3), vec![features]),
            "mlp-small" => (mlp(1), vec![features]),
            "cnn" => {
                let [hgt, wid, ch] = match input_shape {
                    &[a, b, c] => [a, b, c],
                    &[a, b] => [a, b, 1],
                    _ => {
                        return Err(Error::Spec(format!(
                            "cnn needs image input [height, width(, channels)], got {input_shape:?}"
                        )))
                    }
                };
                let layers = vec![
                    LayerSpec::conv_bn_relu(ch, 8, 3, 1, 1),
                    LayerSpec::conv_bn_relu(8, 16, 3, 2, 1),
                    LayerSpec::conv_bn_relu(16, 16, 3, 2, 1),
                    LayerSpec::linear(16, num_classes, Activation::Identity),
                ];
                (layers, vec![hgt, wid, ch])
            }
            other => {
                return Err(Error::Unknown {
                    what: "model",
                    name: other.to_string(),
                })
            }
        };
        let spec = Self {
            name: id.to_string(),
            input_shape: shape,
            layers,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks that consecutive layers compose and the head emits `num_classes`.
    pub fn validate(&self) -> Result<()> {
        self.extents().map(|_| ())
    }

    /// Input extent of each layer.
    fn extents(&self) -> Result<Vec<Extent>> {
        let mut cur = match self.input_shape[..] {
            [f] => Extent::Flat(f),
            [height, width, channels] => Extent::Image { height, width, channels },
            _ => return Err(Error::Spec(format!("unsupported input shape {:?}", self.input_shape))),
        };
        if self.layers.is_empty() {
            return Err(Error::Spec("model has no layers".into()));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push(cur);
            cur = match (l.kind.clone(), cur) {
                (LayerKind::Linear { inputs, outputs }, Extent::Flat(f)) if inputs == f => Extent::Flat(outputs),
                (LayerKind::Linear { inputs, outputs }, Extent::Image { channels, .. }) if inputs == channels => {
                    Extent::Flat(outputs)
                }
                (
                    LayerKind::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    Extent::Image { height, width, channels },
                ) if in_channels == channels
                    && kernel >= 1
                    && stride >= 1
                    && kernel <= height + 2 * padding
                    && kernel <= width + 2 * padding =>
                {
                    Extent::Image {
                        height: (height + 2 * padding - kernel) / stride + 1,
                        width: (width + 2 * padding - kernel) / stride + 1,
                        channels: out_channels,
                    }
                }
                (kind, ext) => {
                    return Err(Error::Spec(format!("layer {i} ({kind:?}) does not accept input {ext:?}")));
                }
            };
        }
        match (self.layers.last(), cur) {
            (Some(LayerSpec { kind: LayerKind::Linear { .. }, .. }), Extent::Flat(n)) if n == self.num_classes => Ok(out),
            _ => Err(Error::Spec(format!(
                "final layer must be linear with {} outputs",
                self.num_classes
            ))),
        }
    }
}

/// Batch normalization parameters and running statistics of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    /// Frozen layers normalize with running statistics and never update them.
    pub frozen: bool,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
            frozen: false,
        }
    }

    fn update(&mut self, m: &BatchMoments<T>) {
        if self.frozen {
            return;
        }
        let k = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&m.mean) {
            *r = (T::one() - k) * *r + k * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&m.var) {
            *r = (T::one() - k) * *r + k * b;
        }
    }
}

/// Weight and input-activation quantizers of an inner layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantizers<T> {
    pub weight: FakeQuantizer<T>,
    pub activation: FakeQuantizer<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    /// `[fan_in, outputs]`; for convolutions the rows follow the `im2col` patch order.
    pub weights: Tensor<T>,
    /// Absent when followed by batch normalization.
    pub bias: Option<Tensor<T>>,
    pub norm: Option<BatchNorm<T>>,
    pub quantizers: Option<LayerQuantizers<T>>,
}

/// Forward-pass regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for non-frozen normalization layers.
    Train,
    /// Running statistics everywhere.
    Eval,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub logits: Var,
    /// Aligned with [`Model::parameters_mut`].
    pub params: Vec<Var>,
    pub weight_bits: Vec<Var>,
    pub activation_bits: Vec<Var>,
    /// Pre-quantization input of each quantized layer, in layer order.
    pub site_inputs: Vec<Var>,
    /// Batch moments per layer, present for batch-statistics normalization.
    pub moments: Vec<Option<BatchMoments<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub layers: Vec<Layer<T>>,
}

fn he_uniform<T: Scalar, R: Rng + ?Sized>(fan_in: usize, outputs: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * outputs).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(vec![fan_in, outputs], data).expect("positive layer dimensions")
}

/// Builds a freshly initialized model. With `quantized`, every inner layer
/// carries uninitialized quantizers.
pub fn build_model<T: Scalar>(spec: &ModelSpec, quantized: bool, noise_mode: NoiseMode, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layers
        .iter()
        .map(|l| Layer {
            spec: l.clone(),
            weights: he_uniform(l.fan_in(), l.outputs(), &mut rng),
            bias: (!l.batchnorm).then(|| Tensor::zeros(&[l.outputs()])),
            norm: l.batchnorm.then(|| BatchNorm::new(l.outputs())),
            quantizers: None,
        })
        .collect();
    let model = Model {
        spec: spec.clone(),
        layers,
    };
    if quantized {
        model.quantized_copy(noise_mode)
    } else {
        Ok(model)
    }
}

impl<T: Scalar> Model<T> {
    /// Copies the weights into a student whose inner layers carry fresh
    /// (uninitialized) quantizers. Needs at least three layers.
    pub fn quantized_copy(&self, noise_mode: NoiseMode) -> Result<Self> {
        let n = self.layers.len();
        if n < 3 {
            return Err(Error::Spec(format!(
                "quantization needs an inner layer; model has {n} weight layers"
            )));
        }
        let mut out = self.clone();
        for i in 1..n - 1 {
            let post_relu = self.layers[i - 1].spec.activation == Activation::Relu;
            out.layers[i].quantizers = Some(LayerQuantizers {
                weight: FakeQuantizer::weight(noise_mode),
                activation: FakeQuantizer::activation(noise_mode, post_relu),
            });
        }
        Ok(out)
    }

    /// Drops all quantizers.
    pub fn full_precision_copy(&self) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.quantizers = None;
        }
        out
    }

    pub fn is_quantized(&self) -> bool {
        self.layers.iter().any(|l| l.quantizers.is_some())
    }

    /// Indices of the layers that carry quantizers.
    pub fn quantized_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].quantizers.is_some()).collect()
    }

    pub fn quantizers(&self) -> impl Iterator<Item = &LayerQuantizers<T>> {
        self.layers.iter().filter_map(|l| l.quantizers.as_ref())
    }

    pub fn quantizers_mut(&mut self) -> impl Iterator<Item = &mut LayerQuantizers<T>> {
        self.layers.iter_mut().filter_map(|l| l.quantizers.as_mut())
    }

    pub fn all_quantizers_initialized(&self) -> bool {
        self.quantizers().all(|q| q.weight.is_initialized() && q.activation.is_initialized())
    }

    pub fn set_noise_mode(&mut self, mode: NoiseMode) {
        for q in self.quantizers_mut() {
            q.weight.set_noise_mode(mode);
            q.activation.set_noise_mode(mode);
        }
    }

    pub fn set_batchnorm_frozen(&mut self, frozen: bool) {
        for l in &mut self.layers {
            if let Some(bn) = &mut l.norm {
                bn.frozen = frozen;
            }
        }
    }

    /// Trainable buffers in a fixed order: per layer the weights, bias,
    /// normalization scale and shift, then `[log s, l, ρ]` of the weight and
    /// activation quantizers (one buffer each).
    pub fn parameters_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weights.data_mut());
            if let Some(b) = &mut l.bias {
                out.push(b.data_mut());
            }
            if let Some(bn) = &mut l.norm {
                out.push(bn.gamma.data_mut());
                out.push(bn.beta.data_mut());
            }
            if let Some(q) = &mut l.quantizers {
                for p in q.weight.raw_params_mut() {
                    out.push(std::slice::from_mut(p));
                }
                for p in q.activation.raw_params_mut() {
                    out.push(std::slice::from_mut(p));
                }
            }
        }
        out
    }

    /// Lengths of the buffers of [`Model::parameters_mut`].
    pub fn parameter_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weights.numel());
            if let Some(b) = &l.bias {
                out.push(b.numel());
            }
            if let Some(bn) = &l.norm {
                out.push(bn.gamma.numel());
                out.push(bn.beta.numel());
            }
            if l.quantizers.is_some() {
                out.extend([1; 6]);
            }
        }
        out
    }

    /// Records the forward pass. `quantize = false` bypasses every quantizer
    /// (full-precision path through the same weights). Probe noise is drawn
    /// from `rng` when given.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        x: &Tensor<T>,
        mode: Mode,
        quantize: bool,
        mut rng: Option<&mut R>,
    ) -> Result<Forward<T>> {
        let extents = self.spec.extents()?;
        let (batch, feats) = x.dims2("model_forward")?;
        let expect: usize = self.spec.input_shape.iter().product();
        if feats != expect {
            return Err(Error::shape("model_forward", format!("{feats} input features, model expects {expect}")));
        }
        let mut h = g.constant(x.clone());
        if let Extent::Image { height, width, channels } = extents[0] {
            h = g.reshape(h, vec![batch * height * width, channels])?;
        }
        let mut fwd = Forward {
            logits: h,
            params: Vec::new(),
            weight_bits: Vec::new(),
            activation_bits: Vec::new(),
            site_inputs: Vec::new(),
            moments: Vec::with_capacity(self.layers.len()),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let input_extent = extents[i];
            if let (LayerKind::Linear { .. }, Extent::Image { height, width, .. }) = (&layer.spec.kind, input_extent) {
                h = g.group_mean(h, height * width)?;
            }
            let w = g.param(layer.weights.clone());
            fwd.params.push(w);
            let b = layer.bias.as_ref().map(|b| g.param(b.clone()));
            fwd.params.extend(b);
            let bn = layer.norm.as_ref().map(|bn| (g.param(bn.gamma.clone()), g.param(bn.beta.clone())));
            if let Some((gamma, beta)) = bn {
                fwd.params.push(gamma);
                fwd.params.push(beta);
            }

            let (mut w_eff, mut h_eff) = (w, h);
            if let Some(q) = &layer.quantizers {
                fwd.site_inputs.push(h);
                let bw = q.weight.bind(g)?;
                let ba = q.activation.bind(g)?;
                fwd.params.extend(bw.params());
                fwd.params.extend(ba.params());
                if quantize {
                    if !q.weight.is_initialized() || !q.activation.is_initialized() {
                        return Err(Error::Contract(format!(
                            "layer {i} quantizers were never initialized (run PTQ or explicit init)"
                        )));
                    }
                    fwd.weight_bits.push(q.weight.bitwidth_var(g, &bw)?);
                    fwd.activation_bits.push(q.activation.bitwidth_var(g, &ba)?);
                    w_eff = q.weight.forward(g, &bw, w, rng.as_deref_mut())?;
                    h_eff = q.activation.forward(g, &ba, h, rng.as_deref_mut())?;
                }
            }

            let mut y = match (&layer.spec.kind, input_extent) {
                (
                    LayerKind::Conv2d {
                        in_channels,
                        kernel,
                        stride,
                        padding,
                        ..
                    },
                    Extent::Image { height, width, .. },
                ) => {
                    let geom = ConvGeometry {
                        batch,
                        height,
                        width,
                        channels: *in_channels,
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                    };
                    let cols = g.im2col(h_eff, geom)?;
                    g.matmul(cols, w_eff)?
                }
                _ => g.matmul(h_eff, w_eff)?,
            };
            if let Some(b) = b {
                y = g.add_bias(y, b)?;
            }
            let mut moments = None;
            if let (Some(norm), Some((gamma, beta))) = (&layer.norm, bn) {
                let stats = if mode == Mode::Train && !norm.frozen {
                    NormStats::Batch
                } else {
                    NormStats::Fixed {
                        mean: norm.running_mean.clone(),
                        var: norm.running_var.clone(),
                    }
                };
                let (out, m) = g.batch_norm(y, gamma, beta, stats, norm.eps)?;
                y = out;
                moments = m;
            }
            fwd.moments.push(moments);
            h = layer.spec.activation.record(g, y);
        }
        fwd.logits = h;
        Ok(fwd)
    }

    /// Folds batch statistics from a training forward into the running
    /// statistics of non-frozen normalization layers.
    pub fn apply_moments(&mut self, moments: &[Option<BatchMoments<T>>]) {
        for (layer, m) in self.layers.iter_mut().zip(moments) {
            if let (Some(bn), Some(m)) = (&mut layer.norm, m) {
                bn.update(m);
            }
        }
    }

    /// Eval-mode logits; quantizers are applied when present.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = self.forward::<ChaCha8Rng>(&mut g, x, Mode::Eval, self.is_quantized(), None)?;
        Ok(g.value(f.logits).clone())
    }

    /// Eval-mode logits with quantizers bypassed.
    pub fn predict_full_precision(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = self.forward::<ChaCha8Rng>(&mut g, x, Mode::Eval, false, None)?;
        Ok(g.value(f.logits).clone())
    }

    /// Inner linear layer `i` as a standalone quantized layer.
    pub fn quantized_layer(&self, i: usize) -> Result<QuantizedLayer<T>> {
        let layer = self
            .layers
            .get(i)
            .ok_or_else(|| Error::Fusion(format!("no layer {i}")))?;
        let q = layer
            .quantizers
            .as_ref()
            .ok_or_else(|| Error::Fusion(format!("layer {i} is not quantized")))?;
        if !matches!(layer.spec.kind, LayerKind::Linear { .. }) || layer.norm.is_some() {
            return Err(Error::Fusion(format!("layer {i}: only linear layers without normalization fuse")));
        }
        Ok(QuantizedLayer {
            weights: layer.weights.clone(),
            bias: layer.bias.clone(),
            weight_quantizer: q.weight.clone(),
            activation_quantizer: q.activation.clone(),
            activation: layer.spec.activation,
        })
    }

    /// Integer form of every inner layer, for deployment.
    pub fn fuse(&self) -> Result<FusedModel<T>> {
        let n = self.layers.len();
        if !self.is_quantized() {
            return Err(Error::Fusion("model has no quantized layers".into()));
        }
        let mut inner = Vec::new();
        for i in 1..n - 1 {
            inner.push(integer_fuse(&self.quantized_layer(i)?)?);
        }
        let fp = |l: &Layer<T>| -> Result<FpLinear<T>> {
            if !matches!(l.spec.kind, LayerKind::Linear { .. }) || l.norm.is_some() {
                return Err(Error::Fusion("only linear models without normalization fuse".into()));
            }
            Ok(FpLinear {
                weights: l.weights.clone(),
                bias: l.bias.clone(),
                activation: l.spec.activation,
            })
        };
        Ok(FusedModel {
            first: fp(&self.layers[0])?,
            inner,
            last: fp(&self.layers[n - 1])?,
        })
    }
}

/// A full-precision dense layer of a [`FusedModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct FpLinear<T> {
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub activation: Activation,
}

impl<T: Scalar> FpLinear<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.constant(self.weights.clone());
        let mut y = g.matmul(xv, w)?;
        if let Some(b) = &self.bias {
            let b = g.constant(b.clone());
            y = g.add_bias(y, b)?;
        }
        let y = self.activation.record(&mut g, y);
        Ok(g.value(y).clone())
    }
}

/// FP first and last layers around integer inner layers.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedModel<T> {
    pub first: FpLinear<T>,
    pub inner: Vec<FusedLayer<T>>,
    pub last: FpLinear<T>,
}

impl<T: Scalar> FusedModel<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.first.forward(x)?;
        for l in &self.inner {
            h = l.forward(&h)?;
        }
        self.last.forward(&h)
    }
}

/// Index of the largest logit per row.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (m, _) = logits.dims2("argmax")?;
    Ok((0..m)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Eval-mode accuracy in `[0, 1]`.
pub fn accuracy<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<f64> {
    let pred = argmax_rows(&model.predict(data.inputs())?)?;
    Ok(fraction_equal(&pred, data.labels()))
}

/// Fraction of positions where the two label lists agree.
pub fn fraction_equal(a: &[usize], b: &[usize]) -> f64 {
    let hits = a.iter().zip(b).filter(|(x, y)| x == y).count();
    hits as f64 / a.len().max(1) as f64
}

/// Hyperparameters of full-precision teacher training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.01,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Outcome of [`train_teacher`].
#[derive(Clone, Debug)]
pub struct TrainedTeacher<T> {
    pub model: Model<T>,
    pub val_accuracy: f64,
    pub final_loss: f64,
}

/// Shuffled minibatch index lists for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Trains a full-precision classifier with hard-label cross-entropy and RAdam.
pub fn train_teacher<T: Scalar>(spec: &ModelSpec, data: &Splits<T>, cfg: &TeacherConfig) -> Result<TrainedTeacher<T>> {
    let mut model = build_model::<T>(spec, false, NoiseMode::default(), cfg.seed)?;
    let mut opt = RAdam::new(&model.parameter_sizes());
    let lr = T::lit(cfg.lr);
    let mut step = 0u64;
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs as u64 {
        for rows in epoch_batches(data.train.len(), cfg.batch_size, cfg.seed, epoch) {
            let (x, y) = data.train.batch(&rows)?;
            let target = one_hot::<T>(&y, spec.num_classes)?;
            let mut g = Graph::new();
            let f = model.forward::<ChaCha8Rng>(&mut g, &x, Mode::Train, false, None)?;
            let loss = distillation_graph(&mut g, f.logits, &target, DistillLoss::HardLabelCe)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("teacher loss {lv} at epoch {epoch}"),
                });
            }
            last = lv.as_f64();
            g.backward(loss)?;
            let grads: Vec<Tensor<T>> = f.params.iter().map(|&p| g.grad_or_zero(p)).collect();
            let grad_refs: Vec<&[T]> = grads.iter().map(Tensor::data).collect();
            model.apply_moments(&f.moments);
            opt.step(&mut model.parameters_mut(), &grad_refs, lr)?;
            step += 1;
        }
    }
    let val_accuracy = accuracy(&model, &data.val)?;
    Ok(TrainedTeacher {
        model,
        val_accuracy,
        final_loss: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};

    fn mlp(id: &str) -> ModelSpec {
        ModelSpec::preset(id, &[2], 2).unwrap()
    }

    #[test]
    fn presets_validate() {
        for id in ["mlp", "mlp-deep", "mlp-small"] {
            mlp(id);
        }
        ModelSpec::preset("cnn", &[8, 8, 1], 3).unwrap();
        assert!(ModelSpec::preset("resnet", &[2], 2).is_err());
        assert!(ModelSpec::preset("cnn", &[2], 2).is_err());
    }

    #[test]
    fn spec_rejects_mismatched_shapes() {
        let mut s = mlp("mlp");
        s.layers[1] = LayerSpec::linear(31, 32, Activation::Relu);
        assert!(matches!(s.validate(), Err(Error::Spec(_))));
        let mut s = mlp("mlp");
        s.num_classes = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn quantized_build_wraps_inner_layers_only() {
        let m = build_model::<f64>(&mlp("mlp-deep"), true, NoiseMode::Bernoulli, 0).unwrap();
        assert_eq!(m.quantized_layers(), vec![1, 2]);
        assert_eq!(m.quantizers().count(), 2);
        let m = build_model::<f64>(&mlp("mlp"), true, NoiseMode::Bernoulli, 0).unwrap();
        assert_eq!(m.quantized_layers(), vec![1]);
        assert!(matches!(
            build_model::<f64>(&mlp("mlp-small"), true, NoiseMode::Bernoulli, 0),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn uninitialized_quantizers_refuse_quantized_forward() {
        let m = build_model::<f64>(&mlp("mlp"), true, NoiseMode::Bernoulli, 0).unwrap();
        let x = Tensor::zeros(&[3, 2]);
        assert!(matches!(m.predict(&x), Err(Error::Contract(_))));
        assert!(m.predict_full_precision(&x).is_ok());
    }

    #[test]
    fn quantized_false_matches_teacher_path() {
        let fp = build_model::<f64>(&mlp("mlp"), false, NoiseMode::Bernoulli, 5).unwrap();
        let q = fp.quantized_copy(NoiseMode::Bernoulli).unwrap();
        let x = Tensor::from_f64(vec![4, 2], &[0.1, -0.3, 1.0, 2.0, -1.5, 0.2, 0.0, 0.0]).unwrap();
        assert_eq!(fp.predict(&x).unwrap(), q.predict_full_precision(&x).unwrap());
    }

    #[test]
    fn wide_fine_grid_matches_full_precision() {
        let fp = build_model::<f64>(&mlp("mlp-deep"), false, NoiseMode::Bernoulli, 5).unwrap();
        let mut q = fp.quantized_copy(NoiseMode::Bernoulli).unwrap();
        for lq in q.quantizers_mut() {
            lq.weight.set_scale_bounds(1e-12, -1e3, 1e3).unwrap();
            lq.activation.set_scale_bounds(1e-12, 0.0, 1e3).unwrap();
        }
        let x = Tensor::from_f64(vec![3, 2], &[0.1, -0.3, 1.0, 2.0, -1.5, 0.2]).unwrap();
        let d = fp.predict(&x).unwrap().max_abs_diff(&q.predict(&x).unwrap());
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn parameters_align_with_forward_params() {
        let mut m = build_model::<f64>(&ModelSpec::preset("cnn", &[6, 6, 1], 2).unwrap(), true, NoiseMode::Bernoulli, 1).unwrap();
        for lq in m.quantizers_mut() {
            lq.weight.set_range(-1.0, 1.0, 8.0).unwrap();
            lq.activation.set_range(0.0, 4.0, 8.0).unwrap();
        }
        let x = Tensor::full(&[2, 36], 0.5);
        let mut g = Graph::new();
        let f = m.forward::<ChaCha8Rng>(&mut g, &x, Mode::Train, true, None).unwrap();
        let sizes = m.parameter_sizes();
        assert_eq!(f.params.len(), sizes.len());
        for (v, n) in f.params.iter().zip(&sizes) {
            assert_eq!(g.value(*v).numel(), *n);
        }
        assert_eq!(m.parameters_mut().len(), sizes.len());
        assert_eq!(g.value(f.logits).shape(), &[2, 2]);
    }

    #[test]
    fn frozen_batchnorm_keeps_running_stats() {
        let spec = ModelSpec::preset("cnn", &[4, 4, 1], 2).unwrap();
        let mut m = build_model::<f64>(&spec, false, NoiseMode::Bernoulli, 1).unwrap();
        m.set_batchnorm_frozen(true);
        let before: Vec<_> = m.layers.iter().map(|l| l.norm.as_ref().map(|b| b.running_mean.clone())).collect();
        let x = Tensor::from_f64(vec![2, 16], &(0..32).map(|v| v as f64 / 7.0).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let f = m.forward::<ChaCha8Rng>(&mut g, &x, Mode::Train, false, None).unwrap();
        assert!(f.moments.iter().all(Option::is_none));
        m.apply_moments(&f.moments);
        let after: Vec<_> = m.layers.iter().map(|l| l.norm.as_ref().map(|b| b.running_mean.clone())).collect();
        assert_eq!(before, after);

        m.set_batchnorm_frozen(false);
        let mut g = Graph::new();
        let f = m.forward::<ChaCha8Rng>(&mut g, &x, Mode::Train, false, None).unwrap();
        m.apply_moments(&f.moments);
        let moved: Vec<_> = m.layers.iter().map(|l| l.norm.as_ref().map(|b| b.running_mean.clone())).collect();
        assert_ne!(before, moved);
    }

    #[test]
    fn teacher_training_is_deterministic_and_accurate() {
        let data = make_synthetic::<f64>(SyntheticKind::TwoGaussians, 400, 3).unwrap();
        let cfg = TeacherConfig {
            epochs: 10,
            seed: 9,
            ..TeacherConfig::default()
        };
        let a = train_teacher(&mlp("mlp"), &data, &cfg).unwrap();
        let b = train_teacher(&mlp("mlp"), &data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert!(a.val_accuracy >= 0.97, "{}", a.val_accuracy);
    }

    #[test]
    fn epoch_batches_cover_every_row() {
        let b = epoch_batches(10, 3, 1, 0);
        assert_eq!(b.len(), 4);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(epoch_batches(10, 3, 1, 0), epoch_batches(10, 3, 1, 1));
    }
}
