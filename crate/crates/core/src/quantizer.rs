//! Fake quantization `D(Q(x)) = x̄ + s·r(q(x))` with learnable scale and clamp
//! bounds, straight-through gradients and a differentiable bit-width.
//!
//! With `x̄ = clamp(x, l, u)`, `q(x) = x̄ / s` (zero offset) and the rounding
//! residual `r(v) = ⌊v + ½⌋ − v`, the forward value lies on the grid `s·ℤ`.
//! In the backward pass the residual term contributes nothing to `x` and a
//! probe sample (or the true residual) to `s`; the clamp is differentiated
//! normally. The bit-width estimate is `ω = log₂((u − l)/s + 1)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_raw, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Weight,
    Activation,
}

/// What the backward pass feeds into `∂(s·r)/∂s`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// The actual residual `r(q(x))`.
    RoundingResidual,
    /// `Bernoulli(½) − ½`, i.e. `±½` with equal probability.
    #[default]
    Bernoulli,
    /// `(Bernoulli(½) − ½)/√3`, matching the variance of uniform rounding noise.
    BernoulliVarianceMatched,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 3] = [
        NoiseMode::RoundingResidual,
        NoiseMode::Bernoulli,
        NoiseMode::BernoulliVarianceMatched,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::RoundingResidual => "rounding_residual",
            NoiseMode::Bernoulli => "bernoulli",
            NoiseMode::BernoulliVarianceMatched => "bernoulli_variance_matched",
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                what: "noise mode",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Identity => x,
        }
    }

    pub fn record<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }
}

/// `r(v) = ⌊v + ½⌋ − v`.
#[inline]
pub fn rounding_residual<T: Scalar>(v: T) -> T {
    v.round_half_up() - v
}

/// Draws `n` backward probe samples for `∂(s·r)/∂s`.
pub fn sample_noise<T: Scalar, R: Rng + ?Sized>(mode: NoiseMode, n: usize, rng: &mut R) -> Vec<T> {
    let half = match mode {
        NoiseMode::Bernoulli => 0.5,
        NoiseMode::BernoulliVarianceMatched => 0.5 / 3f64.sqrt(),
        NoiseMode::RoundingResidual => return vec![T::zero(); n],
    };
    (0..n)
        .map(|_| if rng.random::<bool>() { T::lit(half) } else { T::lit(-half) })
        .collect()
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn softplus_inv<T: Scalar>(y: T) -> T {
    // ln(eʸ − 1) = y + ln(1 − e⁻ʸ)
    y + (-(-y).exp_m1()).ln()
}

/// Gradients of `Σ g ⊙ D(Q(x))` with respect to the input and `(s, l, u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SteGradients<T> {
    pub x: Tensor<T>,
    pub scale: T,
    pub lower: T,
    pub upper: T,
}

/// One weight or activation quantization site.
///
/// Learnable state is `(log s, l, ρ)` with `u = l + exp(ρ)` for weights and
/// `u = l + softplus(ρ)` for activations, so `s > 0` and `l < u` always hold.
/// Post-ReLU activation sites keep `l = 0` fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FakeQuantizer<T> {
    kind: SiteKind,
    noise_mode: NoiseMode,
    log_scale: T,
    lower: T,
    range_raw: T,
    lower_fixed: bool,
    initialized: bool,
}

/// Graph handles of a quantizer's parameters for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BoundQuantizer {
    pub log_scale: Var,
    pub lower_param: Var,
    pub range_raw: Var,
    pub scale: Var,
    pub lower: Var,
    pub upper: Var,
    range: Var,
}

impl BoundQuantizer {
    /// Parameter leaves in `raw_params` order.
    pub fn params(&self) -> [Var; 3] {
        [self.log_scale, self.lower_param, self.range_raw]
    }
}

impl<T: Scalar> FakeQuantizer<T> {
    pub fn weight(noise_mode: NoiseMode) -> Self {
        Self::new(SiteKind::Weight, noise_mode, false)
    }

    /// Activation site; `post_relu` pins the lower bound at zero.
    pub fn activation(noise_mode: NoiseMode, post_relu: bool) -> Self {
        Self::new(SiteKind::Activation, noise_mode, post_relu)
    }

    fn new(kind: SiteKind, noise_mode: NoiseMode, lower_fixed: bool) -> Self {
        let mut fq = Self {
            kind,
            noise_mode,
            log_scale: T::zero(),
            lower: T::zero(),
            range_raw: T::zero(),
            lower_fixed,
            initialized: false,
        };
        fq.range_raw = fq.encode_range(T::one());
        fq
    }

    /// Builds an initialized quantizer directly from `(s, l, u)`.
    pub fn from_scale_bounds(kind: SiteKind, noise_mode: NoiseMode, scale: T, lower: T, upper: T) -> Result<Self> {
        let mut fq = Self::new(kind, noise_mode, false);
        fq.set_scale_bounds(scale, lower, upper)?;
        Ok(fq)
    }

    fn encode_range(&self, range: T) -> T {
        match self.kind {
            SiteKind::Weight => range.ln(),
            SiteKind::Activation => softplus_inv(range),
        }
    }

    fn decode_range(&self, raw: T) -> T {
        match self.kind {
            SiteKind::Weight => raw.exp(),
            SiteKind::Activation => softplus(raw),
        }
    }

    pub fn kind(&self) -> SiteKind {
        self.kind
    }

    pub fn noise_mode(&self) -> NoiseMode {
        self.noise_mode
    }

    pub fn set_noise_mode(&mut self, mode: NoiseMode) {
        self.noise_mode = mode;
    }

    pub fn lower_fixed(&self) -> bool {
        self.lower_fixed
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn scale(&self) -> T {
        self.log_scale.exp()
    }

    pub fn lower(&self) -> T {
        if self.lower_fixed { T::zero() } else { self.lower }
    }

    pub fn upper(&self) -> T {
        self.lower() + self.range()
    }

    pub fn range(&self) -> T {
        self.decode_range(self.range_raw)
    }

    /// `ω = log₂((u − l)/s + 1)`.
    pub fn bitwidth(&self) -> T {
        (self.range() / self.scale()).ln_1p() / T::LN_2()
    }

    /// Sets the clamp range and picks `s = (u − l)/(2^ω − 1)`.
    pub fn set_range(&mut self, lower: T, upper: T, bits: T) -> Result<()> {
        if !(bits > T::zero()) {
            return Err(Error::Domain(format!("bit-width must be positive, got {bits}")));
        }
        let scale = (upper - lower) / (bits.exp2() - T::one());
        self.set_scale_bounds(scale, lower, upper)
    }

    pub fn set_scale_bounds(&mut self, scale: T, lower: T, upper: T) -> Result<()> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::Domain(format!("clamp bounds require l < u, got l={lower}, u={upper}")));
        }
        if !(scale > T::zero()) || !scale.is_finite() {
            return Err(Error::Domain(format!("scale must be positive, got {scale}")));
        }
        if self.lower_fixed && lower != T::zero() {
            return Err(Error::Domain(format!("post-ReLU site has l fixed at 0, got {lower}")));
        }
        self.lower = lower;
        self.range_raw = self.encode_range(upper - lower);
        self.log_scale = scale.ln();
        self.initialized = true;
        Ok(())
    }

    /// `[log s, l, ρ]`, the order used by [`FakeQuantizer::bind`].
    pub fn raw_params(&self) -> [T; 3] {
        [self.log_scale, self.lower, self.range_raw]
    }

    pub fn raw_params_mut(&mut self) -> [&mut T; 3] {
        [&mut self.log_scale, &mut self.lower, &mut self.range_raw]
    }

    pub fn set_raw_params(&mut self, raw: [T; 3], initialized: bool) {
        self.log_scale = raw[0];
        self.lower = raw[1];
        self.range_raw = raw[2];
        self.initialized = initialized;
    }

    pub fn clamp(&self, x: T) -> T {
        x.min(self.upper()).max(self.lower())
    }

    /// Integer level `Q(x) = ⌊x̄/s + ½⌋`.
    pub fn level(&self, x: T) -> T {
        (self.clamp(x) / self.scale()).round_half_up()
    }

    /// Deterministic dequantized value `s·Q(x)`; equal levels give bit-identical values.
    pub fn quantize(&self, x: T) -> T {
        self.scale() * self.level(x)
    }

    /// The residual form `x̄ + s·r(q(x))`, as evaluated in the training graph.
    pub fn fake_quant(&self, x: T) -> T {
        let s = self.scale();
        let xb = self.clamp(x);
        xb + s * rounding_residual(xb / s)
    }

    /// Smallest and largest reachable integer levels `(Q(l), Q(u))`.
    pub fn level_bounds(&self) -> (T, T) {
        (self.level(self.lower()), self.level(self.upper()))
    }

    /// Records the parameters as graph leaves plus the derived `s`, `l`, `u`.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<BoundQuantizer> {
        let log_scale = g.param(Tensor::scalar(self.log_scale));
        let lower_param = g.leaf(Tensor::scalar(self.lower()), !self.lower_fixed);
        let range_raw = g.param(Tensor::scalar(self.range_raw));
        let scale = g.exp(log_scale)?;
        let range = match self.kind {
            SiteKind::Weight => g.exp(range_raw)?,
            SiteKind::Activation => g.softplus(range_raw),
        };
        let upper = g.add(lower_param, range)?;
        Ok(BoundQuantizer {
            log_scale,
            lower_param,
            range_raw,
            scale,
            lower: lower_param,
            upper,
            range,
        })
    }

    /// Differentiable `ω` as a graph scalar.
    pub fn bitwidth_var(&self, g: &mut Graph<T>, b: &BoundQuantizer) -> Result<Var> {
        let ratio = g.div(b.range, b.scale)?;
        let shifted = g.add_scalar(ratio, T::one());
        let ln = g.log(shifted)?;
        Ok(g.scale(ln, T::one() / T::LN_2()))
    }

    /// Records `D(Q(x))` on the graph. With `rng = None` no probe noise is drawn
    /// and the `s`-gradient uses the true residual.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        b: &BoundQuantizer,
        x: Var,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        fake_quant_graph(g, x, b.scale, b.lower, b.upper, self.noise_mode, rng)
    }

    /// Straight-through gradients of `Σ g_up ⊙ D(Q(x))` with respect to `x`, `s`, `l`, `u`.
    pub fn ste_backward<R: Rng + ?Sized>(&self, x: &Tensor<T>, g_up: &Tensor<T>, rng: &mut R) -> Result<SteGradients<T>> {
        if x.shape() != g_up.shape() {
            return Err(Error::shape("ste_backward", "upstream gradient shape differs from input"));
        }
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let s = g.param(Tensor::scalar(self.scale()));
        let l = g.param(Tensor::scalar(self.lower()));
        let u = g.param(Tensor::scalar(self.upper()));
        let y = fake_quant_graph(&mut g, xv, s, l, u, self.noise_mode, Some(rng))?;
        let up = g.constant(g_up.clone());
        let weighted = g.mul(y, up)?;
        let total = g.sum(weighted);
        g.backward(total)?;
        Ok(SteGradients {
            x: g.grad_or_zero(xv),
            scale: g.grad_or_zero(s).item(),
            lower: g.grad_or_zero(l).item(),
            upper: g.grad_or_zero(u).item(),
        })
    }
}

/// `x̄ + s·r(x̄/s)` with `x̄ = max(l, min(u, x))`. The residual term is an opaque
/// node: zero gradient to `x̄`, probe (or residual) gradient to `s`.
pub fn fake_quant_graph<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: Var,
    scale: Var,
    lower: Var,
    upper: Var,
    mode: NoiseMode,
    rng: Option<&mut R>,
) -> Result<Var> {
    let capped = g.minimum(x, upper)?;
    let xb = g.maximum(capped, lower)?;

    let s = g.value(scale).item();
    let xb_vals = g.value(xb).data();
    let residuals: Vec<T> = xb_vals.iter().map(|&v| rounding_residual(v / s)).collect();
    let probes = match (mode, rng) {
        (NoiseMode::RoundingResidual, _) | (_, None) => residuals.clone(),
        (m, Some(rng)) => sample_noise(m, residuals.len(), rng),
    };
    let noise_value = Tensor::new(
        g.value(xb).shape().to_vec(),
        residuals.iter().map(|&r| s * r).collect(),
    )?;
    let noise = g.custom(
        &[xb, scale],
        move |_| Ok(noise_value),
        move |up, inputs, _| {
            let ds: T = up.data().iter().zip(&probes).map(|(&a, &p)| a * p).sum();
            vec![Tensor::zeros(inputs[0].shape()), Tensor::scalar(ds)]
        },
    )?;
    g.add(xb, noise)
}

/// A layer `y = a(D_w(Q_w(W)) · D_a(Q_a(x)) + b)` with `W` stored as `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer<T> {
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub weight_quantizer: FakeQuantizer<T>,
    pub activation_quantizer: FakeQuantizer<T>,
    pub activation: Activation,
}

impl<T: Scalar> QuantizedLayer<T> {
    /// Graph forward; `x` is `[batch, in]`.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph<T>, x: Var, mut rng: Option<&mut R>) -> Result<Var> {
        let w = g.param(self.weights.clone());
        let bw = self.weight_quantizer.bind(g)?;
        let ba = self.activation_quantizer.bind(g)?;
        let wq = self.weight_quantizer.forward(g, &bw, w, rng.as_deref_mut())?;
        let xq = self.activation_quantizer.forward(g, &ba, x, rng)?;
        let mut y = g.matmul(xq, wq)?;
        if let Some(b) = &self.bias {
            let bv = g.param(b.clone());
            y = g.add_bias(y, bv)?;
        }
        Ok(self.activation.record(g, y))
    }

    /// Fake-quantized forward without a graph.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = x.dims2("quantized_layer")?;
        let (k2, n) = self.weights.dims2("quantized_layer")?;
        if k != k2 {
            return Err(Error::shape("quantized_layer", format!("input width {k} vs weight rows {k2}")));
        }
        let wq: Vec<T> = self.weights.data().iter().map(|&w| self.weight_quantizer.fake_quant(w)).collect();
        let xq: Vec<T> = x.data().iter().map(|&v| self.activation_quantizer.fake_quant(v)).collect();
        let mut y = matmul_raw(&xq, &wq, m, k, n);
        finish(&mut y, self.bias.as_ref(), n, self.activation);
        Tensor::new(vec![m, n], y)
    }
}

fn finish<T: Scalar>(y: &mut [T], bias: Option<&Tensor<T>>, n: usize, act: Activation) {
    for (i, v) in y.iter_mut().enumerate() {
        let b = bias.map_or(T::zero(), |b| b.data()[i % n]);
        *v = act.apply(*v + b);
    }
}

/// Integer form of a [`QuantizedLayer`]: `y = a(s_w·s_a·(Q_w(W)·Q_a(x)) + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedLayer<T> {
    pub rows: usize,
    pub cols: usize,
    pub int_weights: Vec<i64>,
    pub weight_scale: T,
    pub activation_scale: T,
    pub activation_quantizer: FakeQuantizer<T>,
    pub bias: Option<Vec<T>>,
    pub activation: Activation,
}

/// Extracts the integer weight matrix and scales of a converged layer.
pub fn integer_fuse<T: Scalar>(layer: &QuantizedLayer<T>) -> Result<FusedLayer<T>> {
    let (wq, aq) = (&layer.weight_quantizer, &layer.activation_quantizer);
    if !wq.is_initialized() || !aq.is_initialized() {
        return Err(Error::Fusion("quantizers were never initialized".into()));
    }
    let (rows, cols) = layer.weights.dims2("integer_fuse")?;
    let s = wq.scale();
    let tol = T::lit(1e-9);
    let mut ints = Vec::with_capacity(rows * cols);
    for (i, &w) in layer.weights.data().iter().enumerate() {
        let level = wq.fake_quant(w) / s;
        let k = level.round_half_up();
        if (level - k).abs() > tol {
            return Err(Error::Fusion(format!(
                "weight {i} dequantizes {} off the integer grid",
                (level - k).abs()
            )));
        }
        ints.push(k.to_i64().ok_or_else(|| Error::Fusion(format!("level {k} overflows i64")))?);
    }
    Ok(FusedLayer {
        rows,
        cols,
        int_weights: ints,
        weight_scale: s,
        activation_scale: aq.scale(),
        activation_quantizer: aq.clone(),
        bias: layer.bias.as_ref().map(|b| b.data().to_vec()),
        activation: layer.activation,
    })
}

impl<T: Scalar> FusedLayer<T> {
    /// Integer levels `Q_a(x)` of an input batch.
    pub fn activation_levels(&self, x: &Tensor<T>) -> Result<Vec<i64>> {
        x.data()
            .iter()
            .map(|&v| {
                let k = self.activation_quantizer.level(v);
                k.to_i64().ok_or_else(|| Error::Fusion(format!("activation level {k} overflows i64")))
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = x.dims2("fused_layer")?;
        if k != self.rows {
            return Err(Error::shape("fused_layer", format!("input width {k} vs {} rows", self.rows)));
        }
        let qa = self.activation_levels(x)?;
        let n = self.cols;
        let scale = self.weight_scale * self.activation_scale;
        let mut y = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let acc: i64 = (0..k).map(|p| qa[i * k + p] * self.int_weights[p * n + j]).sum();
                y[i * n + j] = scale * T::lit(acc as f64);
            }
        }
        let bias = self.bias.as_ref().map(|b| Tensor::vector(b.clone()));
        finish(&mut y, bias.as_ref(), n, self.activation);
        Tensor::new(vec![m, n], y)
    }
}
