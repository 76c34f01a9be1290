//! Independent numerical checks of the quantizer and loss mathematics.
//!
//! Each oracle returns one [`OracleReport`] per checked statistic. The lemma,
//! Jeffreys and BSC oracles use their own scalar arithmetic and never call the
//! library quantizer or divergence code.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::Serialize;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::{distillation_graph, potential_graph, DistillLoss, Targets};
use crate::model::{build_model, Mode, ModelSpec};
use crate::pipeline::ptq_minmax;
use crate::quantizer::{fake_quant_graph, sample_noise, FakeQuantizer, NoiseMode};

/// Seed of the default suite.
pub const DEFAULT_ORACLE_SEED: u64 = 20_240_917;

/// Points closer than this to a clamp bound or grid midpoint are excluded from
/// finite-difference checks (the clamp is only differentiable a.e.).
pub const KINK_RADIUS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub trials: u64,
    pub statistic: f64,
    pub expected: f64,
    pub tolerance: f64,
    /// `|statistic − expected| ≤ tolerance`.
    pub passed: bool,
    /// The input could not exercise the property; reported with infinite tolerance.
    pub inconclusive: bool,
    pub details: String,
}

impl OracleReport {
    pub fn new(name: impl Into<String>, trials: u64, statistic: f64, expected: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            trials,
            statistic,
            expected,
            tolerance,
            passed: (statistic - expected).abs() <= tolerance,
            inconclusive: false,
            details: String::new(),
        }
    }

    fn inconclusive(name: impl Into<String>, trials: u64, statistic: f64, expected: f64) -> Self {
        let mut r = Self::new(name, trials, statistic, expected, f64::INFINITY);
        r.inconclusive = true;
        r
    }

    pub fn with_details(mut self, details: impl Into<String>) -> Self {
        self.details = details.into();
        self
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = match (self.passed, self.inconclusive) {
            (_, true) => "INCONCLUSIVE",
            (true, false) => "PASS",
            (false, false) => "FAIL",
        };
        write!(
            f,
            "{verdict} {} statistic={:.6e} expected={:.6e} tolerance={:.3e} trials={}",
            self.name, self.statistic, self.expected, self.tolerance, self.trials
        )?;
        if !self.details.is_empty() {
            write!(f, " ({})", self.details)?;
        }
        Ok(())
    }
}

fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Running mean and sample variance (Welford).
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Four standard errors of the mean.
    fn band(&self) -> f64 {
        4.0 * self.sd() / (self.n as f64).sqrt()
    }
}

/// Sample means from the finite-difference rounding lemma.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LemmaMeans {
    pub trials: u64,
    /// Mean of `⌊x + Δ⌉` and its sample standard deviation.
    pub plus: f64,
    pub plus_sd: f64,
    /// Mean of `⌊x − Δ⌉` and its sample standard deviation.
    pub minus: f64,
    pub minus_sd: f64,
    /// `V̂`, mean of `⌊x + Δ⌉ − ⌊x − Δ⌉ − 2Δ`, and its sample standard deviation.
    pub v_hat: f64,
    pub v_sd: f64,
}

/// Draws `x ~ U[l, u)` and estimates `E⌊x ± Δ⌉` (`Δ` is `fd_delta`).
pub fn lemma_fd_means(l: i64, u: i64, fd_delta: f64, m: u64, seed: u64) -> Result<LemmaMeans> {
    if !(fd_delta > 0.0 && fd_delta < 0.5) {
        return Err(Error::Domain(format!("fd_delta must lie in (0, 1/2), got {fd_delta}")));
    }
    if l >= u {
        return Err(Error::Domain(format!("need integer l < u, got l={l}, u={u}")));
    }
    if m < 2 {
        return Err(Error::Domain("need at least two trials".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lf, uf) = (l as f64, u as f64);
    let (mut plus, mut minus, mut v) = (Moments::default(), Moments::default(), Moments::default());
    for _ in 0..m {
        let x = rng.random_range(lf..uf);
        let a = round_half_up(x + fd_delta);
        let b = round_half_up(x - fd_delta);
        plus.push(a);
        minus.push(b);
        v.push(a - b - 2.0 * fd_delta);
    }
    Ok(LemmaMeans {
        trials: m,
        plus: plus.mean,
        plus_sd: plus.sd(),
        minus: minus.mean,
        minus_sd: minus.sd(),
        v_hat: v.mean,
        v_sd: v.sd(),
    })
}

/// `E⌊x+Δ⌉ − E⌊x−Δ⌉ − 2Δ = 0` for `x ~ U[l, u)` with integer bounds, plus the
/// component means `E⌊x ± Δ⌉ = (l+u)/2 ± Δ`. All at 4 standard errors.
pub fn lemma_fd_round(l: i64, u: i64, fd_delta: f64, m: u64, seed: u64) -> Result<Vec<OracleReport>> {
    let s = lemma_fd_means(l, u, fd_delta, m, seed)?;
    let root_m = (m as f64).sqrt();
    let tag = format!("l={l} u={u} fd_delta={fd_delta}");
    let mid = (l + u) as f64 / 2.0;
    Ok(vec![
        OracleReport::new("lemma_fd_round/v_hat", m, s.v_hat, 0.0, 4.0 * s.v_sd / root_m).with_details(tag.clone()),
        OracleReport::new("lemma_fd_round/mean_plus", m, s.plus, mid + fd_delta, 4.0 * s.plus_sd / root_m)
            .with_details(tag.clone()),
        OracleReport::new("lemma_fd_round/mean_minus", m, s.minus, mid - fd_delta, 4.0 * s.minus_sd / root_m)
            .with_details(tag),
    ])
}

/// Input distributions for [`noise_uniformity`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InputDistribution {
    Gaussian { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
    Constant(f64),
}

impl InputDistribution {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        Ok(match *self {
            InputDistribution::Gaussian { mean, std } => Normal::new(mean, std)
                .map_err(|e| Error::Domain(e.to_string()))?
                .sample(rng),
            InputDistribution::Uniform { low, high } => rng.random_range(low..high),
            InputDistribution::Constant(c) => c,
        })
    }
}

impl fmt::Display for InputDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputDistribution::Gaussian { mean, std } => write!(f, "N({mean}, {std}²)"),
            InputDistribution::Uniform { low, high } => write!(f, "U[{low}, {high})"),
            InputDistribution::Constant(c) => write!(f, "const {c}"),
        }
    }
}

/// Fewer distinct residuals than this means the input does not exercise rounding.
const MIN_DISTINCT_RESIDUALS: usize = 16;

/// Moments of `r(q(x))` over inputs inside the clamp range: mean 0 at 4
/// standard errors, variance `1/12` within 2% relative. Clamped inputs are
/// saturated rather than rounded and are excluded.
pub fn noise_uniformity(fq: &FakeQuantizer<f64>, input: InputDistribution, m: u64, seed: u64) -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, u, s) = (fq.lower(), fq.upper(), fq.scale());
    let mut moments = Moments::default();
    let mut distinct = std::collections::HashSet::new();
    for _ in 0..m {
        let x = input.sample(&mut rng)?;
        if !(x > l && x < u) {
            continue;
        }
        let v = x / s;
        let r = round_half_up(v) - v;
        moments.push(r);
        if distinct.len() < MIN_DISTINCT_RESIDUALS {
            distinct.insert(r.to_bits());
        }
    }
    let tag = format!("{input}, {} of {m} inside [{l:.4}, {u:.4}], s={s:.4}", moments.n);
    let expected_var = 1.0 / 12.0;
    if distinct.len() < MIN_DISTINCT_RESIDUALS {
        return Ok(vec![
            OracleReport::inconclusive("noise_uniformity/mean", moments.n, moments.mean, 0.0)
                .with_details(format!("degenerate input, {} distinct residuals; {tag}", distinct.len())),
            OracleReport::inconclusive("noise_uniformity/variance", moments.n, moments.variance(), expected_var)
                .with_details("degenerate input"),
        ]);
    }
    Ok(vec![
        OracleReport::new("noise_uniformity/mean", moments.n, moments.mean, 0.0, moments.band()).with_details(tag),
        OracleReport::new(
            "noise_uniformity/variance",
            moments.n,
            moments.variance(),
            expected_var,
            0.02 * expected_var,
        ),
    ])
}

fn check_open_prob(p: f64, what: &str) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must lie in (0, 1), got {p}")))
    }
}

fn kl2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * (a[0] / b[0]).ln() + a[1] * (a[1] / b[1]).ln()
}

fn jeffreys2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]) * (a[0].ln() - b[0].ln()) + (a[1] - b[1]) * (a[1].ln() - b[1].ln())
}

fn cross_entropy2(a: [f64; 2], b: [f64; 2]) -> f64 {
    -(a[0] * b[0].ln() + a[1] * b[1].ln())
}

/// Output law of a binary asymmetric channel with flip probabilities `p0`
/// (for a 0) and `p1` (for a 1).
fn bac(bit: bool, p0: f64, p1: f64) -> [f64; 2] {
    if bit {
        [p1, 1.0 - p1]
    } else {
        [1.0 - p0, p0]
    }
}

/// Per-bit Jeffreys divergence between the channel laws of a 0 and a 1.
pub fn jeffreys_delta(p0: f64, p1: f64) -> Result<f64> {
    check_open_prob(p0, "p0")?;
    check_open_prob(p1, "p1")?;
    Ok(jeffreys2(bac(false, p0, p1), bac(true, p0, p1)))
}

/// `Σ_j J(Q(b_j), Q(b̃_j)) = jeffreys_delta · d_H(b, b̃)` over random true
/// vectors and channel observations, and the `b = 1` constant equals the
/// `b = 0` one.
pub fn jeffreys_hamming(p0: f64, p1: f64, n: usize, trials: u64, seed: u64) -> Result<Vec<OracleReport>> {
    let delta = jeffreys_delta(p0, p1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut flips_seen = 0usize;
    for _ in 0..trials {
        // Varying the flip rate per trial covers sparse and dense error patterns.
        let extra = rng.random_range(0.0..0.5);
        let mut total = 0.0;
        let mut hamming = 0usize;
        for _ in 0..n {
            let b: bool = rng.random();
            let p_flip = if b { p1 } else { p0 };
            let flipped = rng.random_bool(p_flip) || rng.random_bool(extra);
            let obs = b ^ flipped;
            total += jeffreys2(bac(b, p0, p1), bac(obs, p0, p1));
            hamming += flipped as usize;
        }
        flips_seen += hamming;
        worst = worst.max((total - delta * hamming as f64).abs());
    }
    let reverse = jeffreys2(bac(true, p0, p1), bac(false, p0, p1));
    let tag = format!("p0={p0} p1={p1} n={n} jeffreys_delta={delta:.10}");
    Ok(vec![
        OracleReport::new("jeffreys_hamming/proportionality", trials, worst, 0.0, 1e-9)
            .with_details(format!("{tag}, {flips_seen} flipped bits")),
        OracleReport::new("jeffreys_hamming/b1_constant", 1, reverse, delta, 1e-12).with_details(tag),
    ])
}

/// With `p0 = p1 = p`: `J = 2·KL` and `J = 2H(Q(b), Q(b̃)) − 2H(Q(b))`.
pub fn bsc_reduction(p: f64) -> Result<Vec<OracleReport>> {
    check_open_prob(p, "p")?;
    let (a, b) = (bac(false, p, p), bac(true, p, p));
    let j = jeffreys2(a, b);
    let tag = format!("p={p}");
    if p == 0.5 {
        return Ok(vec![OracleReport::new("bsc_reduction/degenerate", 1, j, 0.0, 1e-12)
            .with_details(format!("{tag}, identical laws"))]);
    }
    let via_kl = 2.0 * kl2(a, b);
    let via_h = 2.0 * cross_entropy2(a, b) - 2.0 * cross_entropy2(a, a);
    Ok(vec![
        OracleReport::new("bsc_reduction/twice_kl", 1, j, via_kl, 1e-12).with_details(tag.clone()),
        OracleReport::new("bsc_reduction/cross_entropy", 1, j, via_h, 1e-12).with_details(tag),
    ])
}

fn clamp_sum(x: &[f64], w: &[f64], l: f64, u: f64) -> f64 {
    x.iter().zip(w).map(|(&xi, &wi)| wi * xi.min(u).max(l)).sum()
}

fn near_kink(x: f64, l: f64, u: f64, s: f64) -> bool {
    let v = x / s;
    let mid = (v - 0.5).round() + 0.5;
    (x - l).abs() < KINK_RADIUS || (x - u).abs() < KINK_RADIUS || ((v - mid) * s).abs() < KINK_RADIUS
}

/// Graph gradients of `Σ w ⊙ D(Q(x))` against central differences of the
/// clamp: wrt `x`, `l`, `u` within 1e-6 away from kinks; the residual path
/// contributes exactly nothing to the `x`-gradient.
pub fn ste_gradient_check(trials: u64, seed: u64) -> Result<Vec<OracleReport>> {
    const H: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut err_x, mut err_l, mut err_u, mut noise_x) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut checked = 0u64;
    for _ in 0..trials {
        let l = rng.random_range(-2.0..0.0);
        let u = rng.random_range(0.5..2.5);
        let bits = rng.random_range(1..=6) as f64;
        let s = (u - l) / (bits.exp2() - 1.0);
        let n = 32;
        let x: Vec<f64> = (0..n)
            .map(|_| rng.random_range(l - 1.0..u + 1.0))
            .filter(|&v| !near_kink(v, l, u, s))
            .collect();
        let w: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        if x.is_empty() {
            continue;
        }
        checked += x.len() as u64;
        let mode = NoiseMode::ALL[rng.random_range(0..NoiseMode::ALL.len())];

        let mut g = Graph::new();
        let xv = g.param(Tensor::vector(x.clone()));
        let sv = g.param(Tensor::scalar(s));
        let lv = g.param(Tensor::scalar(l));
        let uv = g.param(Tensor::scalar(u));
        let y = fake_quant_graph(&mut g, xv, sv, lv, uv, mode, Some(&mut rng))?;
        let wv = g.constant(Tensor::vector(w.clone()));
        let prod = g.mul(y, wv)?;
        let total = g.sum(prod);
        g.backward(total)?;
        let gx = g.grad_or_zero(xv);
        let (gl, gu) = (g.grad_or_zero(lv).item(), g.grad_or_zero(uv).item());

        let mut c = Graph::new();
        let xc = c.param(Tensor::vector(x.clone()));
        let lc = c.constant(Tensor::scalar(l));
        let uc = c.constant(Tensor::scalar(u));
        let capped = c.minimum(xc, uc)?;
        let clamped = c.maximum(capped, lc)?;
        let wc = c.constant(Tensor::vector(w.clone()));
        let prod = c.mul(clamped, wc)?;
        let total = c.sum(prod);
        c.backward(total)?;
        noise_x = noise_x.max(gx.max_abs_diff(&c.grad_or_zero(xc)));

        for (i, &gxi) in gx.data().iter().enumerate() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += H;
            xm[i] -= H;
            let fd = (clamp_sum(&xp, &w, l, u) - clamp_sum(&xm, &w, l, u)) / (2.0 * H);
            err_x = err_x.max((gxi - fd).abs());
        }
        let fd_l = (clamp_sum(&x, &w, l + H, u) - clamp_sum(&x, &w, l - H, u)) / (2.0 * H);
        let fd_u = (clamp_sum(&x, &w, l, u + H) - clamp_sum(&x, &w, l, u - H)) / (2.0 * H);
        err_l = err_l.max((gl - fd_l).abs());
        err_u = err_u.max((gu - fd_u).abs());
    }
    let tag = format!("{checked} inputs, kink radius {KINK_RADIUS}");
    Ok(vec![
        OracleReport::new("ste_gradient_check/clamp_x", checked, err_x, 0.0, 1e-6).with_details(tag),
        OracleReport::new("ste_gradient_check/clamp_lower", trials, err_l, 0.0, 1e-6),
        OracleReport::new("ste_gradient_check/clamp_upper", trials, err_u, 0.0, 1e-6),
        OracleReport::new("ste_gradient_check/noise_path_x", checked, noise_x, 0.0, 0.0),
    ])
}

/// Relative gradient error with a magnitude floor below which the error is
/// effectively absolute.
pub const GRADIENT_FLOOR: f64 = 1e-5;

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRADIENT_FLOOR)
}

/// Loss of a random model: Jeffreys distillation of the full-precision
/// training forward against a fixed reference, plus the bit-width potential
/// of the quantized forward when the model is quantized. Returns the value
/// and (optionally) the gradient buffers in [`crate::model::Model::parameters_mut`] order.
fn probe_loss(
    model: &crate::model::Model<f64>,
    x: &Tensor<f64>,
    reference: &Tensor<f64>,
    targets: Targets<f64>,
    grads: bool,
) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut g = Graph::new();
    let fp = model.forward::<ChaCha8Rng>(&mut g, x, Mode::Train, false, None)?;
    let mut loss = distillation_graph(&mut g, fp.logits, reference, DistillLoss::Jeffreys)?;
    let mut param_sets = vec![fp.params];
    if model.is_quantized() {
        let q = model.forward::<ChaCha8Rng>(&mut g, x, Mode::Train, true, None)?;
        let p = potential_graph(&mut g, &q.weight_bits, &q.activation_bits, targets)?;
        loss = g.add(loss, p)?;
        param_sets.push(q.params);
    }
    let value = g.value(loss).item();
    if !grads {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let mut out: Vec<Tensor<f64>> = param_sets[0].iter().map(|&p| g.grad_or_zero(p)).collect();
    for set in &param_sets[1..] {
        for (acc, &p) in out.iter_mut().zip(set) {
            let extra = g.grad_or_zero(p);
            for (a, b) in acc.data_mut().iter_mut().zip(extra.data()) {
                *a += b;
            }
        }
    }
    Ok((value, out))
}

/// Reverse-mode gradients of every trainable buffer (weights, biases,
/// normalization, quantizer parameters through the bit-width potential)
/// against central differences on `models` seeded random models. Coordinates
/// where the two step sizes disagree straddle a ReLU or hinge kink and are skipped.
pub fn model_gradient_check(models: u64, seed: u64) -> Result<Vec<OracleReport>> {
    const H: f64 = 1e-5;
    const COORDS: usize = 12;
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0u64, 0u64);
    for k in 0..models {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let (spec, batch) = if k % 2 == 0 {
            (ModelSpec::preset("mlp", &[3], 3)?, 8)
        } else {
            (ModelSpec::preset("cnn", &[4, 4, 1], 3)?, 4)
        };
        let features: usize = spec.input_shape.iter().product();
        let quantized = k % 4 < 2;
        let mut model = build_model::<f64>(&spec, quantized, NoiseMode::Bernoulli, rng.random())?;
        let x = Tensor::new(
            vec![batch, features],
            (0..batch * features).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )?;
        if quantized {
            ptq_minmax(&mut model, &x)?;
        }
        let mut reference = Vec::with_capacity(batch * 3);
        for _ in 0..batch {
            let row: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = row.iter().sum();
            reference.extend(row.iter().map(|v| v / total));
        }
        let reference = Tensor::new(vec![batch, 3], reference)?;
        let targets = Targets {
            weight_bits: rng.random_range(2.0..8.0),
            activation_bits: rng.random_range(2.0..8.0),
        };
        let (_, grads) = probe_loss(&model, &x, &reference, targets, true)?;
        let sizes = model.parameter_sizes();

        let mut coords: Vec<(usize, usize)> = (0..COORDS)
            .map(|_| {
                let b = rng.random_range(0..sizes.len());
                (b, rng.random_range(0..sizes[b]))
            })
            .collect();
        // Always cover the scalar quantizer buffers.
        coords.extend(sizes.iter().enumerate().filter(|(_, &n)| n == 1).map(|(b, _)| (b, 0)));

        for (b, i) in coords {
            let eval = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                m.parameters_mut()[b][i] += delta;
                Ok(probe_loss(&m, &x, &reference, targets, false)?.0)
            };
            let fd_h = (eval(H)? - eval(-H)?) / (2.0 * H);
            let fd_half = (eval(H / 2.0)? - eval(-H / 2.0)?) / H;
            if (fd_h - fd_half).abs() > 1e-7 * fd_h.abs().max(1.0) {
                skipped += 1;
                continue;
            }
            checked += 1;
            worst = worst.max(relative_error(grads[b].data()[i], fd_h));
        }
    }
    Ok(vec![OracleReport::new("model_gradient_check/relative", checked, worst, 0.0, 1e-4).with_details(format!(
        "{models} models, {skipped} kink coordinates skipped, floor {GRADIENT_FLOOR}"
    ))])
}

/// Batch means of the variance-matched Bernoulli probe have variance
/// `(1/12)/m` (5% relative) and mean 0 (4σ), and match batch means of true
/// uniform residuals (variance ratio within [0.9, 1.1]).
pub fn bernoulli_clt_check(m: usize, trials: u64, seed: u64) -> Result<Vec<OracleReport>> {
    if m == 0 || trials < 2 {
        return Err(Error::Domain("need m ≥ 1 and at least two trials".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut proxy, mut uniform) = (Moments::default(), Moments::default());
    for _ in 0..trials {
        let noise: Vec<f64> = sample_noise(NoiseMode::BernoulliVarianceMatched, m, &mut rng);
        proxy.push(noise.iter().sum::<f64>() / m as f64);
        let u: f64 = (0..m).map(|_| rng.random_range(-0.5..0.5)).sum();
        uniform.push(u / m as f64);
    }
    let expected = 1.0 / 12.0 / m as f64;
    let band = 4.0 * expected.sqrt() / (trials as f64).sqrt();
    let tag = format!("m={m}");
    Ok(vec![
        OracleReport::new("bernoulli_clt_check/variance", trials, proxy.variance(), expected, 0.05 * expected)
            .with_details(tag.clone()),
        OracleReport::new("bernoulli_clt_check/mean", trials, proxy.mean, 0.0, band).with_details(tag.clone()),
        OracleReport::new("bernoulli_clt_check/uniform_ratio", trials, proxy.variance() / uniform.variance(), 1.0, 0.1)
            .with_details(tag),
    ])
}

/// Names accepted by [`run_all`]'s filter.
pub const ORACLE_NAMES: [&str; 7] = [
    "lemma_fd_round",
    "noise_uniformity",
    "jeffreys_hamming",
    "bsc_reduction",
    "ste_gradient_check",
    "model_gradient_check",
    "bernoulli_clt_check",
];

/// The default suite; `filter` keeps oracles whose name contains it.
pub fn run_all(filter: Option<&str>, seed: u64) -> Result<Vec<OracleReport>> {
    let wanted = |name: &str| filter.is_none_or(|f| name.contains(f));
    if let Some(f) = filter {
        if !ORACLE_NAMES.iter().any(|n| n.contains(f)) {
            return Err(Error::Unknown {
                what: "oracle",
                name: f.to_string(),
            });
        }
    }
    let mut out = Vec::new();
    if wanted("lemma_fd_round") {
        for (i, (l, u, d)) in [(0, 4, 0.25), (-3, 2, 0.1), (0, 1, 0.49)].into_iter().enumerate() {
            out.extend(lemma_fd_round(l, u, d, 1_000_000, seed + i as u64)?);
        }
    }
    if wanted("noise_uniformity") {
        let fq = FakeQuantizer::from_scale_bounds(
            crate::quantizer::SiteKind::Weight,
            NoiseMode::Bernoulli,
            6.0 / 15.0,
            -3.0,
            3.0,
        )?;
        out.extend(noise_uniformity(&fq, InputDistribution::Gaussian { mean: 0.0, std: 1.0 }, 1_000_000, seed)?);
        out.extend(noise_uniformity(
            &fq,
            InputDistribution::Uniform { low: -2.0, high: 2.0 },
            1_000_000,
            seed + 1,
        )?);
    }
    if wanted("jeffreys_hamming") {
        for (i, (p0, p1)) in [(0.1, 0.1), (0.2, 0.05), (0.4, 0.3)].into_iter().enumerate() {
            out.extend(jeffreys_hamming(p0, p1, 64, 1000, seed + i as u64)?);
        }
    }
    if wanted("bsc_reduction") {
        for p in [0.1, 0.3] {
            out.extend(bsc_reduction(p)?);
        }
    }
    if wanted("ste_gradient_check") {
        out.extend(ste_gradient_check(200, seed)?);
    }
    if wanted("model_gradient_check") {
        out.extend(model_gradient_check(100, seed)?);
    }
    if wanted("bernoulli_clt_check") {
        out.extend(bernoulli_clt_check(100, 20_000, seed)?);
    }
    Ok(out)
}
