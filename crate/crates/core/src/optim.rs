//! Rectified Adam and the constant-then-annealing learning-rate policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Variance rectification is applied only above this length of the
/// approximated simple moving average.
pub const RECTIFY_THRESHOLD: f64 = 4.0;

/// RAdam over a fixed list of flat parameter buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RAdam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> RAdam<T> {
    /// Default coefficients `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    pub fn new(sizes: &[usize]) -> Self {
        Self::with_betas(sizes, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn with_betas(sizes: &[usize], beta1: T, beta2: T, eps: T) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// Rebuilds an optimizer from serialized moments.
    pub fn from_state(beta1: T, beta2: T, eps: T, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Checkpoint("optimizer moment shapes disagree".into()));
        }
        if v.iter().flatten().any(|&x| !(x >= T::zero())) {
            return Err(Error::Checkpoint("negative second moment".into()));
        }
        Ok(Self {
            beta1,
            beta2,
            eps,
            step,
            m,
            v,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    /// `ρ_∞ = 2/(1−β2) − 1`.
    pub fn rho_inf(&self) -> T {
        T::lit(2.0) / (T::one() - self.beta2) - T::one()
    }

    /// `ρ_t = ρ_∞ − 2tβ2^t/(1−β2^t)`.
    pub fn rho(&self, t: u64) -> T {
        let b2t = self.beta2.powi(t as i32);
        self.rho_inf() - T::lit(2.0 * t as f64) * b2t / (T::one() - b2t)
    }

    /// One update. All gradients are checked before any state changes.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: T) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "radam_step",
                format!(
                    "{} parameter buffers and {} gradients for {} moments",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape(
                    "radam_step",
                    format!("buffer {i}: {} params, {} grads, {} moments", p.len(), g.len(), self.m[i].len()),
                ));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { param: i, index: j });
            }
        }

        self.step += 1;
        let t = self.step;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = T::one() - b1.powi(t as i32);
        let bias2 = T::one() - b2.powi(t as i32);
        let rho_inf = self.rho_inf();
        let rho_t = self.rho(t);
        let rect = if rho_t > T::lit(RECTIFY_THRESHOLD) {
            let four = T::lit(4.0);
            let two = T::lit(2.0);
            Some(((rho_t - four) * (rho_t - two) * rho_inf / ((rho_inf - four) * (rho_inf - two) * rho_t)).sqrt())
        } else {
            None
        };

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / bias1;
                let delta = match rect {
                    Some(r) => r * m_hat / ((v[j] / bias2).sqrt() + self.eps),
                    None => m_hat,
                };
                p[j] = p[j] - lr * delta;
            }
        }
        Ok(())
    }
}

/// Learning-rate phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrPhase {
    Constant,
    Annealing,
}

impl LrPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            LrPhase::Constant => "constant",
            LrPhase::Annealing => "annealing",
        }
    }
}

/// Constant `λ0` until the target bit-width is first reached, then
/// `λ ← α·λ` per batch. The switch is one-way.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrPolicy<T> {
    pub phase: LrPhase,
    pub lambda0: T,
    pub alpha: T,
    pub lambda: T,
}

impl<T: Scalar> LrPolicy<T> {
    pub const DEFAULT_ALPHA: f64 = 0.9985;

    pub fn new(lambda0: T) -> Self {
        Self::with_alpha(lambda0, T::lit(Self::DEFAULT_ALPHA))
    }

    pub fn with_alpha(lambda0: T, alpha: T) -> Self {
        Self {
            phase: LrPhase::Constant,
            lambda0,
            alpha,
            lambda: lambda0,
        }
    }

    pub fn current(&self) -> T {
        self.lambda
    }

    /// Rate for the next batch.
    pub fn next(&mut self, target_reached: bool) -> T {
        if target_reached {
            self.phase = LrPhase::Annealing;
        }
        if self.phase == LrPhase::Annealing {
            self.lambda = self.alpha * self.lambda;
        }
        self.lambda
    }
}
