//! Distillation distances, the bit-width potential and the penalty schedule.
//!
//! The training objective is `t_q·c_r·P + t_r·d` where `d` is the batch-mean
//! Jeffreys divergence between student and teacher softmax outputs, `P` the
//! mean hinge excess of the per-site bit-widths over their targets, `c_r` the
//! running mean of past `d` values and `t_q = λ_n·n` grows with the batch index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// A strictly positive probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution<T> {
    probs: Vec<T>,
}

impl<T: Scalar> Distribution<T> {
    /// Floors entries at [`PROB_FLOOR`] and renormalizes. Input must be a
    /// probability vector up to 1e-6.
    pub fn new(probs: &[T]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Domain("empty distribution".into()));
        }
        if let Some(i) = probs.iter().position(|&p| !(p >= T::zero()) || !p.is_finite()) {
            return Err(Error::Numeric {
                op: "distribution",
                index: i,
                detail: format!("invalid probability {}", probs[i]),
            });
        }
        let total: T = probs.iter().copied().sum();
        if (total - T::one()).abs() > T::lit(1e-6) {
            return Err(Error::Domain(format!("probabilities sum to {total}")));
        }
        Ok(Self::floored(probs))
    }

    fn floored(probs: &[T]) -> Self {
        let eps = T::lit(PROB_FLOOR);
        let clipped: Vec<T> = probs.iter().map(|&p| p.max(eps)).collect();
        let z: T = clipped.iter().copied().sum();
        Self {
            probs: clipped.into_iter().map(|p| p / z).collect(),
        }
    }

    /// Softmax of a logit vector, floored.
    pub fn from_logits(logits: &[T]) -> Result<Self> {
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "softmax",
                index: i,
                detail: "non-finite logit".into(),
            });
        }
        let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = logits.iter().map(|&x| (x - mx).exp()).collect();
        let z: T = e.iter().copied().sum();
        Ok(Self::floored(&e.into_iter().map(|v| v / z).collect::<Vec<_>>()))
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn same_support<T>(p: &Distribution<T>, q: &Distribution<T>) -> Result<()> {
    if p.probs.len() != q.probs.len() {
        return Err(Error::shape(
            "divergence",
            format!("support sizes differ: {} vs {}", p.probs.len(), q.probs.len()),
        ));
    }
    Ok(())
}

/// `KL(p‖q) = Σ p log(p/q)` in nats.
pub fn kl<T: Scalar>(p: &Distribution<T>, q: &Distribution<T>) -> Result<T> {
    same_support(p, q)?;
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum::<T>()
        .max(T::zero()))
}

/// Jeffreys divergence `KL(p‖q) + KL(q‖p)`.
pub fn jeffreys<T: Scalar>(p: &Distribution<T>, q: &Distribution<T>) -> Result<T> {
    Ok(kl(p, q)? + kl(q, p)?)
}

/// Target bit-widths `(ω_w*, ω_a*)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Targets<T> {
    pub weight_bits: T,
    pub activation_bits: T,
}

fn hinge_mean<T: Scalar>(bits: &[T], target: T) -> T {
    let n = T::lit(bits.len() as f64);
    bits.iter().map(|&w| (w - target).max(T::zero())).sum::<T>() / n
}

/// `P = mean_w max(0, ω_w − ω_w*) + mean_a max(0, ω_a − ω_a*)`.
pub fn potential<T: Scalar>(weight_bits: &[T], activation_bits: &[T], targets: Targets<T>) -> Result<T> {
    if weight_bits.is_empty() || activation_bits.is_empty() {
        return Err(Error::Domain("potential needs at least one weight and one activation site".into()));
    }
    Ok(hinge_mean(weight_bits, targets.weight_bits) + hinge_mean(activation_bits, targets.activation_bits))
}

fn hinge_mean_graph<T: Scalar>(g: &mut Graph<T>, bits: &[Var], target: T) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &w in bits {
        let excess = g.add_scalar(w, -target);
        let h = g.max_with_scalar(excess, T::zero());
        acc = Some(match acc {
            Some(a) => g.add(a, h)?,
            None => h,
        });
    }
    let total = acc.ok_or_else(|| Error::Domain("empty site list".into()))?;
    Ok(g.scale(total, T::one() / T::lit(bits.len() as f64)))
}

/// Graph form of [`potential`].
pub fn potential_graph<T: Scalar>(
    g: &mut Graph<T>,
    weight_bits: &[Var],
    activation_bits: &[Var],
    targets: Targets<T>,
) -> Result<Var> {
    if weight_bits.is_empty() || activation_bits.is_empty() {
        return Err(Error::Domain("potential needs at least one weight and one activation site".into()));
    }
    let pw = hinge_mean_graph(g, weight_bits, targets.weight_bits)?;
    let pa = hinge_mean_graph(g, activation_bits, targets.activation_bits)?;
    g.add(pw, pa)
}

/// Distance between student and reference outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillLoss {
    /// Symmetrized KL against the teacher's softmax.
    #[default]
    Jeffreys,
    /// Cross-entropy `H(teacher, student)` against the teacher's softmax.
    CrossEntropy,
    /// Cross-entropy against hard ground-truth labels (no distillation).
    HardLabelCe,
}

impl DistillLoss {
    pub const ALL: [DistillLoss; 3] = [DistillLoss::Jeffreys, DistillLoss::CrossEntropy, DistillLoss::HardLabelCe];

    pub fn as_str(self) -> &'static str {
        match self {
            DistillLoss::Jeffreys => "jeffreys",
            DistillLoss::CrossEntropy => "cross_entropy",
            DistillLoss::HardLabelCe => "hard_label_ce",
        }
    }
}

impl fmt::Display for DistillLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistillLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistillLoss::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                what: "distillation loss",
                name: s.to_string(),
            })
    }
}

/// Floored row-wise softmax on the graph.
pub fn floored_softmax<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let p = g.softmax_rows(logits)?;
    let p = g.max_with_scalar(p, T::lit(PROB_FLOOR));
    g.normalize_rows(p)
}

fn check_logits<T: Scalar>(logits: &Tensor<T>) -> Result<()> {
    let (_, n) = logits.dims2("total_loss")?;
    if let Some(i) = logits.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "total_loss",
            index: i / n,
            detail: "non-finite student logit in this batch row".into(),
        });
    }
    Ok(())
}

/// Batch-mean distillation distance `d`. `reference` holds teacher
/// probabilities, or one-hot labels for [`DistillLoss::HardLabelCe`].
pub fn distillation_graph<T: Scalar>(
    g: &mut Graph<T>,
    student_logits: Var,
    reference: &Tensor<T>,
    kind: DistillLoss,
) -> Result<Var> {
    check_logits(g.value(student_logits))?;
    if g.value(student_logits).shape() != reference.shape() {
        return Err(Error::shape(
            "distillation",
            format!(
                "student {:?} vs reference {:?}",
                g.value(student_logits).shape(),
                reference.shape()
            ),
        ));
    }
    let p = floored_softmax(g, student_logits)?;
    let logp = g.log(p)?;
    let per_row = match kind {
        DistillLoss::Jeffreys => {
            let (m, _) = reference.dims2("distillation")?;
            let mut q_rows = Vec::with_capacity(reference.numel());
            for r in 0..m {
                q_rows.extend_from_slice(Distribution::new(reference.row(r))?.probs());
            }
            let q_t = Tensor::new(reference.shape().to_vec(), q_rows)?;
            let logq_t = q_t.map(T::ln);
            let q = g.constant(q_t);
            let logq = g.constant(logq_t);
            // J = Σ (p − q)(log p − log q)
            let dp = g.sub(p, q)?;
            let dl = g.sub(logp, logq)?;
            let prod = g.mul(dp, dl)?;
            g.sum_rows(prod)?
        }
        DistillLoss::CrossEntropy | DistillLoss::HardLabelCe => {
            let q = g.constant(reference.clone());
            let prod = g.mul(q, logp)?;
            let s = g.sum_rows(prod)?;
            g.neg(s)
        }
    };
    Ok(g.mean(per_row))
}

/// Penalty-schedule state carried across batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossState<T> {
    pub step: u64,
    pub t_q: T,
    pub t_r: T,
    pub c_r: T,
    pub c_r_sum: T,
    pub targets: Targets<T>,
    /// Added to `λ_n·n`; zero except for the no-gradual-scaling ablation.
    pub t_q_offset: T,
}

impl<T: Scalar> LossState<T> {
    pub fn new(targets: Targets<T>) -> Self {
        Self::with_offset(targets, T::zero())
    }

    pub fn with_offset(targets: Targets<T>, t_q_offset: T) -> Self {
        Self {
            step: 0,
            t_q: t_q_offset,
            t_r: T::one(),
            // undefined at n = 0; neutral
            c_r: T::one(),
            c_r_sum: T::zero(),
            targets,
            t_q_offset,
        }
    }

    /// Advances to the next batch: `n += 1`, `t_q = λ_n·n`, and folds the
    /// finished batch's distance into the running mean `c_r`.
    pub fn update_schedule(&mut self, lr: T, batch_d: T) {
        self.step += 1;
        let n = T::lit(self.step as f64);
        self.t_q = self.t_q_offset + lr * n;
        self.c_r_sum = self.c_r_sum + batch_d;
        self.c_r = self.c_r_sum / n;
    }
}

/// Graph handles and values of one evaluation of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<T> {
    pub loss: Var,
    pub distill: Var,
    pub potential: Var,
    pub loss_value: T,
    pub distill_value: T,
    pub potential_value: T,
}

/// `t_q·c_r·P + t_r·d`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_logits: Var,
    reference: &Tensor<T>,
    kind: DistillLoss,
    weight_bits: &[Var],
    activation_bits: &[Var],
    state: &LossState<T>,
) -> Result<LossTerms<T>> {
    let distill = distillation_graph(g, student_logits, reference, kind)?;
    let potential = potential_graph(g, weight_bits, activation_bits, state.targets)?;
    let pen = g.scale(potential, state.t_q * state.c_r);
    let dist = g.scale(distill, state.t_r);
    let loss = g.add(pen, dist)?;
    Ok(LossTerms {
        loss,
        distill,
        potential,
        loss_value: g.value(loss).item(),
        distill_value: g.value(distill).item(),
        potential_value: g.value(potential).item(),
    })
}
