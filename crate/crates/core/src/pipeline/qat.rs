use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::autodiff::{Graph, Tensor};
use crate::data::{one_hot, Splits};
use crate::error::{Error, Result};
use crate::losses::{total_loss, DistillLoss, Distribution, LossState};
use crate::model::{accuracy, epoch_batches, Mode, Model};
use crate::optim::{LrPolicy, RAdam};

use super::audit::{audit_bitwidth, BitWidthReport};
use super::checkpoint::{Checkpoint, RngState, SessionCounters, Stage, TrainingState};
use super::config::RunConfig;
use super::metrics::MetricsRow;
use super::ptq::{explicit_init, ptq_minmax};

/// Stream of the probe-noise generator; batch order uses the epoch streams.
const NOISE_STREAM: u64 = 0;

/// Builds the student from a full-precision teacher: quantized inner layers,
/// then 10-bit min-max PTQ over the training set (or the explicit init when
/// PTQ is disabled).
pub fn prepare_student(teacher: &Model<f64>, config: &RunConfig, data: &Splits<f64>) -> Result<Model<f64>> {
    let mut student = teacher.full_precision_copy().quantized_copy(config.noise_mode)?;
    if config.ptq_enabled {
        ptq_minmax(&mut student, data.train.inputs())?;
    } else {
        explicit_init(&mut student)?;
    }
    Ok(student)
}

/// Teacher softmax rows, floored.
pub fn teacher_probabilities(teacher: &Model<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let logits = teacher.predict(x)?;
    let (m, _) = logits.dims2("teacher_probabilities")?;
    let mut rows = Vec::with_capacity(logits.numel());
    for r in 0..m {
        rows.extend_from_slice(Distribution::from_logits(logits.row(r))?.probs());
    }
    Tensor::new(logits.shape().to_vec(), rows)
}

/// Values from one training batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchRecord {
    pub step: u64,
    pub lambda: f64,
    pub loss: f64,
    pub distill: f64,
    pub potential: f64,
}

/// Result of one end-of-epoch audit.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochAudit {
    pub epoch: u64,
    pub val_accuracy: f64,
    pub report: BitWidthReport,
    pub within_target: bool,
}

/// Gradual bit-width convergence followed by learning-rate annealing.
pub struct QatSession {
    pub config: RunConfig,
    pub data: Splits<f64>,
    pub teacher: Model<f64>,
    pub student: Model<f64>,
    pub optimizer: RAdam<f64>,
    pub loss_state: LossState<f64>,
    pub lr: LrPolicy<f64>,
    pub rng: ChaCha8Rng,
    pub counters: SessionCounters,
    /// Rows produced since the session was created or resumed.
    pub metrics: Vec<MetricsRow>,
    /// Student at the best audit within target.
    pub best_model: Option<Model<f64>>,
    pub last_audit: Option<EpochAudit>,
    batches: Option<(u64, Vec<Vec<usize>>)>,
}

impl QatSession {
    /// Refuses students whose quantizers were never initialized.
    pub fn new(config: RunConfig, teacher: Model<f64>, mut student: Model<f64>, data: Splits<f64>) -> Result<Self> {
        config.validate()?;
        if !student.is_quantized() {
            return Err(Error::Contract("student has no quantized layers".into()));
        }
        if !student.all_quantizers_initialized() {
            return Err(Error::Contract(
                "student quantizers were never initialized; run PTQ or the explicit init first".into(),
            ));
        }
        student.set_noise_mode(config.noise_mode);
        student.set_batchnorm_frozen(config.batchnorm_frozen);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(NOISE_STREAM);
        Ok(Self {
            optimizer: RAdam::new(&student.parameter_sizes()),
            loss_state: LossState::with_offset(config.targets(), config.tq_init),
            lr: LrPolicy::new(config.lambda0),
            rng,
            counters: SessionCounters::default(),
            metrics: Vec::new(),
            best_model: None,
            last_audit: None,
            batches: None,
            config,
            data,
            teacher,
            student,
        })
    }

    /// Continues from a QAT checkpoint.
    pub fn resume(ckpt: Checkpoint, teacher: Model<f64>, data: Splits<f64>) -> Result<Self> {
        let config = ckpt
            .config
            .ok_or_else(|| Error::Checkpoint("checkpoint has no run configuration".into()))?;
        let t = ckpt
            .training
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
        let mut s = Self::new(config, teacher, ckpt.model, data)?;
        if t.optimizer.first_moments().len() != s.optimizer.first_moments().len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        s.optimizer = t.optimizer;
        s.loss_state = t.loss_state;
        s.lr = t.lr;
        s.rng = t.rng.restore();
        s.counters = t.counters;
        Ok(s)
    }

    pub fn finished(&self) -> bool {
        self.counters.epoch >= self.config.epochs as u64
    }

    fn current_batch(&mut self) -> Vec<usize> {
        let epoch = self.counters.epoch;
        if self.batches.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let b = epoch_batches(self.data.train.len(), self.config.batch_size, self.config.seed, epoch);
            self.batches = Some((epoch, b));
        }
        let (_, b) = self.batches.as_ref().expect("cached");
        b[self.counters.batch_in_epoch as usize].clone()
    }

    fn batches_in_epoch(&self) -> u64 {
        self.data.train.len().div_ceil(self.config.batch_size) as u64
    }

    /// One optimization step; runs the audit after the epoch's last batch.
    pub fn step(&mut self) -> Result<(BatchRecord, Option<EpochAudit>)> {
        let rows = self.current_batch();
        let (x, y) = self.data.train.batch(&rows)?;
        let reference = match self.config.distill_loss {
            DistillLoss::HardLabelCe => one_hot(&y, self.data.train.num_classes())?,
            _ => teacher_probabilities(&self.teacher, &x)?,
        };
        let mut g = Graph::new();
        let f = self.student.forward(&mut g, &x, Mode::Train, true, Some(&mut self.rng))?;
        let terms = total_loss(
            &mut g,
            f.logits,
            &reference,
            self.config.distill_loss,
            &f.weight_bits,
            &f.activation_bits,
            &self.loss_state,
        )?;
        let step = self.counters.global_step;
        if !terms.loss_value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {} (d = {}, P = {})", terms.loss_value, terms.distill_value, terms.potential_value),
            });
        }
        g.backward(terms.loss)?;
        let grads: Vec<Tensor<f64>> = f.params.iter().map(|&p| g.grad_or_zero(p)).collect();
        let refs: Vec<&[f64]> = grads.iter().map(Tensor::data).collect();
        let lambda = self.lr.current();
        self.optimizer.step(&mut self.student.parameters_mut(), &refs, lambda)?;
        self.student.apply_moments(&f.moments);

        self.metrics.push(MetricsRow {
            step,
            phase: self.lr.phase.as_str().into(),
            lambda,
            t_q: self.loss_state.t_q,
            c_r: self.loss_state.c_r,
            loss: Some(terms.loss_value),
            distill_d: Some(terms.distill_value),
            potential_p: Some(terms.potential_value),
            val_acc: None,
            mean_w_est: None,
            mean_w_act: None,
            max_w_act: None,
            mean_a_est: None,
            mean_a_act: None,
            max_a_act: None,
        });
        let next = self.lr.next(self.counters.reached);
        self.loss_state.update_schedule(next, terms.distill_value);
        self.counters.global_step += 1;
        self.counters.batch_in_epoch += 1;

        let record = BatchRecord {
            step,
            lambda,
            loss: terms.loss_value,
            distill: terms.distill_value,
            potential: terms.potential_value,
        };
        let audit = if self.counters.batch_in_epoch >= self.batches_in_epoch() {
            Some(self.end_epoch()?)
        } else {
            None
        };
        Ok((record, audit))
    }

    fn end_epoch(&mut self) -> Result<EpochAudit> {
        let report = audit_bitwidth(&self.student, self.data.val.inputs())?;
        let val_accuracy = accuracy(&self.student, &self.data.val)?;
        let within = report.within(self.config.weight_bits, self.config.activation_bits);
        let epoch = self.counters.epoch;
        if let Some(prev) = &self.last_audit {
            let grew = report.weights.max_actual > prev.report.weights.max_actual
                || report.activations.max_actual > prev.report.activations.max_actual;
            if self.counters.reached && grew {
                log::warn!("epoch {epoch}: max actual bit-width increased after reaching the target");
            }
        }
        let (rw, ra) = report.estimate_residuals();
        log::debug!("epoch {epoch}: acc {val_accuracy:.4}, |est - act| w {rw:.3} a {ra:.3}");
        if within {
            if !self.counters.reached {
                self.counters.reached = true;
                self.counters.first_reached_accuracy = val_accuracy;
            }
            if self.counters.best_accuracy.is_nan() || val_accuracy > self.counters.best_accuracy {
                self.counters.best_accuracy = val_accuracy;
                self.counters.best_epoch = epoch;
                self.best_model = Some(self.student.clone());
            }
        }
        self.metrics.push(MetricsRow {
            step: self.counters.global_step,
            phase: self.lr.phase.as_str().into(),
            lambda: self.lr.current(),
            t_q: self.loss_state.t_q,
            c_r: self.loss_state.c_r,
            loss: None,
            distill_d: None,
            potential_p: None,
            val_acc: Some(val_accuracy),
            mean_w_est: Some(report.weights.mean_estimated),
            mean_w_act: Some(report.weights.mean_actual),
            max_w_act: Some(report.weights.max_actual),
            mean_a_est: Some(report.activations.mean_estimated),
            mean_a_act: Some(report.activations.mean_actual),
            max_a_act: Some(report.activations.max_actual),
        });
        self.counters.epoch += 1;
        self.counters.batch_in_epoch = 0;
        let audit = EpochAudit {
            epoch,
            val_accuracy,
            report,
            within_target: within,
        };
        self.last_audit = Some(audit.clone());
        Ok(audit)
    }

    /// Trains to the end of the current epoch.
    pub fn run_epoch(&mut self) -> Result<EpochAudit> {
        loop {
            if let (_, Some(audit)) = self.step()? {
                return Ok(audit);
            }
        }
    }

    /// Trains until the epoch budget is spent; `on_epoch` sees every audit.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&QatSession, &EpochAudit) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let audit = self.run_epoch()?;
            on_epoch(self, &audit)?;
        }
        Ok(())
    }

    fn metadata(&self) -> Result<String> {
        let last = self.last_audit.as_ref();
        let finite = |v: f64| if v.is_finite() { json!(v) } else { serde_json::Value::Null };
        Ok(serde_json::to_string(&json!({
            "config_hash": self.config.hash()?,
            "epoch": self.counters.epoch,
            "global_step": self.counters.global_step,
            "val_accuracy": last.map(|a| a.val_accuracy),
            "best_accuracy": finite(self.counters.best_accuracy),
            "first_reached_accuracy": finite(self.counters.first_reached_accuracy),
            "last_audit": last.map(|a| &a.report),
        }))?)
    }

    /// Snapshot from which [`QatSession::resume`] continues bit-identically.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            stage: Stage::Qat,
            model: self.student.clone(),
            config: Some(self.config.clone()),
            training: Some(TrainingState {
                optimizer: self.optimizer.clone(),
                loss_state: self.loss_state.clone(),
                lr: self.lr.clone(),
                rng: RngState::capture(&self.rng),
                counters: self.counters.clone(),
            }),
            metadata: self.metadata()?,
        })
    }

    /// The best-within-target student as a checkpoint, if any audit qualified.
    pub fn best_checkpoint(&self) -> Result<Option<Checkpoint>> {
        let Some(model) = &self.best_model else {
            return Ok(None);
        };
        Ok(Some(Checkpoint {
            stage: Stage::Qat,
            model: model.clone(),
            config: Some(self.config.clone()),
            training: None,
            metadata: serde_json::to_string(&json!({
                "config_hash": self.config.hash()?,
                "best_epoch": self.counters.best_epoch,
                "val_accuracy": self.counters.best_accuracy,
            }))?,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::model::{train_teacher, ModelSpec, TeacherConfig};
    use crate::quantizer::NoiseMode;

    fn setup() -> (RunConfig, Model<f64>, Splits<f64>) {
        let data = make_synthetic(SyntheticKind::TwoGaussians, 200, 1).unwrap();
        let spec = ModelSpec::preset("mlp", &[2], 2).unwrap();
        let teacher = train_teacher(
            &spec,
            &data,
            &TeacherConfig {
                epochs: 3,
                ..TeacherConfig::default()
            },
        )
        .unwrap()
        .model;
        let cfg = RunConfig {
            epochs: 2,
            ..RunConfig::default()
        };
        (cfg, teacher, data)
    }

    #[test]
    fn refuses_uninitialized_student() {
        let (cfg, teacher, data) = setup();
        let raw = teacher.quantized_copy(NoiseMode::Bernoulli).unwrap();
        assert!(matches!(QatSession::new(cfg, teacher, raw, data), Err(Error::Contract(_))));
    }

    #[test]
    fn metrics_rows_count_batches_plus_audits() {
        let (cfg, teacher, data) = setup();
        let student = prepare_student(&teacher, &cfg, &data).unwrap();
        let mut s = QatSession::new(cfg, teacher, student, data).unwrap();
        s.run(|_, _| Ok(())).unwrap();
        let batches = s.metrics.iter().filter(|r| !r.is_audit()).count();
        let audits = s.metrics.iter().filter(|r| r.is_audit()).count();
        assert_eq!(audits, 2);
        assert_eq!(batches as u64, s.counters.global_step);
        assert_eq!(s.metrics[0].t_q, 0.0);
        assert_eq!(s.metrics[0].c_r, 1.0);
    }

    #[test]
    fn no_ptq_uses_explicit_init() {
        let (mut cfg, teacher, data) = setup();
        cfg.ptq_enabled = false;
        let student = prepare_student(&teacher, &cfg, &data).unwrap();
        assert!(student.all_quantizers_initialized());
        assert!(student.quantizers().all(|q| (q.weight.bitwidth() - 16.0).abs() < 1e-9));
    }
}
