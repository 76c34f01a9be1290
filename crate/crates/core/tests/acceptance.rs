//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use noisequant::data::SyntheticKind;
use noisequant::losses::DistillLoss;
use noisequant::model::{accuracy, train_teacher, ModelSpec, TeacherConfig};
use noisequant::oracles::{
    bsc_reduction, jeffreys_hamming, lemma_fd_means, lemma_fd_round, model_gradient_check, run_all,
    ste_gradient_check, OracleReport, DEFAULT_ORACLE_SEED,
};
use noisequant::pipeline::{
    audit_bitwidth, prepare_student, Checkpoint, DataSource, QatSession, RunConfig,
};
use noisequant::quantizer::{FakeQuantizer, NoiseMode, SiteKind};
use noisequant::{Model, Splits, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn all_passed(reports: &[OracleReport]) -> (bool, String) {
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(ToString::to_string).collect();
    (failed.is_empty(), failed.join("; "))
}

fn within_budget(elapsed: Duration, secs: u64) -> bool {
    elapsed <= Duration::from_secs(secs)
}

fn lemma() -> Outcome {
    let start = Instant::now();
    let mut reports = Vec::new();
    let mut worst_plus = 0.0f64;
    for (i, (l, u, d)) in [(0, 4, 0.25), (-3, 2, 0.1), (0, 1, 0.49)].into_iter().enumerate() {
        let seed = DEFAULT_ORACLE_SEED + i as u64;
        reports.extend(lemma_fd_round(l, u, d, 1_000_000, seed).expect("lemma inputs are valid"));
        let m = lemma_fd_means(l, u, d, 1_000_000, seed).expect("lemma inputs are valid");
        let z = (m.plus - ((l + u) as f64 / 2.0 + d)).abs() / (m.plus_sd / 1e3);
        worst_plus = worst_plus.max(z);
    }
    let elapsed = start.elapsed();
    let (ok, failed) = all_passed(&reports);
    outcome(
        ok && worst_plus <= 4.0 && within_budget(elapsed, 5),
        format!(
            "{} checks, worst E⌊x+Δ⌉ deviation {worst_plus:.2} standard errors, {:.2}s {failed}",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn jeffreys() -> Outcome {
    let start = Instant::now();
    let mut reports = Vec::new();
    for (i, (p0, p1)) in [(0.1, 0.1), (0.2, 0.05), (0.4, 0.3)].into_iter().enumerate() {
        reports.extend(jeffreys_hamming(p0, p1, 64, 1000, DEFAULT_ORACLE_SEED + i as u64).expect("valid channel"));
    }
    for p in [0.1, 0.3] {
        reports.extend(bsc_reduction(p).expect("valid channel"));
    }
    let elapsed = start.elapsed();
    let worst = reports
        .iter()
        .filter(|r| r.name.ends_with("proportionality"))
        .map(|r| r.statistic)
        .fold(0.0, f64::max);
    let (ok, failed) = all_passed(&reports);
    outcome(
        ok && within_budget(elapsed, 5),
        format!("max |Σ J − Δ·d_H| = {worst:.2e}, {:.2}s {failed}", elapsed.as_secs_f64()),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut reports = model_gradient_check(100, DEFAULT_ORACLE_SEED).expect("gradient check runs");
    reports.extend(ste_gradient_check(200, DEFAULT_ORACLE_SEED).expect("ste check runs"));
    let elapsed = start.elapsed();
    let (ok, failed) = all_passed(&reports);
    let rel = reports[0].statistic;
    outcome(
        ok && within_budget(elapsed, 30),
        format!(
            "max relative error {rel:.2e} over {} coordinates, noise-path x-gradient {:.1e}, {:.2}s {failed}",
            reports[0].trials,
            reports.iter().find(|r| r.name.ends_with("noise_path_x")).map_or(f64::NAN, |r| r.statistic),
            elapsed.as_secs_f64()
        ),
    )
}

fn bitwidth_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let omega: f64 = rng.random_range(0.5..16.0);
        let l: f64 = rng.random_range(-10.0..10.0);
        let u = l + rng.random_range(1e-3..20.0);
        let s = (u - l) / (omega.exp2() - 1.0);
        let q = FakeQuantizer::from_scale_bounds(SiteKind::Weight, NoiseMode::Bernoulli, s, l, u).expect("valid bounds");
        worst = worst.max((q.bitwidth() - omega).abs());
    }
    let mut counts = Vec::new();
    for bits in [1u32, 2, 3, 4, 8, 10] {
        let levels = 1usize << bits;
        let (l, u) = (0.0, 1.0);
        let s = (u - l) / (levels as f64 - 1.0);
        let q = FakeQuantizer::from_scale_bounds(SiteKind::Weight, NoiseMode::Bernoulli, s, l, u).expect("valid bounds");
        let sweep: Vec<f64> = (0..=levels * 64).map(|i| -0.5 + 2.0 * i as f64 / (levels * 64) as f64).collect();
        let distinct = noisequant::pipeline::unique_levels(&q, &sweep);
        counts.push((bits, distinct, levels));
    }
    let counts_ok = counts.iter().all(|&(_, d, want)| d == want);
    outcome(
        worst <= 1e-12 && counts_ok,
        format!("max round-trip error {worst:.2e}, level counts {counts:?}"),
    )
}

fn data(kind: SyntheticKind) -> Splits {
    DataSource::synthetic(kind, 0).load().expect("synthetic data")
}

fn teacher(spec: &str, d: &Splits) -> Model {
    let spec = ModelSpec::preset(spec, d.train.feature_shape(), d.train.num_classes()).expect("preset");
    train_teacher(&spec, d, &TeacherConfig::default()).expect("teacher trains").model
}

fn ptq_contract() -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();
    for kind in [SyntheticKind::TwoGaussians, SyntheticKind::ConcentricRings] {
        let d = data(kind);
        let t = teacher("mlp", &d);
        let cfg = RunConfig::default();
        let s = prepare_student(&t, &cfg, &d).expect("ptq");
        let (ta, sa) = (accuracy(&t, &d.val).unwrap(), accuracy(&s, &d.val).unwrap());
        let report = audit_bitwidth(&s, d.val.inputs()).unwrap();
        let bits: Vec<u32> = report.sites.iter().map(|x| x.actual).collect();
        ok &= (ta - sa).abs() <= 0.005 && bits.iter().all(|&b| b == 10);
        notes.push(format!("{kind}: teacher {ta:.4} ptq {sa:.4} site bits {bits:?}"));
    }
    let elapsed = start.elapsed();
    outcome(ok && within_budget(elapsed, 60), format!("{}, {:.2}s", notes.join("; "), elapsed.as_secs_f64()))
}

fn qat(d: &Splits, t: &Model, cfg: RunConfig) -> QatSession {
    let student = prepare_student(t, &cfg, d).expect("student");
    let mut s = QatSession::new(cfg, t.clone(), student, d.clone()).expect("session");
    s.run(|_, _| Ok(())).expect("qat runs");
    s
}

fn qat_config(kind: SyntheticKind, bits: f64) -> RunConfig {
    RunConfig {
        data: DataSource::synthetic(kind, 0),
        weight_bits: bits,
        activation_bits: bits,
        ..RunConfig::default()
    }
}

/// Maximum actual bit-widths at the first audit within target, if any.
fn first_reached(s: &QatSession) -> Option<(u32, u32)> {
    s.metrics
        .iter()
        .filter(|r| r.is_audit())
        .map(|r| (r.max_w_act.unwrap_or(u32::MAX), r.max_a_act.unwrap_or(u32::MAX)))
        .find(|&(w, a)| w as f64 <= s.config.weight_bits && a as f64 <= s.config.activation_bits)
}

fn convergence(gauss: &(Splits, Model), rings: &(Splits, Model), rings_baseline: &QatSession) -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();
    let teacher_acc = accuracy(&gauss.1, &gauss.0.val).unwrap();
    for bits in [4.0, 2.0] {
        let s = qat(&gauss.0, &gauss.1, qat_config(SyntheticKind::TwoGaussians, bits));
        let reached = first_reached(&s);
        let final_acc = s.last_audit.as_ref().map_or(0.0, |a| a.val_accuracy);
        ok &= reached.is_some();
        if bits == 4.0 {
            ok &= final_acc >= 0.98 * teacher_acc;
        }
        notes.push(format!(
            "W{bits}A{bits} reached {reached:?} at epoch {:?}, final acc {final_acc:.4} (teacher {teacher_acc:.4})",
            s.metrics.iter().filter(|r| r.is_audit()).position(|r| {
                r.max_w_act.unwrap() as f64 <= bits && r.max_a_act.unwrap() as f64 <= bits
            })
        ));
    }
    let majority = rings.0.val.majority_fraction();
    let best = rings_baseline.counters.best_accuracy;
    let reached = first_reached(rings_baseline);
    ok &= reached.is_some() && best >= majority + 0.20;
    notes.push(format!("rings W1A1 reached {reached:?}, best acc at target {best:.4} vs majority {majority:.4}"));
    let elapsed = start.elapsed();
    outcome(ok && within_budget(elapsed, 600), format!("{}, {:.2}s", notes.join("; "), elapsed.as_secs_f64()))
}

fn best_or_zero(s: &QatSession) -> f64 {
    let b = s.counters.best_accuracy;
    if b.is_nan() {
        0.0
    } else {
        b
    }
}

/// Penalty weight for the no-scaling ablation: twice the value the gradual
/// schedule reaches at the end of the baseline budget.
fn huge_tq(cfg: &RunConfig, d: &Splits) -> f64 {
    let steps = cfg.epochs * d.train.len().div_ceil(cfg.batch_size);
    2.0 * cfg.lambda0 * steps as f64
}

fn ablations(rings: &(Splits, Model), baseline: &QatSession) -> Outcome {
    let base_cfg = qat_config(SyntheticKind::ConcentricRings, 1.0);
    let tq = huge_tq(&base_cfg, &rings.0);
    let no_scaling = qat(
        &rings.0,
        &rings.1,
        RunConfig {
            tq_init: tq,
            ..base_cfg.clone()
        },
    );
    let no_distill = qat(
        &rings.0,
        &rings.1,
        RunConfig {
            distill_loss: DistillLoss::HardLabelCe,
            ..base_cfg
        },
    );
    let (b, a, c) = (best_or_zero(baseline), best_or_zero(&no_scaling), best_or_zero(&no_distill));
    outcome(
        a < b && c < b,
        format!(
            "best acc: baseline {b:.4}, (a) no scaling t_q={tq} {a:.4} [{}], (b) hard-label CE {c:.4} [{}]",
            if a < b { "lower" } else { "NOT lower" },
            if c < b { "lower" } else { "NOT lower" }
        ),
    )
}

fn fusion(gauss: &(Splits, Model)) -> Outcome {
    let s = qat(&gauss.0, &gauss.1, qat_config(SyntheticKind::TwoGaussians, 4.0));
    let student = s.best_model.clone().unwrap_or_else(|| s.student.clone());
    let fused = match student.fuse() {
        Ok(f) => f,
        Err(e) => return outcome(false, format!("fusion failed: {e}")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::new(vec![100, 2], (0..200).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
    let diff = fused.forward(&x).unwrap().max_abs_diff(&student.predict(&x).unwrap());
    outcome(diff <= 1e-10, format!("max |fused − fake-quant| = {diff:.2e} over 100 inputs"))
}

fn determinism(gauss: &(Splits, Model)) -> Outcome {
    let cfg = RunConfig {
        epochs: 5,
        ..qat_config(SyntheticKind::TwoGaussians, 4.0)
    };
    let student = prepare_student(&gauss.1, &cfg, &gauss.0).unwrap();
    let mut s = QatSession::new(cfg, gauss.1.clone(), student, gauss.0.clone()).unwrap();
    for _ in 0..45 {
        s.step().unwrap();
    }
    let bytes = s.checkpoint().unwrap().to_bytes().unwrap();
    let uninterrupted: Vec<u64> = (0..10).map(|_| s.step().unwrap().0.loss.to_bits()).collect();

    let restored = Checkpoint::from_bytes(&bytes).unwrap();
    let resaved = restored.to_bytes().unwrap();
    let mut r = QatSession::resume(restored, gauss.1.clone(), gauss.0.clone()).unwrap();
    let resumed: Vec<u64> = (0..10).map(|_| r.step().unwrap().0.loss.to_bits()).collect();
    let same_losses = uninterrupted == resumed;
    let same_bytes = bytes == resaved;
    outcome(
        same_losses && same_bytes,
        format!(
            "next 10 losses bit-identical: {same_losses}; save→load→save byte-identical: {same_bytes} ({} bytes)",
            bytes.len()
        ),
    )
}

fn suite() -> Outcome {
    let start = Instant::now();
    let reports = run_all(None, DEFAULT_ORACLE_SEED).expect("suite runs");
    let elapsed = start.elapsed();
    let (ok, failed) = all_passed(&reports);
    outcome(
        ok && within_budget(elapsed, 120),
        format!("{} oracle checks in {:.2}s {failed}", reports.len(), elapsed.as_secs_f64()),
    )
}

fn main() -> ExitCode {
    // The harness-less target still receives libtest flags; a name filter
    // that matches nothing here means another target was selected.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }

    let mut results: Vec<(u8, &str, Outcome)> = vec![
        (1, "lemma oracle", lemma()),
        (2, "Jeffreys-Hamming and BSC identities", jeffreys()),
        (3, "gradient integrity", gradients()),
        (4, "bit-width algebra", bitwidth_algebra()),
        (5, "PTQ contract", ptq_contract()),
    ];
    let gd = data(SyntheticKind::TwoGaussians);
    let gauss = (gd.clone(), teacher("mlp", &gd));
    let rd = data(SyntheticKind::ConcentricRings);
    let rings = (rd.clone(), teacher("mlp", &rd));
    let rings_baseline = qat(&rings.0, &rings.1, qat_config(SyntheticKind::ConcentricRings, 1.0));
    results.push((6, "convergence to target", convergence(&gauss, &rings, &rings_baseline)));
    results.push((7, "ablation directions", ablations(&rings, &rings_baseline)));
    results.push((8, "fusion equivalence", fusion(&gauss)));
    results.push((9, "determinism and persistence", determinism(&gauss)));
    results.push((10, "oracle suite", suite()));

    let mut failures = 0;
    for (id, name, o) in &results {
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {id} ({name}): {}", o.detail.trim_end());
        failures += usize::from(!o.passed);
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
