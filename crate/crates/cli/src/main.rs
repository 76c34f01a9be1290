use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use noisequant::losses::DistillLoss;
use noisequant::model::{accuracy, train_teacher, ModelSpec, TeacherConfig};
use noisequant::oracles::{run_all, DEFAULT_ORACLE_SEED};
use noisequant::pipeline::{
    audit_bitwidth, load_checkpoint, metrics_to_csv, prepare_student, ptq_minmax, read_metrics_csv, save_checkpoint,
    write_atomic, write_metrics_csv, BitWidthReport, Checkpoint, DataSource, QatSession, RunConfig, Stage,
};
use noisequant::quantizer::NoiseMode;
use noisequant::{Model, Splits, Tensor};

const SEED_ENV: &str = "GDNSQ_SEED";

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        writeln!(std::io::stdout(), $($t)*)?;
    }};
}

/// Quantization-aware training with learnable bit-widths.
///
/// Typical flow: `train-fp` a teacher, `ptq` it to 10 bits, `qat` down to the
/// target bit-widths, then `audit` and `fuse` the result. Seeds fall back to
/// the GDNSQ_SEED environment variable when neither a flag nor a config file
/// sets one.
#[derive(Parser, Debug)]
#[command(name = "noisequant", version, propagate_version = true)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the full-precision teacher (hard-label cross-entropy, RAdam).
    TrainFp(TrainFpArgs),
    /// Replace inner layers with quantized ones and calibrate them by 10-bit min-max PTQ.
    Ptq(PtqArgs),
    /// Gradual bit-width convergence to the targets, then learning-rate annealing.
    Qat(QatArgs),
    /// Count distinct dequantized values per site and report actual bit-widths.
    Audit(AuditArgs),
    /// Run the numerical oracle suite; exits 3 if any check fails.
    Verify(VerifyArgs),
    /// Convert a run's metrics file to CSV or JSON on stdout.
    ExportMetrics(ExportArgs),
    /// Emit integer weights and scales of a converged student as JSON.
    Fuse(FuseArgs),
}

#[derive(Args, Debug)]
struct TrainFpArgs {
    /// Architecture preset: mlp, mlp-deep, mlp-small or cnn.
    #[arg(long, default_value = "mlp")]
    model: String,
    /// Dataset: two_gaussians, concentric_rings (optionally NAME:N) or idx:IMAGES,LABELS.
    #[arg(long, default_value = "two_gaussians")]
    data: String,
    /// Seed for data generation, initialization and batch order [env GDNSQ_SEED, default 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs.
    #[arg(long, default_value_t = TeacherConfig::default().epochs)]
    epochs: usize,
    /// RAdam learning rate.
    #[arg(long, default_value_t = TeacherConfig::default().lr)]
    lr: f64,
    /// Minibatch size.
    #[arg(long, default_value_t = TeacherConfig::default().batch_size)]
    batch_size: usize,
    /// Output directory; receives teacher.ckpt and run.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PtqArgs {
    /// Teacher checkpoint written by train-fp.
    #[arg(long)]
    ckpt: PathBuf,
    /// Calibration dataset (same syntax as train-fp); defaults to the teacher's.
    #[arg(long)]
    data: Option<String>,
    /// Backward probe stored in the quantizers: rounding_residual, bernoulli or bernoulli_variance_matched.
    #[arg(long, default_value = "bernoulli")]
    noise_mode: NoiseMode,
    /// Output directory; receives ptq.ckpt and run.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct QatArgs {
    /// PTQ checkpoint to start from (not needed with --no-ptq or --resume).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Teacher checkpoint providing the distillation targets.
    #[arg(long)]
    teacher: PathBuf,
    /// JSON run configuration; flags override it, it overrides built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset override (same syntax as train-fp); defaults to the teacher's.
    #[arg(long)]
    data: Option<String>,
    /// Target weight bit-width ω_w*.
    #[arg(long)]
    wbits: Option<f64>,
    /// Target activation bit-width ω_a*.
    #[arg(long)]
    abits: Option<f64>,
    /// Initial learning rate λ₀; the penalty weight t_q grows by λ per batch.
    #[arg(long)]
    lr0: Option<f64>,
    /// Epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Backward probe for ∂(s·r)/∂s: rounding_residual, bernoulli or bernoulli_variance_matched.
    #[arg(long)]
    noise_mode: Option<NoiseMode>,
    /// Distance d to the reference: jeffreys, cross_entropy or hard_label_ce (no distillation).
    #[arg(long)]
    distill: Option<DistillLoss>,
    /// Skip PTQ: initialize quantizers explicitly (weights min-max, activations [0, 4], 16 bits).
    #[arg(long)]
    no_ptq: bool,
    /// Normalize with running statistics and stop updating them.
    #[arg(long)]
    freeze_bn: bool,
    /// Starting value of the penalty weight t_q (0 gives gradual scaling).
    #[arg(long)]
    tq_init: Option<f64>,
    /// Seed for probe noise and batch order [env GDNSQ_SEED, default 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from OUT/last.ckpt instead of starting over.
    #[arg(long)]
    resume: bool,
    /// Output directory; receives metrics.csv, last.ckpt, best.ckpt, summary.json and run.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// Checkpoint with quantized layers (ptq or qat stage).
    #[arg(long)]
    ckpt: PathBuf,
    /// Validation data for the activation count; defaults to the checkpoint's.
    #[arg(long)]
    data: Option<String>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Run only oracles whose name contains this string.
    #[arg(long)]
    filter: Option<String>,
    /// Seed of the Monte-Carlo oracles.
    #[arg(long, default_value_t = DEFAULT_ORACLE_SEED)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricsFormat {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Directory written by qat.
    #[arg(long)]
    run_dir: PathBuf,
    /// Output format.
    #[arg(long, value_enum, default_value = "csv")]
    format: MetricsFormat,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Quantized checkpoint (an MLP student).
    #[arg(long)]
    ckpt: PathBuf,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

/// Invalid flag combination; exit code 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Oracle or check failure; exit code 3.
#[derive(Debug)]
struct CheckFailed(usize);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} check(s) failed", self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn parse_data(text: &str, seed: u64) -> anyhow::Result<DataSource> {
    DataSource::parse(text, seed).map_err(|e| usage(format!("--data: {e}")))
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn load_data(source: &DataSource) -> anyhow::Result<Splits> {
    source.load().with_context(|| format!("loading {source}"))
}

fn checkpoint_data(ckpt: &Checkpoint, flag: Option<&str>) -> anyhow::Result<DataSource> {
    let stored = ckpt.config.as_ref().map(|c| c.data.clone());
    match (flag, stored) {
        (Some(text), stored) => parse_data(text, stored.as_ref().map_or(0, data_seed)),
        (None, Some(d)) => Ok(d),
        (None, None) => Err(usage("checkpoint records no dataset; pass --data")),
    }
}

fn data_seed(d: &DataSource) -> u64 {
    match d {
        DataSource::Synthetic { seed, .. } | DataSource::Idx { seed, .. } => *seed,
    }
}

fn train_fp(a: TrainFpArgs) -> anyhow::Result<()> {
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let source = parse_data(&a.data, seed)?;
    if a.epochs == 0 || a.batch_size == 0 || !(a.lr > 0.0) {
        return Err(usage("--epochs, --batch-size and --lr must be positive"));
    }
    let data = load_data(&source)?;
    let spec = ModelSpec::preset(&a.model, data.train.feature_shape(), data.train.num_classes())
        .map_err(|e| usage(format!("--model: {e}")))?;
    let cfg = TeacherConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed,
    };
    create_out(&a.out)?;
    log::info!("training {} teacher on {source} for {} epochs", a.model, a.epochs);
    let trained = train_teacher(&spec, &data, &cfg)?;
    let run = RunConfig {
        model: a.model.clone(),
        data: source,
        seed,
        ..RunConfig::default()
    };
    let resolved = json!({ "command": "train-fp", "model": a.model, "data": run.data, "teacher": cfg });
    let ckpt = Checkpoint {
        stage: Stage::Teacher,
        model: trained.model,
        config: Some(run),
        training: None,
        metadata: serde_json::to_string(&json!({
            "teacher": cfg,
            "val_accuracy": trained.val_accuracy,
            "final_loss": trained.final_loss,
        }))?,
    };
    save_checkpoint(&ckpt, a.out.join("teacher.ckpt"))?;
    write_json(&a.out.join("run.json"), &resolved)?;
    out!("teacher val_accuracy={:.4} final_loss={:.6}", trained.val_accuracy, trained.final_loss);
    Ok(())
}

fn expect_stage(ckpt: &Checkpoint, stage: Stage, flag: &str) -> anyhow::Result<()> {
    if ckpt.stage != stage {
        return Err(usage(format!(
            "{flag} expects a {} checkpoint, got {}",
            stage.as_str(),
            ckpt.stage.as_str()
        )));
    }
    Ok(())
}

fn report_line(prefix: &str, r: &BitWidthReport) -> String {
    format!(
        "{prefix} weights mean_est={:.3} mean_act={:.3} max_act={} activations mean_est={:.3} mean_act={:.3} max_act={}",
        r.weights.mean_estimated,
        r.weights.mean_actual,
        r.weights.max_actual,
        r.activations.mean_estimated,
        r.activations.mean_actual,
        r.activations.max_actual
    )
}

fn ptq(a: PtqArgs) -> anyhow::Result<()> {
    let teacher = load_checkpoint(&a.ckpt)?;
    expect_stage(&teacher, Stage::Teacher, "--ckpt")?;
    let source = checkpoint_data(&teacher, a.data.as_deref())?;
    let data = load_data(&source)?;
    let mut student = teacher.model.quantized_copy(a.noise_mode)?;
    ptq_minmax(&mut student, data.train.inputs())?;
    let report = audit_bitwidth(&student, data.val.inputs())?;
    let (t_acc, s_acc) = (accuracy(&teacher.model, &data.val)?, accuracy(&student, &data.val)?);
    create_out(&a.out)?;
    let mut config = teacher.config.clone().unwrap_or_default();
    config.data = source.clone();
    config.noise_mode = a.noise_mode;
    let ckpt = Checkpoint {
        stage: Stage::Ptq,
        model: student,
        config: Some(config),
        training: None,
        metadata: serde_json::to_string(&json!({
            "teacher_val_accuracy": t_acc,
            "val_accuracy": s_acc,
            "audit": report,
        }))?,
    };
    save_checkpoint(&ckpt, a.out.join("ptq.ckpt"))?;
    write_json(
        &a.out.join("run.json"),
        &json!({ "command": "ptq", "teacher": a.ckpt, "data": source, "noise_mode": a.noise_mode }),
    )?;
    out!("teacher val_accuracy={t_acc:.4} ptq val_accuracy={s_acc:.4}");
    out!("{}", report_line("ptq", &report));
    Ok(())
}

/// Defaults, then the teacher's model and data, then the config file, then flags.
fn resolve_qat_config(a: &QatArgs, teacher: &Checkpoint) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(t) = &teacher.config {
        cfg.model = t.model.clone();
        cfg.data = t.data.clone();
    }
    let mut seed_set = false;
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let Value::Object(fields) = file else {
            return Err(usage(format!("{} must hold a JSON object", path.display())));
        };
        seed_set = fields.contains_key("seed");
        let mut merged = serde_json::to_value(&cfg)?;
        merged.as_object_mut().expect("config is an object").extend(fields);
        cfg = RunConfig::from_json(&merged.to_string()).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    } else if !seed_set {
        if let Some(s) = env_seed()? {
            cfg.seed = s;
        }
    }
    if let Some(d) = &a.data {
        cfg.data = parse_data(d, data_seed(&cfg.data))?;
    }
    if let Some(v) = a.wbits {
        cfg.weight_bits = v;
    }
    if let Some(v) = a.abits {
        cfg.activation_bits = v;
    }
    if let Some(v) = a.lr0 {
        cfg.lambda0 = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.noise_mode {
        cfg.noise_mode = v;
    }
    if let Some(v) = a.distill {
        cfg.distill_loss = v;
    }
    if let Some(v) = a.tq_init {
        cfg.tq_init = v;
    }
    if a.no_ptq {
        cfg.ptq_enabled = false;
    }
    if a.freeze_bn {
        cfg.batchnorm_frozen = true;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn qat(a: QatArgs) -> anyhow::Result<()> {
    let teacher = load_checkpoint(&a.teacher)?;
    expect_stage(&teacher, Stage::Teacher, "--teacher")?;
    let last_path = a.out.join("last.ckpt");
    let metrics_path = a.out.join("metrics.csv");
    let mut session = if a.resume {
        if a.ckpt.is_some() || a.config.is_some() {
            return Err(usage("--resume continues OUT/last.ckpt; drop --ckpt and --config"));
        }
        let ckpt = load_checkpoint(&last_path)?;
        expect_stage(&ckpt, Stage::Qat, "OUT/last.ckpt")?;
        let data = load_data(&ckpt.config.as_ref().context("last.ckpt has no config")?.data)?;
        QatSession::resume(ckpt, teacher.model.clone(), data)?
    } else {
        let config = resolve_qat_config(&a, &teacher)?;
        let data = load_data(&config.data)?;
        let student = match (&a.ckpt, config.ptq_enabled) {
            (Some(path), true) => {
                let c = load_checkpoint(path)?;
                expect_stage(&c, Stage::Ptq, "--ckpt")?;
                c.model
            }
            (None, false) => prepare_student(&teacher.model, &config, &data)?,
            (Some(_), false) => return Err(usage("--no-ptq initializes from the teacher; drop --ckpt")),
            (None, true) => return Err(usage("--ckpt (a ptq checkpoint) is required unless --no-ptq is given")),
        };
        create_out(&a.out)?;
        write_json(&a.out.join("run.json"), &serde_json::to_value(&config)?)?;
        if metrics_path.exists() {
            fs::remove_file(&metrics_path)?;
        }
        QatSession::new(config, teacher.model.clone(), student, data)?
    };
    log::info!(
        "qat to W{}A{} for {} epochs",
        session.config.weight_bits,
        session.config.activation_bits,
        session.config.epochs
    );
    let mut written = 0usize;
    session.run(|s, audit| {
        write_metrics_csv(&s.metrics[written..], &metrics_path, true)?;
        written = s.metrics.len();
        save_checkpoint(&s.checkpoint()?, &last_path)?;
        log::info!(
            "epoch {} acc {:.4} w max {} a max {}{}",
            audit.epoch,
            audit.val_accuracy,
            audit.report.weights.max_actual,
            audit.report.activations.max_actual,
            if audit.within_target { " (within target)" } else { "" }
        );
        Ok(())
    })?;
    if let Some(best) = session.best_checkpoint()? {
        save_checkpoint(&best, a.out.join("best.ckpt"))?;
    }
    let c = &session.counters;
    let finite = |v: f64| if v.is_finite() { json!(v) } else { Value::Null };
    let summary = json!({
        "epochs": c.epoch,
        "steps": c.global_step,
        "reached_target": c.reached,
        "first_reached_accuracy": finite(c.first_reached_accuracy),
        "best_accuracy": finite(c.best_accuracy),
        "best_epoch": c.reached.then_some(c.best_epoch),
        "final_val_accuracy": session.last_audit.as_ref().map(|x| x.val_accuracy),
        "final_audit": session.last_audit.as_ref().map(|x| &x.report),
    });
    write_json(&a.out.join("summary.json"), &summary)?;
    if let Some(last) = &session.last_audit {
        out!(
            "final val_accuracy={:.4} reached_target={} best_accuracy={}",
            last.val_accuracy, c.reached, summary["best_accuracy"]
        );
        out!("{}", report_line("final", &last.report));
    }
    Ok(())
}

fn audit(a: AuditArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    if !ckpt.model.is_quantized() {
        return Err(usage(format!("{} holds no quantized layers", a.ckpt.display())));
    }
    let data = load_data(&checkpoint_data(&ckpt, a.data.as_deref())?)?;
    let report = audit_bitwidth(&ckpt.model, data.val.inputs())?;
    if a.json {
        out!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    for s in &report.sites {
        out!(
            "layer {} {:?}: estimated={:.4} unique={} actual={}",
            s.layer, s.kind, s.estimated, s.unique_values, s.actual
        );
    }
    out!("{}", report_line("aggregate", &report));
    out!("val_accuracy={:.4}", accuracy(&ckpt.model, &data.val)?);
    Ok(())
}

fn verify(a: VerifyArgs) -> anyhow::Result<()> {
    let reports = run_all(a.filter.as_deref(), a.seed).map_err(|e| match e {
        noisequant::Error::Unknown { .. } => usage(e.to_string()),
        other => other.into(),
    })?;
    for r in &reports {
        out!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CheckFailed(failed).into());
    }
    Ok(())
}

fn export_metrics(a: ExportArgs) -> anyhow::Result<()> {
    let rows = read_metrics_csv(a.run_dir.join("metrics.csv"))?;
    match a.format {
        MetricsFormat::Csv => {
            use std::io::Write;
            std::io::stdout().write_all(&metrics_to_csv(&rows)?)?
        },
        MetricsFormat::Json => out!("{}", serde_json::to_string_pretty(&rows)?),
    }
    Ok(())
}

fn tensor_json(t: &Tensor) -> Value {
    json!({ "shape": t.shape(), "data": t.data() })
}

fn fuse(a: FuseArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let model: &Model = &ckpt.model;
    if !model.is_quantized() {
        return Err(usage(format!("{} holds no quantized layers", a.ckpt.display())));
    }
    let fused = model.fuse()?;
    let fp = |l: &noisequant::model::FpLinear<f64>| {
        json!({
            "weights": tensor_json(&l.weights),
            "bias": l.bias.as_ref().map(tensor_json),
            "activation": l.activation,
        })
    };
    let out = json!({
        "first": fp(&fused.first),
        "inner": fused.inner,
        "last": fp(&fused.last),
    });
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_out(dir)?;
    }
    write_json(&a.out, &out)?;
    let levels: usize = fused.inner.iter().map(|l| l.int_weights.len()).sum();
    out!("fused {} inner layers ({levels} integer weights) to {}", fused.inner.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::TrainFp(a) => train_fp(a),
        Command::Ptq(a) => ptq(a),
        Command::Qat(a) => qat(a),
        Command::Audit(a) => audit(a),
        Command::Verify(a) => verify(a),
        Command::ExportMetrics(a) => export_metrics(a),
        Command::Fuse(a) => fuse(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) if e.is::<CheckFailed>() => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn qat_flags_map_to_targets() {
        let cli = Cli::try_parse_from([
            "noisequant", "qat", "--teacher", "t.ckpt", "--ckpt", "p.ckpt", "--wbits", "4", "--abits", "4", "--out", "o",
        ])
        .unwrap();
        let Command::Qat(a) = cli.command else { panic!("not qat") };
        let teacher = Checkpoint {
            stage: Stage::Teacher,
            model: noisequant::model::build_model(&ModelSpec::preset("mlp", &[2], 2).unwrap(), false, NoiseMode::Bernoulli, 0)
                .unwrap(),
            config: None,
            training: None,
            metadata: "{}".into(),
        };
        let cfg = resolve_qat_config(&a, &teacher).unwrap();
        assert_eq!((cfg.weight_bits, cfg.activation_bits), (4.0, 4.0));
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["noisequant", "verify", "--bogus"]).is_err());
    }
}
