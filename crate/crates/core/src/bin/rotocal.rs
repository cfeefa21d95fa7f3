use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rotocal::calibrator::{calibrate, CalibrationConfig, OutlierThreshold, RotationMetrics};
use rotocal::distributions::{moments, sample_laplace, LaplaceModel};
use rotocal::invariance::{invariance_suite_with, negative_controls, Fault, SuiteConfig};
use rotocal::io::{read_activations, read_tensor, write_tensor, ReportFile};
use rotocal::objectives::{whip_loss_and_grad, ObjectiveKind};
use rotocal::optimizers::{self, OptimizerKind, OptimizerVariant, RotationState};
use rotocal::quantizer::{default_outlier_threshold, fake_quantize, total_outliers, QuantConfig};
use rotocal::tensor::{random_hadamard, FlopCounter, FlopTag, Matrix};
use rotocal::{Dtype, Error};

const EXIT_VALIDATION: u8 = 1;
const EXIT_DIVERGENCE: u8 = 2;
const EXIT_INVARIANCE: u8 = 3;

#[derive(Parser)]
#[command(name = "rotocal", version, about = "Calibrate orthogonal rotations for low-bit activation quantization")]
struct Cli {
    /// Print human-readable tables after the key=value lines.
    #[arg(long, global = true)]
    pretty: bool,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded Laplace activation batch.
    GenActs(GenActs),
    /// Learn a rotation for an activation file.
    Calibrate(Calibrate),
    /// Outlier count and fake-quantization error, optionally after a rotation.
    QuantizeSim(QuantizeSim),
    /// Multiply-add counts of QR-Orth and Cayley steps.
    Bench(Bench),
    /// Check that fused rotations leave a toy transformer block unchanged.
    InvarianceCheck(InvarianceCheck),
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        }
    }
}

#[derive(Args)]
struct GenActs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long, default_value_t = 1.0)]
    scale_b: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    dtype: DtypeArg,
}

#[derive(Args)]
struct Calibrate {
    #[arg(long)]
    acts: PathBuf,
    #[arg(long, default_value = "whip")]
    objective: String,
    #[arg(long, default_value = "qr_sgd")]
    optimizer: String,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Momentum coefficient; defaults to 0 for qr_sgd and 0.9 otherwise.
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.10)]
    sample_ratio: f64,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    /// Outlier threshold; defaults to 4 × RMS of the input.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_rotation: PathBuf,
    #[arg(long)]
    out_report: PathBuf,
    /// Store wall time in the report (makes the report non-reproducible).
    #[arg(long)]
    record_timing: bool,
}

#[derive(Args)]
struct QuantizeSim {
    #[arg(long)]
    acts: PathBuf,
    #[arg(long)]
    rotation: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct Bench {
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// QR-Orth variant compared against cayley_sgd.
    #[arg(long, default_value = "qr_sgd")]
    optimizer: String,
}

#[derive(Args)]
struct InvarianceCheck {
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_nonorthogonal: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            _ => EXIT_VALIDATION,
        };
        Failure { code, message: e.to_string() }
    }
}

fn validation(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_VALIDATION,
        message: message.into(),
    }
}

fn kv(key: &str, value: impl Display) {
    println!("{key}={value}");
}

fn table(header: &[&str], rows: &[Vec<String>]) {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        println!("{}", padded.join("  ").trim_end());
    };
    println!();
    line(header.to_vec());
    line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for r in rows {
        line(r.iter().map(String::as_str).collect());
    }
}

fn gen_acts(a: GenActs) -> Result<(), Failure> {
    if !a.cols.is_power_of_two() {
        log::warn!("cols = {} is not a power of two; Hadamard initialization will reject it", a.cols);
        eprintln!("warning: cols = {} is not a power of two", a.cols);
    }
    let model = LaplaceModel::new(a.scale_b)?;
    let batch = sample_laplace(&model, a.rows, a.cols, a.seed)?;
    write_tensor(&a.out, &batch.tokens, a.dtype.into())?;
    let m = moments(&batch)?;
    kv("rows", a.rows);
    kv("cols", a.cols);
    kv("scale_b", a.scale_b);
    kv("seed", a.seed);
    kv("mean", m.mean);
    kv("variance", m.variance);
    kv("excess_kurtosis", m.excess_kurtosis.map_or("none".into(), |k| k.to_string()));
    kv("sample_count", m.sample_count);
    Ok(())
}

fn print_metrics(prefix: &str, m: &RotationMetrics) {
    kv(&format!("{prefix}.outliers"), m.outliers);
    kv(&format!("{prefix}.quant_mse"), m.quant_mse);
}

fn run_calibrate(a: Calibrate, pretty: bool) -> Result<(), Failure> {
    let x = read_activations(&a.acts)?;
    let quant = QuantConfig::new(a.bits)?;
    let objective = match a.objective.parse::<ObjectiveKind>()? {
        ObjectiveKind::QuantLoss { .. } => ObjectiveKind::QuantLoss { quant_cfg: quant },
        other => other,
    };
    let variant: OptimizerVariant = a.optimizer.parse()?;
    let mut optimizer = OptimizerKind::new(variant, a.lr);
    if let Some(beta) = a.momentum {
        optimizer.momentum_beta = beta;
    }
    let cfg = CalibrationConfig {
        objective,
        optimizer,
        max_iters: a.max_iters,
        token_sample_ratio: a.sample_ratio,
        seed: a.seed,
        batch_size: a.batch_size,
        epochs: a.epochs,
        tau_outlier: a.tau.map_or(OutlierThreshold::Auto, OutlierThreshold::Fixed),
        eval_quant: quant,
    };
    let (r, mut report) = calibrate(&x, &cfg)?;
    if let Some(t) = report.wall_time_seconds {
        eprintln!("wall_time_seconds={t}");
    }
    if !a.record_timing {
        report.wall_time_seconds = None;
    }
    write_tensor(&a.out_rotation, &r, Dtype::F64)?;
    ReportFile::new(report.clone()).write(&a.out_report)?;

    kv("objective", objective.name());
    kv("optimizer", variant.name());
    kv("steps", report.steps());
    kv("sampled_tokens", report.sampled_tokens);
    kv("loss_initial", report.objective_initial);
    kv("loss_final", report.objective_final);
    kv("relative_loss_change", report.relative_loss_change);
    kv("loss_stalled", report.loss_stalled);
    kv("tau", report.tau_outlier);
    print_metrics("identity", &report.identity);
    print_metrics("hadamard", &report.before);
    print_metrics("calibrated", &report.after);
    kv("orthogonality_error", report.final_orthogonality_error);
    for (tag, count) in &report.flops {
        kv(&format!("flops.{tag}"), count);
    }
    if report.loss_stalled {
        eprintln!(
            "note: objective moved by only {:.3e} (relative); it may be insensitive to rotation",
            report.relative_loss_change
        );
    }
    if pretty {
        let row = |name: &str, m: &RotationMetrics| vec![name.to_string(), m.outliers.to_string(), format!("{:.6e}", m.quant_mse)];
        table(
            &["rotation", "outliers", "quant_mse"],
            &[
                row("identity", &report.identity),
                row("hadamard", &report.before),
                row("calibrated", &report.after),
            ],
        );
    }
    Ok(())
}

fn quantize_sim(a: QuantizeSim, pretty: bool) -> Result<(), Failure> {
    let x = read_activations(&a.acts)?.tokens;
    let quant = QuantConfig::new(a.bits)?;
    let tau = a.tau.unwrap_or_else(|| default_outlier_threshold(&x));
    if !(tau > 0.0) {
        return Err(validation(format!("tau must be > 0, got {tau}")));
    }
    let measure = |o: &Matrix| -> Result<RotationMetrics, Failure> {
        Ok(RotationMetrics {
            outliers: total_outliers(o, tau)?,
            quant_mse: fake_quantize(o, &quant)?.mse,
        })
    };
    let identity = measure(&x)?;
    kv("tau", tau);
    kv("bits", a.bits);
    print_metrics("identity", &identity);
    let mut rows = vec![("identity", identity)];
    if let Some(path) = &a.rotation {
        let (r, _) = read_tensor(path)?;
        if !r.is_square() || r.rows() != x.cols() {
            return Err(validation(format!(
                "rotation is {}x{} but activations have {} channels",
                r.rows(),
                r.cols(),
                x.cols()
            )));
        }
        let err = r.orthogonality_error();
        if err > 1e-6 {
            return Err(validation(format!("rotation is not orthogonal (‖RᵀR − I‖_F = {err:e})")));
        }
        let rotated = measure(&x.matmul(&r).map_err(Failure::from)?)?;
        print_metrics("rotated", &rotated);
        rows.push(("rotated", rotated));
    }
    if pretty {
        let rows: Vec<Vec<String>> = rows
            .iter()
            .map(|(n, m)| vec![n.to_string(), m.outliers.to_string(), format!("{:.6e}", m.quant_mse)])
            .collect();
        table(&["path", "outliers", "quant_mse"], &rows);
    }
    Ok(())
}

struct BenchRow {
    optimizer: OptimizerVariant,
    per_step: [u64; 4],
    seconds: f64,
}

fn bench_variant(variant: OptimizerVariant, n: usize, steps: usize, x: &Matrix) -> Result<BenchRow, Failure> {
    let kind = OptimizerKind::new(variant, 1e-3);
    let flops = FlopCounter::new();
    let init = random_hadamard(n, 0)?;
    let mut state = RotationState::for_optimizer(init, &kind, &FlopCounter::new())?;
    let start = Instant::now();
    for _ in 0..steps {
        let o = x.matmul(state.r()).map_err(Failure::from)?;
        let (_, g) = whip_loss_and_grad(&o);
        let grad = x.t_matmul(&g).map_err(Failure::from)?;
        optimizers::step(&mut state, &grad, &kind, &flops)?;
    }
    let seconds = start.elapsed().as_secs_f64();
    let per_step = FlopTag::ALL.map(|t| flops.get(t) / steps as u64);
    Ok(BenchRow { optimizer: variant, per_step, seconds })
}

fn bench(a: Bench, pretty: bool) -> Result<(), Failure> {
    if a.n < 32 {
        return Err(validation(format!("n must be ≥ 32, got {}", a.n)));
    }
    if !a.n.is_power_of_two() {
        return Err(validation(format!("n must be a power of two, got {}", a.n)));
    }
    if a.steps == 0 {
        return Err(validation("steps must be ≥ 1"));
    }
    let qr_variant: OptimizerVariant = a.optimizer.parse()?;
    if !qr_variant.is_qr() {
        return Err(validation(format!("--optimizer must be a QR-Orth variant, got {qr_variant}")));
    }
    let x = sample_laplace(&LaplaceModel::new(1.0)?, 64, a.n, 0)?.tokens;
    let rows = [
        bench_variant(qr_variant, a.n, a.steps, &x)?,
        bench_variant(OptimizerVariant::CayleySgd, a.n, a.steps, &x)?,
    ];
    kv("n", a.n);
    kv("steps", a.steps);
    for row in &rows {
        for (tag, count) in FlopTag::ALL.iter().zip(row.per_step) {
            kv(&format!("{}.{}", row.optimizer, tag.label()), count);
        }
        eprintln!("{}.wall_time_seconds={}", row.optimizer, row.seconds);
    }
    let qr = rows[0].per_step[FlopTag::Qr as usize];
    let cayley = rows[1].per_step[FlopTag::Cayley as usize];
    kv("analytic_qr", (4.0 / 3.0) * (a.n as f64).powi(3));
    kv("analytic_cayley_extra", 6.0 * (a.n as f64).powi(3));
    kv("ratio", cayley as f64 / qr as f64);
    if pretty {
        let mut header = vec!["optimizer"];
        header.extend(FlopTag::ALL.iter().map(|t| t.label()));
        // Wall time stays on stderr so stdout is reproducible.
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let mut v = vec![r.optimizer.to_string()];
                v.extend(r.per_step.iter().map(u64::to_string));
                v
            })
            .collect();
        table(&header, &body);
    }
    Ok(())
}

fn invariance_check(a: InvarianceCheck, pretty: bool) -> Result<(), Failure> {
    let cfg = SuiteConfig {
        seed: a.seed,
        hidden: a.hidden,
        heads: a.heads,
        seeds: a.seeds,
        fault: a.inject_nonorthogonal.then_some(Fault::NonOrthogonalR1),
    };
    let rep = invariance_suite_with(&cfg)?;
    kv("hidden", rep.hidden);
    kv("heads", rep.heads);
    kv("seeds", rep.seeds.len());
    kv("tolerance", rep.tolerance);
    kv("identity_exact", rep.identity_exact);
    kv("worst_rel_diff", rep.worst_rel_diff);
    kv("worst_check", &rep.worst_check);
    if cfg.fault.is_none() {
        for (fault, diff) in negative_controls(a.seed, a.hidden, a.heads, a.seeds)? {
            kv(&format!("control.{}", fault.name()), diff);
        }
    }
    kv("passed", rep.passed);
    if pretty {
        let names: Vec<String> = rep.seeds[0].checks.iter().map(|c| c.name.clone()).collect();
        let mut header = vec!["seed"];
        header.extend(names.iter().map(String::as_str));
        let body: Vec<Vec<String>> = rep
            .seeds
            .iter()
            .map(|s| {
                let mut v = vec![s.seed.to_string()];
                v.extend(s.checks.iter().map(|c| format!("{:.2e}", c.rel_diff)));
                v
            })
            .collect();
        table(&header, &body);
    }
    if !rep.passed {
        return Err(Failure {
            code: EXIT_INVARIANCE,
            message: format!(
                "invariance check failed: worst relative diff {:e} ({}) exceeds {:e}",
                rep.worst_rel_diff, rep.worst_check, rep.tolerance
            ),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_VALIDATION) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();

    let pretty = cli.pretty;
    let result = match cli.command {
        Command::GenActs(a) => gen_acts(a),
        Command::Calibrate(a) => run_calibrate(a, pretty),
        Command::QuantizeSim(a) => quantize_sim(a, pretty),
        Command::Bench(a) => bench(a, pretty),
        Command::InvarianceCheck(a) => invariance_check(a, pretty),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
