use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use riccati_observers::config::parse_config_with_overrides;
use riccati_observers::ltv::{static_range_solvability, PeWindow};
use riccati_observers::observers::ObserverKind;
use riccati_observers::report::{self, fmt_num};
use riccati_observers::sim::{excitation_sweep, run_scenario, ScenarioConfig};
use riccati_observers::Error;

#[derive(Parser)]
#[command(name = "riccati-obs", version, about = "Riccati observer simulations and excitation diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate truth and observer, writing CSV series and summary.txt.
    Run(RunArgs),
    /// Sweep the excitation conditions of the configured observer over sliding windows.
    SweepPe(SweepArgs),
    /// Decide whether a motionless body is degenerate for biased range measurements.
    CheckStatic(StaticArgs),
    /// Report steps per second for every observer.
    Bench(BenchArgs),
}

#[derive(Args)]
struct Common {
    /// `key=value` override applied after the file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (repeatable; each runs independently).
    #[arg(long, value_name = "PATH", required = true)]
    config: Vec<PathBuf>,
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Noise seed (repeatable; overrides the file).
    #[arg(long, value_name = "N")]
    seed: Vec<u64>,
    /// Worker threads for independent runs.
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Window length δ in seconds.
    #[arg(long, default_value_t = 2.0 * std::f64::consts::PI)]
    window: f64,
    /// Quadrature step inside each window.
    #[arg(long, default_value_t = 1e-2)]
    dt: f64,
    /// Level μ (or ν) a condition must exceed.
    #[arg(long, default_value_t = 1e-6)]
    threshold: f64,
    /// Also report the worst λmin of the Riccati Grammian (slow).
    #[arg(long)]
    gramian: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct StaticArgs {
    /// Scenario file holding the sources; the body sits at the trajectory's t = 0 position.
    #[arg(long, value_name = "PATH", alias = "config")]
    sources: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BenchArgs {
    /// Simulated seconds per observer.
    #[arg(long, default_value_t = 2.0)]
    horizon: f64,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Numeric(String),
}

impl Failure {
    fn describe(&self) -> String {
        match self {
            Failure::Config(m) => format!("config error: {m}"),
            Failure::Numeric(m) => format!("numeric failure: {m}"),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn with_context(self, dir: &Path) -> Self {
        match self {
            Failure::Numeric(m) => Failure::Numeric(format!("{}: {m}", dir.display())),
            Failure::Config(m) => Failure::Config(format!("{}: {m}", dir.display())),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Numeric(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn load(path: &Path, overrides: &[String]) -> CliResult<ScenarioConfig> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    parse_config_with_overrides(&text, overrides).map_err(|e| match e {
        e if e.is_config() => Failure::Config(format!("{}: {e}", path.display())),
        e => e.into(),
    })
}

fn output_error(dir: &Path, e: std::io::Error) -> Failure {
    Failure::Config(format!("cannot write {}: {e}", dir.display()))
}

struct Job {
    cfg: ScenarioConfig,
    dir: PathBuf,
}

fn run(args: RunArgs) -> CliResult<()> {
    let mut jobs = Vec::new();
    let many_configs = args.config.len() > 1;
    for path in &args.config {
        let base = load(path, &args.common.set)?;
        let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        let dir = if many_configs { args.out.join(&stem) } else { args.out.clone() };
        if args.seed.len() <= 1 {
            let mut cfg = base;
            if let Some(&s) = args.seed.first() {
                cfg.seed = s;
            }
            jobs.push(Job { cfg, dir });
        } else {
            for &s in &args.seed {
                let mut cfg = base.clone();
                cfg.seed = s;
                jobs.push(Job { cfg, dir: dir.join(format!("seed-{s}")) });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| Failure::Config(format!("--jobs: {e}")))?;
    let results: Vec<CliResult<String>> = pool.install(|| jobs.par_iter().map(run_one).collect());
    let mut first_failure = None;
    for r in results {
        match r {
            Ok(line) => println!("{line}"),
            Err(f) if first_failure.is_none() => first_failure = Some(f),
            Err(f) => eprintln!("{}", f.describe()),
        }
    }
    first_failure.map_or(Ok(()), Err)
}

fn run_one(job: &Job) -> CliResult<String> {
    let cfg = &job.cfg;
    match run_scenario(cfg) {
        Ok(log) => {
            report::write_run(&job.dir, cfg, &log, None).map_err(|e| output_error(&job.dir, e))?;
            let s = log.summary();
            Ok(format!(
                "{}: {} seed {} |x̃(T)| = {:.3e} m, |ã(T)| = {:.3e} m/s, ln V slope = {:.4}",
                job.dir.display(),
                cfg.kind,
                cfg.seed,
                s.final_position_error,
                s.final_bias_error,
                s.log_lyap_slope
            ))
        }
        Err(failure) => {
            let msg = failure.error.to_string();
            if !failure.partial.records.is_empty() {
                report::write_run(&job.dir, cfg, &failure.partial, Some(&msg)).map_err(|e| output_error(&job.dir, e))?;
            }
            Err(Failure::from(failure.error).with_context(&job.dir))
        }
    }
}

fn sweep(args: SweepArgs) -> CliResult<()> {
    let cfg = load(&args.config, &args.common.set)?;
    let window = PeWindow::new(args.window, args.dt)?;
    let rep = excitation_sweep(&cfg, window, args.threshold, args.gramian)?;
    fs::create_dir_all(&args.out).map_err(|e| output_error(&args.out, e))?;
    let path = args.out.join("pe_report.csv");
    let mut buf = Vec::new();
    report::write_sweep(&mut buf, &rep).map_err(|e| output_error(&path, e))?;
    fs::write(&path, &buf).map_err(|e| output_error(&path, e))?;

    let mut t = String::new();
    let _ = writeln!(t, "{} over windows of {} s (threshold {:e})", rep.variant, window.delta, args.threshold);
    let _ = writeln!(t, "{:<22} {:>14} {:>10} {:>10}", "condition", "worst", "at [s]", "satisfied");
    for c in &rep.conditions {
        let _ = writeln!(t, "{:<22} {:>14.6e} {:>10.3} {:>10}", c.kind.name(), c.worst, c.worst_at, c.satisfied);
    }
    if let Some(g) = rep.gramian_floor {
        let _ = writeln!(t, "{:<22} {:>14.6e}", "riccati_gramian_WQ", g);
    }
    let _ = writeln!(t, "stability guaranteed: {}", rep.guaranteed);
    print!("{t}");
    Ok(())
}

fn format_w(w: &[f64]) -> String {
    if w.iter().all(|v| v.abs() < 1e-9) {
        "0".into()
    } else {
        format!("({})", w.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(", "))
    }
}

fn check_static(args: StaticArgs) -> CliResult<()> {
    let cfg = load(&args.sources, &args.common.set)?;
    let body = cfg.trajectory.position(0.0);
    let s = static_range_solvability(&cfg.sources, &body)?;
    if s.has_solution_w {
        println!("DEGENERATE: w exists (w={})", format_w(s.w.as_slice()));
    } else {
        println!("NON-DEGENERATE: no w solves the constraints (relative residual {:.3e})", s.relative_residual);
    }
    Ok(())
}

/// Scenario each observer is benchmarked on.
fn bench_config(kind: ObserverKind, horizon: f64) -> Result<ScenarioConfig, Error> {
    let scenario = match kind {
        ObserverKind::DirBiasedMulti | ObserverKind::RangeMultiUnbiased | ObserverKind::RangeMeasBias => 3,
        ObserverKind::RangeMultiBiased => 2,
        _ => 1,
    };
    let mut cfg = ScenarioConfig::preset(scenario, kind)?;
    cfg.horizon = horizon;
    Ok(cfg)
}

fn bench(args: BenchArgs) -> CliResult<()> {
    if !(args.horizon > 0.0) {
        return Err(Failure::Config(format!("--horizon must be positive, got {}", args.horizon)));
    }
    let mut csv = String::from("variant,steps,seconds,steps_per_second\n");
    println!("{:<22} {:>8} {:>10} {:>14}", "variant", "steps", "seconds", "steps/s");
    for kind in ObserverKind::ALL {
        let cfg = bench_config(kind, args.horizon)?;
        let start = Instant::now();
        let log = run_scenario(&cfg).map_err(|f| Failure::from(f.error))?;
        let secs = start.elapsed().as_secs_f64();
        let steps = log.records.len() - 1;
        let rate = steps as f64 / secs;
        println!("{:<22} {steps:>8} {secs:>10.3} {rate:>14.0}", kind.name());
        let _ = writeln!(csv, "{},{steps},{},{}", kind.name(), fmt_num(secs), fmt_num(rate));
    }
    if let Some(dir) = args.out {
        fs::create_dir_all(&dir).map_err(|e| output_error(&dir, e))?;
        fs::write(dir.join("bench.csv"), csv).map_err(|e| output_error(&dir, e))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::SweepPe(a) => sweep(a),
        Command::CheckStatic(a) => check_static(a),
        Command::Bench(a) => bench(a),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.describe());
            ExitCode::from(f.exit_code())
        }
    }
}
