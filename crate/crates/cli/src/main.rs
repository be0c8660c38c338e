mod args;

use std::path::Path;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use serde::Serialize;

use flashopt::analysis::{self, QuantScheme, SweepDomain, SweepScheme};
use flashopt::checkpoint;
use flashopt::floatcodec::LowPrecisionFormat;
use flashopt::optimizers::{HyperParams, Mode, OptimizerKind, OptimizerState, VarianceScheme};
use flashopt::statequant::GroupSpec;
use flashopt::trainbench::{presets, DatasetKind, TrainConfig, Trainer};

use args::{Cli, CkptCommand, Command, CreateArgs, Preset, QuantBenchArgs, SweepArgs, TrainArgs};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<flashopt::Error> for CliError {
    fn from(e: flashopt::Error) -> Self {
        match e {
            flashopt::Error::InvalidConfig(_) | flashopt::Error::InvalidHyperParams(_) => {
                Self::Usage(e.to_string())
            }
            e => Self::Runtime(e.into()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Outcome of a command that ran to the end.
enum Outcome {
    Done,
    Diverged,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Sweep(a) => run_sweep(a),
        Command::QuantBench(a) => run_quant_bench(a),
        Command::Train(a) => run_train(a),
        Command::Ckpt(CkptCommand::Inspect { file, json }) => run_inspect(&file, json),
        Command::Ckpt(CkptCommand::Create(a)) => run_create(a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Diverged) => ExitCode::from(EXIT_DIVERGED),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn print_resolved(value: &impl Serialize) -> CliResult<()> {
    let json = serde_json::to_string(value).context("serializing resolved config")?;
    println!("config: {json}");
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn to_json(value: &impl Serialize) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).context("serializing output")?;
    s.push('\n');
    Ok(s)
}

#[derive(Serialize)]
struct ResolvedSweep<'a> {
    format: LowPrecisionFormat,
    scheme: SweepScheme,
    workers: usize,
    min_exponent_field: u32,
    max_exponent_field: u32,
    out: Option<&'a Path>,
    summary: Option<&'a Path>,
}

fn env_workers() -> CliResult<usize> {
    match std::env::var("FLASHOPT_WORKERS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("FLASHOPT_WORKERS={v:?} is not a count"))),
        Err(_) => Ok(0),
    }
}

fn run_sweep(flags: SweepArgs) -> CliResult<Outcome> {
    let a = match &flags.config {
        Some(p) => {
            let file = args::read_config(p)?;
            flags.merge(file)
        }
        None => flags,
    };
    let resolved = ResolvedSweep {
        format: a.format.unwrap_or(LowPrecisionFormat::Bf16),
        scheme: a.scheme.unwrap_or(SweepScheme::Ulp16),
        workers: match a.workers {
            Some(w) => w,
            None => env_workers()?,
        },
        min_exponent_field: a.min_exponent_field.unwrap_or(0),
        max_exponent_field: a.max_exponent_field.unwrap_or(254),
        out: a.out.as_deref(),
        summary: a.summary.as_deref(),
    };
    print_resolved(&resolved)?;
    let domain = SweepDomain {
        exponent_fields: resolved.min_exponent_field..=resolved.max_exponent_field,
    };
    let result = analysis::sweep(resolved.format, &[resolved.scheme], &domain, resolved.workers)?.remove(0);
    let s = &result.summary;
    println!(
        "{} {}: visited={} overflow={} exact_fraction={:.6} exact_fraction_normal={:.6} mean_rel_err={:.3e} max_rel_err={:.3e}",
        s.format.name(),
        s.scheme.name(),
        s.visited,
        s.overflow,
        s.exact_fraction,
        s.exact_fraction_normal,
        s.mean_rel_err,
        s.max_rel_err
    );
    if let Some(p) = resolved.out {
        write_file(p, result.to_csv())?;
    }
    if let Some(p) = resolved.summary {
        write_file(p, to_json(s)?)?;
    }
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct ResolvedQuantBench<'a> {
    trajectory: &'a Path,
    out: Option<&'a Path>,
    summary: Option<&'a Path>,
    group_size: usize,
    schemes: &'a [QuantScheme],
}

fn run_quant_bench(flags: QuantBenchArgs) -> CliResult<Outcome> {
    let a = match &flags.config {
        Some(p) => {
            let file = args::read_config(p)?;
            flags.merge(file)
        }
        None => flags,
    };
    let trajectory = a
        .trajectory
        .as_deref()
        .ok_or_else(|| CliError::Usage("--trajectory is required".into()))?;
    let schemes = a
        .schemes
        .clone()
        .unwrap_or_else(|| vec![QuantScheme::Companded, QuantScheme::Linear]);
    let resolved = ResolvedQuantBench {
        trajectory,
        out: a.out.as_deref(),
        summary: a.summary.as_deref(),
        group_size: a.group_size.unwrap_or(GroupSpec::default().group_size()),
        schemes: &schemes,
    };
    print_resolved(&resolved)?;
    let spec = GroupSpec::new(resolved.group_size)?;
    let traj = checkpoint::load_trajectory(trajectory)
        .with_context(|| format!("loading {}", trajectory.display()))?;
    let records = analysis::quant_error_bench(&traj, &schemes, spec)?;
    let summary = analysis::quantile_summary(&records);
    for q in &summary {
        println!(
            "{} {} {}: n={} p10={:.3e} p50={:.3e} p90={:.3e}",
            q.optimizer.name(),
            q.buffer.name(),
            q.scheme.name(),
            q.count,
            q.p10,
            q.p50,
            q.p90
        );
    }
    if let Some(p) = resolved.out {
        write_file(p, analysis::records_csv(&records))?;
    }
    if let Some(p) = resolved.summary {
        write_file(p, to_json(&summary)?)?;
    }
    Ok(Outcome::Done)
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let kind = a.optimizer.unwrap_or(OptimizerKind::AdamW);
    let mode = a.mode.unwrap_or(Mode::Flash);
    let seed = a.seed.unwrap_or(0);
    let data = a.dataset.unwrap_or(DatasetKind::TwoMoons);
    let mut c = match a.preset.unwrap_or(Preset::Parity) {
        Preset::Parity => presets::parity(kind, data, mode, seed),
        Preset::Divergence => {
            if a.optimizer.is_some_and(|k| k != OptimizerKind::AdamW) {
                return Err(CliError::Usage("the divergence preset is AdamW only".into()));
            }
            let mut c = presets::divergence_demo(a.variance_scheme.unwrap_or_default(), seed);
            c.mode = a.mode.unwrap_or(c.mode);
            if let Some(d) = a.dataset {
                c.dataset.kind = d;
            }
            c
        }
        Preset::QuantBench => {
            let mut c = presets::quant_bench(kind, seed);
            c.mode = a.mode.unwrap_or(c.mode);
            if let Some(d) = a.dataset {
                c.dataset.kind = d;
            }
            c
        }
    };
    if let Some(v) = a.steps {
        c.steps = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(lr) = a.lr {
        c.hyper = c.hyper.with_lr(lr);
    }
    if let Some(v) = a.variance_scheme {
        c.variance_scheme = v;
    }
    if let Some(v) = a.gradient_release {
        c.gradient_release = v;
    }
    if let Some(v) = a.accumulation {
        c.accumulation = v;
    }
    if let Some(v) = &a.hidden {
        c.hidden = v.clone();
    }
    if let Some(v) = a.activation {
        c.activation = v;
    }
    if let Some(v) = a.n_samples {
        c.dataset.n_samples = v;
    }
    if let Some(v) = a.n_features {
        c.dataset.n_features = v;
    }
    c.validate()?;
    Ok(c)
}

#[derive(Serialize)]
struct ResolvedTrain<'a> {
    #[serde(flatten)]
    config: &'a TrainConfig,
    report: Option<&'a Path>,
    losses: Option<&'a Path>,
    checkpoint: Option<&'a Path>,
    trajectory: Option<&'a Path>,
    snapshot_every: Option<u64>,
}

fn run_train(flags: TrainArgs) -> CliResult<Outcome> {
    let a = match &flags.config {
        Some(p) => {
            let file = args::read_config(p)?;
            flags.merge(file)
        }
        None => flags,
    };
    let config = train_config(&a)?;
    let snapshot_every = a.trajectory.as_ref().map(|_| a.snapshot_every.unwrap_or(10));
    print_resolved(&ResolvedTrain {
        config: &config,
        report: a.report.as_deref(),
        losses: a.losses.as_deref(),
        checkpoint: a.checkpoint.as_deref(),
        trajectory: a.trajectory.as_deref(),
        snapshot_every,
    })?;

    let mut trainer = Trainer::new(config)?;
    let (report, trajectory) = trainer.run(snapshot_every)?;

    let opt = |x: Option<f32>| x.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.6}"));
    match &report.status {
        flashopt::trainbench::RunStatus::Completed => println!(
            "completed: steps={} final_loss={} test_loss={} test_accuracy={} bytes_per_param={}",
            report.losses.len(),
            opt(report.final_loss),
            opt(report.test_loss),
            opt(report.test_accuracy),
            report.memory.total
        ),
        flashopt::trainbench::RunStatus::Diverged { step, reason } => {
            println!("diverged at step {step}: {reason}")
        }
    }

    if let Some(p) = &a.report {
        write_file(p, to_json(&report)?)?;
    }
    if let Some(p) = &a.losses {
        write_file(p, report.losses_csv())?;
    }
    if let Some(p) = &a.checkpoint {
        let names = trainer.spec().param_shapes();
        let named: Vec<(&str, &OptimizerState)> = names
            .iter()
            .map(|(n, _)| n.as_str())
            .zip(trainer.states())
            .collect();
        checkpoint::save_checkpoint(p, &named).with_context(|| format!("writing {}", p.display()))?;
    }
    if let (Some(p), Some(t)) = (&a.trajectory, &trajectory) {
        checkpoint::save_trajectory(p, t).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(if report.diverged() {
        Outcome::Diverged
    } else {
        Outcome::Done
    })
}

fn run_inspect(file: &Path, json: bool) -> CliResult<Outcome> {
    let bytes = std::fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    let info = checkpoint::inspect(&bytes).with_context(|| format!("inspecting {}", file.display()))?;
    if json {
        print!("{}", to_json(&info)?);
        return Ok(Outcome::Done);
    }
    let width = info.records.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    println!("{:<width$}  {:<5}  {:<16}  {:>12}", "name", "dtype", "shape", "bytes");
    for r in &info.records {
        let shape = format!("{:?}", r.dims);
        println!("{:<width$}  {:<5}  {:<16}  {:>12}", r.name, r.dtype.name(), shape, r.bytes);
    }
    println!("payload bytes: {}", info.payload_bytes);
    println!("metadata bytes: {}", info.metadata_bytes);
    println!("file bytes: {}", info.file_bytes);
    Ok(Outcome::Done)
}

fn run_create(a: CreateArgs) -> CliResult<Outcome> {
    print_resolved(&serde_json::json!({
        "optimizer": a.optimizer,
        "mode": a.mode,
        "params": a.params,
        "steps": a.steps,
        "out": a.out,
    }))?;
    let theta: Vec<f32> = (0..a.params).map(|i| (i as f32 * 0.7).sin() * 0.1).collect();
    let mut state = OptimizerState::new(&theta, a.optimizer, a.mode, VarianceScheme::Companded)?;
    let hp = HyperParams::default_for(a.optimizer);
    let mut grad = vec![0.0f32; a.params];
    for t in 0..a.steps {
        for (i, g) in grad.iter_mut().enumerate() {
            *g = (i as f32 * 1.3 + t as f32).cos() * 1e-3;
        }
        state.step(&grad, &hp)?;
    }
    let bytes = checkpoint::save_checkpoint(&a.out, &[("state", &state)])
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {bytes} bytes to {}", a.out.display());
    Ok(Outcome::Done)
}
