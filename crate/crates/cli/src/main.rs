//! `duo`: validate logit bundles, fit temperatures, evaluate and sweep Duos,
//! and simulate classifier pairs.
//!
//! Exit codes: 0 success, 1 input error, 2 internal invariant violation.

mod report;
mod sweep;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use duo_core::{
    describe, evaluate, fit_duo_temperatures, fit_single_temperature, generate, load_bundle,
    save_bundle, AggregationMode, BundlePair, DuoWeights, EvalInput, EvalOptions, LogitBundle,
    SimSpec, TuneResult, UncertaintyMeasure,
};
use serde_json::Value;

use crate::report::Format;
use crate::sweep::{ModeName, SweepConfig};

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Internal(String),
}

impl From<duo_core::Error> for CliError {
    fn from(e: duo_core::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "duo", version, about = "Asymmetric Duo toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a bundle directory and print its metadata.
    Validate { path: PathBuf },
    /// Fit Duo weights on val bundles, or a single temperature without --small-val.
    Tune {
        #[arg(long)]
        large_val: PathBuf,
        #[arg(long)]
        small_val: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate one mode and emit a metric row.
    Eval {
        #[arg(long)]
        large: PathBuf,
        #[arg(long)]
        small: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: ModeName,
        /// Output of `tune`; required by weighted and uq_only.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Logit scale for mode single; overrides a scale found in --weights.
        #[arg(long)]
        scale: Option<f64>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Tune every sidekick on val and evaluate on test, sorted by FLOPs balance.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Write simulated large/small val/test bundles under --out.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, value_enum)]
    measure: Option<MeasureArg>,
    /// Selective-accuracy target; repeatable. Defaults to 0.98.
    #[arg(long = "sac")]
    sac: Vec<f64>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MeasureArg {
    Softmax,
    Entropy,
}

impl From<MeasureArg> for UncertaintyMeasure {
    fn from(m: MeasureArg) -> Self {
        match m {
            MeasureArg::Softmax => UncertaintyMeasure::SoftmaxResponse,
            MeasureArg::Entropy => UncertaintyMeasure::Entropy,
        }
    }
}

fn eval_options(targets: Vec<f64>) -> Result<EvalOptions, CliError> {
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(CliError::Input(format!("sac target {t} outside [0, 1]")));
    }
    let mut opts = EvalOptions::default();
    if !targets.is_empty() {
        opts.sac_targets = targets;
    }
    Ok(opts)
}

fn open_out(out: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    let mut w = open_out(out)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| io_err(out.unwrap_or(Path::new("<stdout>")), e))
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> Result<LogitBundle, CliError> {
    load_bundle(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_pair(large: &Path, small: &Path) -> Result<BundlePair, CliError> {
    Ok(BundlePair::new(load(large)?, load(small)?)?)
}

fn cmd_validate(path: &Path) -> Result<(), CliError> {
    let b = load(path)?;
    let m = b.meta();
    println!("ok {}", path.display());
    println!("  model_name  {}", m.model_name);
    println!("  dataset     {}", m.dataset);
    println!("  split       {}", m.split);
    println!("  num_samples {}", m.num_samples);
    println!("  num_classes {}", m.num_classes);
    println!("  flops       {}", m.flops);
    println!("  params      {}", m.params);
    Ok(())
}

fn cmd_tune(
    large_val: &Path,
    small_val: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    match small_val {
        Some(small) => {
            let pair = load_pair(large_val, small)?;
            write_json(&fit_duo_temperatures(&pair)?, out)
        }
        None => write_json(&fit_single_temperature(&load(large_val)?)?, out),
    }
}

fn tuned_weights(weights: Option<&Path>, mode: ModeName) -> Result<DuoWeights, CliError> {
    let path = weights.ok_or_else(|| {
        CliError::Input(format!(
            "missing weights: mode {} needs --weights from `duo tune`",
            mode.tag()
        ))
    })?;
    let tuned: TuneResult = serde_json::from_value(read_json(path)?)
        .map_err(|e| CliError::Input(format!("{}: not a tune result: {e}", path.display())))?;
    tuned
        .weights
        .validate()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(tuned.weights)
}

fn cmd_eval(
    large: &Path,
    small: Option<&Path>,
    mode: ModeName,
    weights: Option<&Path>,
    scale: Option<f64>,
    report: ReportArgs,
) -> Result<(), CliError> {
    let measure = report
        .measure
        .map_or(UncertaintyMeasure::default(), Into::into);
    let opts = eval_options(report.sac)?;
    let row = if mode == ModeName::Single {
        let scale = match (scale, weights) {
            (Some(s), _) => s,
            (None, Some(p)) => read_json(p)?
                .get("scale")
                .and_then(Value::as_f64)
                .ok_or_else(|| CliError::Input(format!("{}: no \"scale\" field", p.display())))?,
            (None, None) => 1.0,
        };
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(CliError::Input(format!(
                "scale must be finite and non-negative, got {scale}"
            )));
        }
        evaluate(
            EvalInput::Single(&load(large)?),
            AggregationMode::SingleScaled(scale),
            measure,
            &opts,
        )?
    } else {
        let small =
            small.ok_or_else(|| CliError::Input(format!("mode {} needs --small", mode.tag())))?;
        let agg = match mode {
            ModeName::Weighted => AggregationMode::WeightedDuo(tuned_weights(weights, mode)?),
            ModeName::UqOnly => AggregationMode::UqOnlyDuo(tuned_weights(weights, mode)?),
            _ => AggregationMode::UnweightedDuo,
        };
        let pair = load_pair(large, small)?;
        evaluate(EvalInput::Pair(&pair), agg, measure, &opts)?
    };
    let out = report.out.as_deref();
    report::write_rows(
        open_out(out)?,
        &[row],
        &opts.sac_targets,
        report.format.unwrap_or_default(),
    )
    .map_err(|e| io_err(out.unwrap_or(Path::new("<stdout>")), e))
}

fn cmd_sweep(config: &Path, jobs: usize, report: ReportArgs) -> Result<(), CliError> {
    if jobs == 0 {
        return Err(CliError::Input("--jobs must be at least 1".into()));
    }
    let cfg = SweepConfig::load(config)?;
    let measure = match (report.measure, cfg.measure.as_deref()) {
        (Some(m), _) => m.into(),
        (None, Some(s)) => s
            .parse()
            .map_err(|e: String| CliError::Input(format!("{}: {e}", config.display())))?,
        (None, None) => UncertaintyMeasure::default(),
    };
    let targets = if report.sac.is_empty() {
        cfg.sac_targets.clone().unwrap_or_default()
    } else {
        report.sac
    };
    let opts = eval_options(targets)?;
    let format = report.format.or(cfg.format).unwrap_or_default();
    let out = report.out.or_else(|| cfg.out.clone());

    let rows = sweep::run(&cfg, measure, &opts, jobs)?;
    report::write_rows(open_out(out.as_deref())?, &rows, &opts.sac_targets, format)
        .map_err(|e| io_err(out.as_deref().unwrap_or(Path::new("<stdout>")), e))
}

fn cmd_simulate(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let spec: SimSpec = serde_json::from_value(read_json(spec_path)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", spec_path.display())))?;
    let summary = describe(&spec)?;
    let sim = generate(&spec)?;
    for (name, bundle) in [
        ("large_val", sim.val.large()),
        ("large_test", sim.test.large()),
        ("small_val", sim.val.small()),
        ("small_test", sim.test.small()),
    ] {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        save_bundle(bundle, &dir)?;
    }
    println!("{summary}");
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { path } => cmd_validate(&path),
        Command::Tune {
            large_val,
            small_val,
            out,
        } => cmd_tune(&large_val, small_val.as_deref(), out.as_deref()),
        Command::Eval {
            large,
            small,
            mode,
            weights,
            scale,
            report,
        } => cmd_eval(
            &large,
            small.as_deref(),
            mode,
            weights.as_deref(),
            scale,
            report,
        ),
        Command::Sweep {
            config,
            jobs,
            report,
        } => cmd_sweep(&config, jobs, report),
        Command::Simulate { spec, out } => cmd_simulate(&spec, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(CliError::Input(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Ok(Err(CliError::Internal(msg))) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
        Err(_) => ExitCode::from(2),
    }
}
