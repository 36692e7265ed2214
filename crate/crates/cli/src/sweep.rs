//! Balance sweep: one temperature-scaled large-model row plus one row per
//! (sidekick, mode), each sidekick tuned on its val split and scored on test.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use duo_core::{
    evaluate, fit_duo_temperatures, fit_single_temperature, load_bundle, AggregationMode,
    BundlePair, EvalInput, EvalOptions, LogitBundle, MetricRow, Split, UncertaintyMeasure,
};
use rayon::prelude::*;
use serde::Deserialize;

use crate::report::Format;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Weighted,
    Unweighted,
    #[value(name = "uq_only")]
    UqOnly,
    Single,
}

impl ModeName {
    pub fn tag(self) -> &'static str {
        match self {
            ModeName::Weighted => "weighted",
            ModeName::Unweighted => "unweighted",
            ModeName::UqOnly => "uq_only",
            ModeName::Single => "single",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPaths {
    pub val: PathBuf,
    pub test: PathBuf,
}

/// Sweep definition. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub large: SplitPaths,
    #[serde(default)]
    pub sidekicks: Vec<SplitPaths>,
    #[serde(default = "default_modes")]
    pub modes: Vec<ModeName>,
    pub measure: Option<String>,
    pub sac_targets: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
}

fn default_modes() -> Vec<ModeName> {
    vec![ModeName::Weighted, ModeName::Unweighted, ModeName::UqOnly]
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let mut cfg: SweepConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in std::iter::once(&mut cfg.large).chain(cfg.sidekicks.iter_mut()) {
            p.val = base.join(&p.val);
            p.test = base.join(&p.test);
        }
        if let Some(out) = cfg.out.as_mut() {
            *out = base.join(&*out);
        }
        if cfg.modes.contains(&ModeName::Single) {
            return Err(CliError::Input(
                "modes: the single-model row is always emitted; list only duo modes".into(),
            ));
        }
        Ok(cfg)
    }
}

fn load(path: &Path, split: Split) -> Result<LogitBundle, CliError> {
    let bundle =
        load_bundle(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    bundle
        .require_split(split)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(bundle)
}

fn pair(large: &LogitBundle, small: LogitBundle, path: &Path) -> Result<BundlePair, CliError> {
    BundlePair::new(large.clone(), small)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn sidekick_rows(
    large_val: &LogitBundle,
    large_test: &LogitBundle,
    paths: &SplitPaths,
    modes: &[ModeName],
    measure: UncertaintyMeasure,
    opts: &EvalOptions,
) -> Result<Vec<MetricRow>, CliError> {
    let val = pair(large_val, load(&paths.val, Split::Val)?, &paths.val)?;
    let test = pair(large_test, load(&paths.test, Split::Test)?, &paths.test)?;
    let context = |e: duo_core::Error| CliError::Input(format!("{}: {e}", paths.val.display()));
    let weights = if modes
        .iter()
        .any(|m| matches!(m, ModeName::Weighted | ModeName::UqOnly))
    {
        Some(fit_duo_temperatures(&val).map_err(context)?.weights)
    } else {
        None
    };
    modes
        .iter()
        .map(|m| {
            let mode = match (m, weights) {
                (ModeName::Weighted, Some(w)) => AggregationMode::WeightedDuo(w),
                (ModeName::UqOnly, Some(w)) => AggregationMode::UqOnlyDuo(w),
                (ModeName::Unweighted, _) => AggregationMode::UnweightedDuo,
                _ => return Err(CliError::Internal(format!("no mode for {}", m.tag()))),
            };
            evaluate(EvalInput::Pair(&test), mode, measure, opts)
                .map_err(|e| CliError::Input(format!("{}: {e}", paths.test.display())))
        })
        .collect()
}

/// Runs the sweep on up to `jobs` threads; rows come back sorted by balance.
pub fn run(
    cfg: &SweepConfig,
    measure: UncertaintyMeasure,
    opts: &EvalOptions,
    jobs: usize,
) -> Result<Vec<MetricRow>, CliError> {
    let large_val = load(&cfg.large.val, Split::Val)?;
    let large_test = load(&cfg.large.test, Split::Test)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let (single, per_sidekick) = pool.install(|| {
        rayon::join(
            || -> Result<MetricRow, CliError> {
                let fit = fit_single_temperature(&large_val)
                    .map_err(|e| CliError::Input(format!("{}: {e}", cfg.large.val.display())))?;
                evaluate(
                    EvalInput::Single(&large_test),
                    AggregationMode::SingleScaled(fit.scale),
                    measure,
                    opts,
                )
                .map_err(|e| CliError::Input(format!("{}: {e}", cfg.large.test.display())))
            },
            || {
                cfg.sidekicks
                    .par_iter()
                    .map(|p| sidekick_rows(&large_val, &large_test, p, &cfg.modes, measure, opts))
                    .collect::<Vec<_>>()
            },
        )
    });

    let mut rows = vec![single?];
    for r in per_sidekick {
        rows.extend(r?);
    }
    let expected = 1 + cfg.sidekicks.len() * cfg.modes.len();
    if rows.len() != expected {
        return Err(CliError::Internal(format!(
            "sweep produced {} rows, expected {expected}",
            rows.len()
        )));
    }
    // stable: equal balances keep config order
    rows.sort_by(|a, b| a.balance.total_cmp(&b.balance));
    Ok(rows)
}
