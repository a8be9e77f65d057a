//! Run configuration: defaults, then a `key=value` file, then flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use lodprune::allocation::{Allocation, MeanWeighting, PruningConfig, DEFAULT_LAMBDA, SPARSITY_GRID};
use lodprune::calibration::{Regime, DEFAULT_SAMPLES};
use lodprune::eval::DEFAULT_SEEDS;
use lodprune::outlier::DEFAULT_THRESHOLD;
use lodprune::prune::{ComparisonGroup, ImportanceMetric};
use lodprune::Error;

pub const OUT_ENV: &str = "LODPRUNE_OUT";
const DEFAULT_OUT: &str = "lodprune-out";

/// Flags shared by every command. Unset flags fall back to the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Model archive; the bundled fixture when omitted.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Output directory (default: $LODPRUNE_OUT, then ./lodprune-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Target global sparsity S.
    #[arg(long, global = true)]
    pub sparsity: Option<f64>,
    /// Sparsity levels for the sweep, comma separated.
    #[arg(long, global = true)]
    pub sparsities: Option<String>,
    /// Clamp half-width around S.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Outlier threshold multiplier M.
    #[arg(long = "m-threshold", global = true)]
    pub m_threshold: Option<f64>,
    /// Importance metric: magnitude or wanda.
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// uniform, owled_lm_only, owled_separate or owled_global.
    #[arg(long, global = true)]
    pub allocation: Option<String>,
    /// per_row or per_layer.
    #[arg(long, global = true)]
    pub group: Option<String>,
    /// Calibration data: scenario or generic.
    #[arg(long, global = true)]
    pub regime: Option<String>,
    /// Calibration sample count.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// LODC calibration file to use instead of a generator.
    #[arg(long, global = true)]
    pub calibration: Option<PathBuf>,
    /// Calibration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment seeds: a count (`20`), a range (`5..10`) or a list (`1,4,9`).
    #[arg(long, global = true)]
    pub seeds: Option<String>,
    /// `key=value` configuration file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub pruning: PruningConfig,
    pub sparsity_given: bool,
    pub sparsities: Vec<f64>,
    pub regime: Regime,
    pub samples: usize,
    pub calibration: Option<PathBuf>,
    pub seeds: Vec<u64>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, Error> {
    value.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

pub fn parse_seeds(value: &str) -> Result<Vec<u64>, Error> {
    let v = value.trim();
    let seeds = if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (parse("seeds", a)?, parse("seeds", b)?);
        (a..b).collect()
    } else if v.contains(',') {
        parse_list("seeds", v)?
    } else {
        (0..parse::<u64>("seeds", v)?).collect()
    };
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    Ok(seeds)
}

/// Reads `key=value` lines; `#` starts a comment.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, Error> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        map.insert(k.trim().replace('_', "-"), v.trim().to_owned());
    }
    Ok(map)
}

const KNOWN_KEYS: [&str; 15] = [
    "model", "out", "sparsity", "sparsities", "lambda", "m-threshold", "method", "allocation", "group", "regime",
    "samples", "calibration", "seed", "seeds", "weighting",
];

impl RunConfig {
    pub fn resolve(flags: &Flags) -> Result<RunConfig, Error> {
        let file = match &flags.config {
            Some(p) => read_config_file(p)?,
            None => BTreeMap::new(),
        };
        if let Some(k) = file.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
        let get = |key: &str, flag: Option<String>| flag.or_else(|| file.get(key).cloned());

        let sparsity_raw = get("sparsity", flags.sparsity.map(|v| v.to_string()));
        let sparsity = match &sparsity_raw {
            Some(v) => parse("sparsity", v)?,
            None => 0.5,
        };
        let pruning = PruningConfig {
            sparsity,
            lambda: match get("lambda", flags.lambda.map(|v| v.to_string())) {
                Some(v) => parse("lambda", &v)?,
                None => DEFAULT_LAMBDA,
            },
            threshold: match get("m-threshold", flags.m_threshold.map(|v| v.to_string())) {
                Some(v) => parse("m-threshold", &v)?,
                None => DEFAULT_THRESHOLD,
            },
            metric: match get("method", flags.method.clone()) {
                Some(v) => v.parse::<ImportanceMetric>()?,
                None => ImportanceMetric::Wanda,
            },
            group: match get("group", flags.group.clone()) {
                Some(v) => v.parse::<ComparisonGroup>()?,
                None => ComparisonGroup::PerRow,
            },
            allocation: match get("allocation", flags.allocation.clone()) {
                Some(v) => v.parse::<Allocation>()?,
                None => Allocation::Uniform,
            },
            weighting: match file.get("weighting") {
                Some(v) => v.parse::<MeanWeighting>()?,
                None => MeanWeighting::Parameters,
            },
            seed: match get("seed", flags.seed.map(|v| v.to_string())) {
                Some(v) => parse("seed", &v)?,
                None => 0,
            },
        };
        pruning.validate()?;

        let sparsities = match get("sparsities", flags.sparsities.clone()) {
            Some(v) => parse_list("sparsities", &v)?,
            None => SPARSITY_GRID.to_vec(),
        };
        if let Some(s) = sparsities.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Config(format!("sparsity level {s} outside [0, 1]")));
        }
        let samples = match get("samples", flags.samples.map(|v| v.to_string())) {
            Some(v) => parse("samples", &v)?,
            None => DEFAULT_SAMPLES,
        };
        if samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        let seeds = match get("seeds", flags.seeds.clone()) {
            Some(v) => parse_seeds(&v)?,
            None => (0..DEFAULT_SEEDS as u64).collect(),
        };
        let out = get("out", flags.out.as_ref().map(|p| p.display().to_string()))
            .or_else(|| std::env::var(OUT_ENV).ok())
            .unwrap_or_else(|| DEFAULT_OUT.into());

        Ok(RunConfig {
            model: get("model", flags.model.as_ref().map(|p| p.display().to_string())).map(PathBuf::from),
            out: PathBuf::from(out),
            pruning,
            sparsity_given: sparsity_raw.is_some(),
            sparsities,
            regime: match get("regime", flags.regime.clone()) {
                Some(v) => v.parse::<Regime>()?,
                None => Regime::Scenario,
            },
            samples,
            calibration: get("calibration", flags.calibration.as_ref().map(|p| p.display().to_string())).map(PathBuf::from),
            seeds,
        })
    }
}
