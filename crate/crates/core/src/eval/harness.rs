//! Seeded experiment grids: method x sparsity sweeps, allocation-scope
//! ablation at equal budget, and calibration sample-count ablation.
//!
//! Every cell runs calibrate -> LOD -> allocate -> prune -> score on its own.
//! Cells execute in parallel and are merged back in grid order, so results
//! depend only on the grid, the seeds and the dense model.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use super::task::{score, Metrics, ToyTask};
use crate::allocation::{
    allocate_scoped, allocate_uniform, layer_sizes, match_budget, Allocation, PruningConfig, SparsityPlan,
    DEFAULT_LAMBDA, SPARSITY_GRID,
};
use crate::calibration::{collect_norms, CalibrationSet, Regime, ABLATION_SAMPLE_COUNTS, DEFAULT_SAMPLES};
use crate::error::{Error, Result};
use crate::graph::{ComponentTag, ModelGraph};
use crate::outlier::DEFAULT_THRESHOLD;
use crate::prune::{prune_model, ComparisonGroup, ImportanceMetric};

pub const DEFAULT_SEEDS: usize = 20;
pub const SCOPE_SPARSITIES: [f64; 2] = [0.3, 0.4];
pub const CALIBRATION_SPARSITY: f64 = 0.4;

/// Pruning recipes compared by the sweep. All of them prune the LM only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Dense,
    /// Uniform sparsity, `|W|` importance.
    Magnitude,
    /// Uniform sparsity, `|W| * ||X||` importance.
    Wanda,
    /// Outlier-weighed sparsity with the LOD measured on generic data.
    Owl,
    /// Outlier-weighed sparsity with the LOD measured on scenario data.
    Owled,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Dense, Method::Magnitude, Method::Wanda, Method::Owl, Method::Owled];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dense => "DENSE",
            Method::Magnitude => "MAGNITUDE",
            Method::Wanda => "WANDA",
            Method::Owl => "OWL",
            Method::Owled => "OWLED",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.to_ascii_uppercase();
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == up)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

/// Full configuration of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellConfig {
    pub method: Method,
    pub allocation: Allocation,
    pub sparsity: f64,
    pub regime: Regime,
    pub samples: usize,
    pub seed: u64,
    pub lambda: f64,
    pub threshold: f64,
    pub group: ComparisonGroup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub config: CellConfig,
    pub pruned: usize,
    pub encoder_sparsity: f64,
    pub lm_sparsity: f64,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

/// Mean, standard deviation and 95% normal-approximation half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len() as f64;
        if values.is_empty() {
            return Summary {
                mean: f64::NAN,
                std: f64::NAN,
                ci95: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let std = var.sqrt();
        Summary {
            mean,
            std,
            ci95: 1.96 * std / n.sqrt(),
        }
    }
}

/// One row per configuration with the seed dimension folded away.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: Method,
    pub allocation: Allocation,
    pub sparsity: f64,
    pub regime: Regime,
    pub samples: usize,
    pub seeds: usize,
    pub failed: usize,
    pub pruned_mean: f64,
    /// Indexed like [`Metrics::NAMES`].
    pub metrics: [Summary; 5],
}

impl AggregateRow {
    pub fn mse(&self) -> Summary {
        self.metrics[4]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub name: String,
    pub cells: Vec<CellResult>,
    /// Extra summary lines (budget checks and the like).
    pub notes: Vec<String>,
}

impl ExperimentResult {
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut rows: Vec<(CellConfig, Vec<&CellResult>)> = Vec::new();
        for cell in &self.cells {
            let key = CellConfig {
                seed: 0,
                ..cell.config.clone()
            };
            match rows.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(cell),
                None => rows.push((key, vec![cell])),
            }
        }
        rows.into_iter()
            .map(|(key, cells)| {
                let ok: Vec<&Metrics> = cells.iter().filter_map(|c| c.metrics.as_ref()).collect();
                let metrics = std::array::from_fn(|k| Summary::of(&ok.iter().map(|m| m.values()[k]).collect::<Vec<_>>()));
                AggregateRow {
                    method: key.method,
                    allocation: key.allocation,
                    sparsity: key.sparsity,
                    regime: key.regime,
                    samples: key.samples,
                    seeds: cells.len(),
                    failed: cells.len() - ok.len(),
                    pruned_mean: cells.iter().map(|c| c.pruned as f64).sum::<f64>() / cells.len() as f64,
                    metrics,
                }
            })
            .collect()
    }

    /// Aggregate row for a method and allocation at one sparsity.
    pub fn row(&self, method: Method, allocation: Allocation, sparsity: f64) -> Option<AggregateRow> {
        self.aggregate()
            .into_iter()
            .find(|r| r.method == method && r.allocation == allocation && r.sparsity == sparsity)
    }

    /// Per-cell table, one row per (config, seed).
    pub fn cells_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "method", "allocation", "sparsity", "regime", "samples", "seed", "lambda", "threshold", "group",
            "pruned", "encoder_sparsity", "lm_sparsity",
        ];
        header.extend(Metrics::NAMES);
        header.push("error");
        w.write_record(&header)?;
        for c in &self.cells {
            let k = &c.config;
            let mut rec = vec![
                k.method.to_string(),
                k.allocation.to_string(),
                k.sparsity.to_string(),
                k.regime.to_string(),
                k.samples.to_string(),
                k.seed.to_string(),
                k.lambda.to_string(),
                k.threshold.to_string(),
                k.group.to_string(),
                c.pruned.to_string(),
                c.encoder_sparsity.to_string(),
                c.lm_sparsity.to_string(),
            ];
            match &c.metrics {
                Some(m) => rec.extend(m.values().iter().map(f64::to_string)),
                None => rec.extend(std::iter::repeat_n(String::new(), 5)),
            }
            rec.push(c.error.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }

    /// Aggregated table, one row per configuration.
    pub fn table_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["method", "allocation", "sparsity", "regime", "samples", "seeds", "failed", "pruned_mean"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for name in Metrics::NAMES {
            header.push(format!("{name}_mean"));
            header.push(format!("{name}_std"));
            header.push(format!("{name}_ci95"));
        }
        w.write_record(&header)?;
        for r in self.aggregate() {
            let mut rec = vec![
                r.method.to_string(),
                r.allocation.to_string(),
                r.sparsity.to_string(),
                r.regime.to_string(),
                r.samples.to_string(),
                r.seeds.to_string(),
                r.failed.to_string(),
                r.pruned_mean.to_string(),
            ];
            for s in r.metrics {
                rec.extend([s.mean.to_string(), s.std.to_string(), s.ci95.to_string()]);
            }
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }

    /// Methods ranked by mean end-to-end MSE at each sparsity, then notes.
    pub fn summary(&self) -> String {
        let mut out = format!("experiment: {}\n", self.name);
        let rows = self.aggregate();
        let mut levels: Vec<f64> = rows.iter().map(|r| r.sparsity).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        for s in levels {
            let mut at: Vec<&AggregateRow> = rows.iter().filter(|r| r.sparsity == s).collect();
            at.sort_by(|a, b| a.mse().mean.total_cmp(&b.mse().mean));
            let _ = writeln!(out, "\nS={s}");
            for (rank, r) in at.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "  {}. {:<9} {:<14} n={:<4} mse={:.6e} ±{:.2e}  acc_light={:.4}  seeds={} failed={}",
                    rank + 1,
                    r.method.to_string(),
                    r.allocation.to_string(),
                    r.samples,
                    r.mse().mean,
                    r.mse().ci95,
                    r.metrics[2].mean,
                    r.seeds,
                    r.failed
                );
            }
        }
        let failures: Vec<&CellResult> = self.cells.iter().filter(|c| c.error.is_some()).collect();
        if !failures.is_empty() {
            let _ = writeln!(out, "\nfailed cells: {}", failures.len());
            for c in failures {
                let _ = writeln!(
                    out,
                    "  {} {} S={} seed={}: {}",
                    c.config.method,
                    c.config.allocation,
                    c.config.sparsity,
                    c.config.seed,
                    c.error.as_deref().unwrap_or("")
                );
            }
        }
        if !self.notes.is_empty() {
            out.push('\n');
            for n in &self.notes {
                let _ = writeln!(out, "{n}");
            }
        }
        out
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Grid for [`run_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub methods: Vec<Method>,
    pub sparsities: Vec<f64>,
    pub seeds: Vec<u64>,
    pub regime: Regime,
    pub samples: usize,
    pub lambda: f64,
    pub threshold: f64,
    pub group: ComparisonGroup,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            sparsities: SPARSITY_GRID.to_vec(),
            seeds: (0..DEFAULT_SEEDS as u64).collect(),
            regime: Regime::Scenario,
            samples: DEFAULT_SAMPLES,
            lambda: DEFAULT_LAMBDA,
            threshold: DEFAULT_THRESHOLD,
            group: ComparisonGroup::PerRow,
        }
    }
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<CellConfig> {
        let mut cells = Vec::new();
        for &method in &self.methods {
            let levels: &[f64] = if method == Method::Dense { &[0.0] } else { &self.sparsities };
            for &sparsity in levels {
                for &seed in &self.seeds {
                    cells.push(CellConfig {
                        method,
                        allocation: match method {
                            Method::Owl | Method::Owled => Allocation::OwledLmOnly,
                            _ => Allocation::Uniform,
                        },
                        sparsity,
                        regime: self.regime,
                        samples: self.samples,
                        seed,
                        lambda: self.lambda,
                        threshold: self.threshold,
                        group: self.group,
                    });
                }
            }
        }
        cells
    }
}

/// Shared inputs of every cell.
pub struct Harness<'a> {
    pub dense: &'a ModelGraph,
    pub task: &'a ToyTask,
}

impl<'a> Harness<'a> {
    pub fn new(dense: &'a ModelGraph, task: &'a ToyTask) -> Self {
        Self { dense, task }
    }

    fn pruning_config(&self, c: &CellConfig) -> PruningConfig {
        PruningConfig {
            sparsity: c.sparsity,
            lambda: c.lambda,
            threshold: c.threshold,
            metric: match c.method {
                Method::Magnitude => ImportanceMetric::Magnitude,
                _ => ImportanceMetric::Wanda,
            },
            group: c.group,
            allocation: c.allocation,
            weighting: Default::default(),
            seed: c.seed,
        }
    }

    /// The plan a sweep cell prunes with.
    pub fn plan(&self, c: &CellConfig) -> Result<SparsityPlan> {
        let cfg = self.pruning_config(c);
        match c.method {
            Method::Dense => Ok(allocate_uniform(&cfg.clone().with_sparsity(0.0), &layer_sizes(self.dense, None))?),
            Method::Magnitude | Method::Wanda => {
                Ok(allocate_uniform(&cfg, &layer_sizes(self.dense, Some(ComponentTag::Lm)))?.covering(self.dense))
            }
            Method::Owl => {
                let generic = CalibrationSet::generate(Regime::Generic, c.samples, c.seed)?;
                allocate_scoped(self.dense, &collect_norms(self.dense, &generic)?, &cfg)
            }
            Method::Owled => {
                let calib = CalibrationSet::generate(c.regime, c.samples, c.seed)?;
                allocate_scoped(self.dense, &collect_norms(self.dense, &calib)?, &cfg)
            }
        }
    }

    fn execute(&self, c: &CellConfig, plan: Result<SparsityPlan>) -> CellResult {
        let outcome = plan.and_then(|plan| {
            let cfg = self.pruning_config(c);
            let calib = CalibrationSet::generate(c.regime, c.samples, c.seed)?;
            let trace = collect_norms(self.dense, &calib)?;
            let (pruned, report) = prune_model(self.dense, &plan, cfg.metric, cfg.group, Some(&trace))?;
            let metrics = score(&pruned, self.task)?;
            Ok((report, metrics))
        });
        match outcome {
            Ok((report, metrics)) => CellResult {
                config: c.clone(),
                pruned: report.total_pruned(),
                encoder_sparsity: report.component_sparsity(ComponentTag::Encoder),
                lm_sparsity: report.component_sparsity(ComponentTag::Lm),
                metrics: Some(metrics),
                error: None,
            },
            Err(e) => CellResult {
                config: c.clone(),
                pruned: 0,
                encoder_sparsity: 0.0,
                lm_sparsity: 0.0,
                metrics: None,
                error: Some(e.to_string()),
            },
        }
    }

    pub fn run_cell(&self, c: &CellConfig) -> CellResult {
        self.execute(c, self.plan(c))
    }

    pub fn run_sweep(&self, grid: &SweepGrid) -> Result<ExperimentResult> {
        if grid.methods.is_empty() || grid.seeds.is_empty() {
            return Err(Error::config("sweep grid has no methods or no seeds"));
        }
        let cells: Vec<CellResult> = grid.cells().par_iter().map(|c| self.run_cell(c)).collect();
        Ok(ExperimentResult {
            name: "sweep".into(),
            cells,
            notes: Vec::new(),
        })
    }

    /// The three outlier-weighed scopes at equal pruned-parameter budget,
    /// using the LM-only plan as the reference budget.
    pub fn run_scope_ablation(&self, sparsities: &[f64], seeds: &[u64], base: &SweepGrid) -> Result<ExperimentResult> {
        if sparsities.is_empty() || seeds.is_empty() {
            return Err(Error::config("scope ablation needs sparsities and seeds"));
        }
        let scopes = [Allocation::OwledLmOnly, Allocation::OwledSeparate, Allocation::OwledGlobal];
        let jobs: Vec<(f64, u64)> = sparsities.iter().flat_map(|&s| seeds.iter().map(move |&k| (s, k))).collect();
        let per_job: Vec<(Vec<CellResult>, String)> = jobs
            .par_iter()
            .map(|&(s, seed)| {
                let configs: Vec<CellConfig> = scopes
                    .iter()
                    .map(|&allocation| CellConfig {
                        method: Method::Owled,
                        allocation,
                        sparsity: s,
                        regime: base.regime,
                        samples: base.samples,
                        seed,
                        lambda: base.lambda,
                        threshold: base.threshold,
                        group: base.group,
                    })
                    .collect();
                let plans = self.budget_matched_plans(&configs);
                let budget_line = match &plans {
                    Ok(p) => budget_line(s, seed, &p.iter().map(|p| (p.allocation, p.total_pruned())).collect::<Vec<_>>(), self.dense.len()),
                    Err(e) => format!("budget S={s} seed={seed}: failed: {e}"),
                };
                let cells = match plans {
                    Ok(plans) => configs.iter().zip(plans).map(|(c, p)| self.execute(c, Ok(p))).collect(),
                    Err(e) => configs
                        .iter()
                        .map(|c| self.execute(c, Err(Error::config(e.to_string()))))
                        .collect(),
                };
                (cells, budget_line)
            })
            .collect();
        let mut cells = Vec::new();
        let mut notes = Vec::new();
        for (c, n) in per_job {
            cells.extend(c);
            notes.push(n);
        }
        Ok(ExperimentResult {
            name: "scope".into(),
            cells,
            notes,
        })
    }

    fn budget_matched_plans(&self, configs: &[CellConfig]) -> Result<Vec<SparsityPlan>> {
        let first = &configs[0];
        let calib = CalibrationSet::generate(first.regime, first.samples, first.seed)?;
        let trace = collect_norms(self.dense, &calib)?;
        let unscaled: Vec<SparsityPlan> = configs
            .iter()
            .map(|c| allocate_scoped(self.dense, &trace, &self.pruning_config(c)))
            .collect::<Result<_>>()?;
        let reference = &unscaled[0];
        let mut plans = vec![reference.clone()];
        for p in &unscaled[1..] {
            plans.push(match_budget(reference, p)?);
        }
        Ok(plans)
    }

    /// Outlier-weighed pruning at one sparsity for each calibration size.
    pub fn run_calibration_ablation(
        &self,
        counts: &[usize],
        sparsity: f64,
        seeds: &[u64],
        base: &SweepGrid,
    ) -> Result<ExperimentResult> {
        if counts.is_empty() || seeds.is_empty() {
            return Err(Error::config("calibration ablation needs sample counts and seeds"));
        }
        let cells: Vec<CellConfig> = counts
            .iter()
            .flat_map(|&n| {
                seeds.iter().map(move |&seed| CellConfig {
                    method: Method::Owled,
                    allocation: Allocation::OwledLmOnly,
                    sparsity,
                    regime: base.regime,
                    samples: n,
                    seed,
                    lambda: base.lambda,
                    threshold: base.threshold,
                    group: base.group,
                })
            })
            .collect();
        let cells = cells.par_iter().map(|c| self.run_cell(c)).collect();
        Ok(ExperimentResult {
            name: "calib".into(),
            cells,
            notes: Vec::new(),
        })
    }
}

fn budget_line(s: f64, seed: u64, totals: &[(Allocation, usize)], layers: usize) -> String {
    let max = totals.iter().map(|t| t.1).max().unwrap_or(0);
    let min = totals.iter().map(|t| t.1).min().unwrap_or(0);
    let mut line = format!("budget S={s} seed={seed}:");
    for (a, t) in totals {
        let _ = write!(line, " {a}={t}");
    }
    let _ = write!(
        line,
        " spread={} limit={} {}",
        max - min,
        layers,
        if max - min <= layers { "EQUAL" } else { "MISMATCH" }
    );
    line
}

/// Default sample counts and sparsity for [`Harness::run_calibration_ablation`].
pub fn calibration_defaults() -> (&'static [usize], f64) {
    (&ABLATION_SAMPLE_COUNTS, CALIBRATION_SPARSITY)
}
