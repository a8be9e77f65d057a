//! Per-layer sparsity targets from an outlier profile.
//!
//! Layers with more outliers receive lower sparsity. Targets stay inside
//! `[S - lambda, S + lambda]` and their parameter-weighted mean equals `S`.
//! The mapping used here:
//!
//! 1. `raw_i = 1 - D_i`
//! 2. `S_i = S + lambda * (raw_i - mean(raw)) / max_i |raw_i - mean(raw)|`
//!    (all `S_i = S` when the profile is flat)
//! 3. clamp to `[S - lambda, S + lambda]`
//! 4. shift the unclamped layers uniformly until the weighted mean is `S`
//!    again, re-clamping as bounds are hit.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{ActivationTrace, ComponentTag, ModelGraph};
use crate::outlier::{compute_lod, compute_lod_pooled, LayerOutlierProfile, DEFAULT_THRESHOLD};
use crate::prune::{ComparisonGroup, ImportanceMetric};

pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Clamp half-widths covered by the grid search.
pub const LAMBDA_GRID: [f64; 5] = [0.02, 0.05, 0.08, 0.1, 0.2];
/// Global sparsity levels of the main sweep.
pub const SPARSITY_GRID: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

const MEAN_TOLERANCE: f64 = 1e-13;

/// Which layers take part in outlier analysis and allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Allocation {
    /// Same sparsity everywhere.
    Uniform,
    /// Outlier-weighed over LM layers only; the encoder is not pruned.
    OwledLmOnly,
    /// Outlier-weighed within the encoder and within the LM independently.
    OwledSeparate,
    /// One pooled outlier threshold and one allocation over every layer.
    OwledGlobal,
}

impl Allocation {
    pub const ALL: [Allocation; 4] = [
        Allocation::Uniform,
        Allocation::OwledLmOnly,
        Allocation::OwledSeparate,
        Allocation::OwledGlobal,
    ];

    pub fn is_outlier_weighed(self) -> bool {
        self != Allocation::Uniform
    }
}

impl fmt::Display for Allocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Allocation::Uniform => "UNIFORM",
            Allocation::OwledLmOnly => "OWLED_LM_ONLY",
            Allocation::OwledSeparate => "OWLED_SEPARATE",
            Allocation::OwledGlobal => "OWLED_GLOBAL",
        })
    }
}

impl FromStr for Allocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        Allocation::ALL
            .into_iter()
            .find(|a| a.to_string() == norm)
            .ok_or_else(|| Error::config(format!("unknown allocation `{s}`")))
    }
}

/// How "average sparsity" is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanWeighting {
    /// Weighted by parameter count, so the global pruned fraction is `S`.
    #[default]
    Parameters,
    /// Plain mean over layers.
    Layers,
}

impl FromStr for MeanWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "parameters" | "parameter" => Ok(MeanWeighting::Parameters),
            "layers" | "layer" => Ok(MeanWeighting::Layers),
            _ => Err(Error::config(format!("unknown mean weighting `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningConfig {
    pub sparsity: f64,
    pub lambda: f64,
    pub threshold: f64,
    pub metric: ImportanceMetric,
    pub group: ComparisonGroup,
    pub allocation: Allocation,
    pub weighting: MeanWeighting,
    pub seed: u64,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.5,
            lambda: DEFAULT_LAMBDA,
            threshold: DEFAULT_THRESHOLD,
            metric: ImportanceMetric::Wanda,
            group: ComparisonGroup::PerRow,
            allocation: Allocation::OwledLmOnly,
            weighting: MeanWeighting::Parameters,
            seed: 0,
        }
    }
}

impl PruningConfig {
    pub fn with_sparsity(mut self, s: f64) -> Self {
        self.sparsity = s;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_allocation(mut self, a: Allocation) -> Self {
        self.allocation = a;
        self
    }

    pub fn with_metric(mut self, m: ImportanceMetric) -> Self {
        self.metric = m;
        self
    }

    /// The clamp band must fit in `[0, 1]` for outlier-weighed allocations.
    pub fn validate(&self) -> Result<()> {
        let s = self.sparsity;
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::config(format!("sparsity must lie in [0, 1], got {s}")));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::config(format!(
                "threshold multiplier must be positive, got {}",
                self.threshold
            )));
        }
        if self.allocation.is_outlier_weighed() && (s - self.lambda < 0.0 || s + self.lambda > 1.0) {
            return Err(Error::config(format!(
                "clamp band [{}, {}] leaves [0, 1]",
                s - self.lambda,
                s + self.lambda
            )));
        }
        Ok(())
    }
}

/// Weight count of one layer, keyed by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSize {
    pub layer_id: String,
    pub size: usize,
}

pub fn layer_sizes(g: &ModelGraph, scope: Option<ComponentTag>) -> Vec<LayerSize> {
    g.layers_in(scope)
        .map(|l| LayerSize {
            layer_id: l.id().to_owned(),
            size: l.weight.len(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub layer_id: String,
    pub size: usize,
    pub sparsity: f64,
    pub pruned_count: usize,
    /// Out-of-scope layers are carried with sparsity 0 and never rescaled.
    pub in_scope: bool,
}

impl PlanEntry {
    fn new(layer_id: String, size: usize, sparsity: f64) -> Self {
        Self {
            pruned_count: planned_count(sparsity, size),
            layer_id,
            size,
            sparsity,
            in_scope: true,
        }
    }

    fn excluded(layer_id: String, size: usize) -> Self {
        Self {
            layer_id,
            size,
            sparsity: 0.0,
            pruned_count: 0,
            in_scope: false,
        }
    }
}

/// `round(s * size)`, halves away from zero.
pub fn planned_count(sparsity: f64, size: usize) -> usize {
    ((sparsity * size as f64).round() as usize).min(size)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPlan {
    pub entries: Vec<PlanEntry>,
    pub sparsity: f64,
    pub lambda: f64,
    pub threshold: f64,
    pub allocation: Allocation,
    /// Budget-matching scale factor, 0 when the plan was not rescaled.
    pub coefficient: f64,
}

impl SparsityPlan {
    pub fn entry(&self, layer_id: &str) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.layer_id == layer_id)
    }

    pub fn sparsities(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.sparsity).collect()
    }

    pub fn total_pruned(&self) -> usize {
        self.entries.iter().map(|e| e.pruned_count).sum()
    }

    /// Σ S_i · size_i before rounding.
    pub fn expected_pruned(&self) -> f64 {
        self.entries.iter().map(|e| e.sparsity * e.size as f64).sum()
    }

    /// Parameter-weighted mean sparsity over in-scope entries.
    pub fn weighted_mean(&self) -> f64 {
        let (num, den) = self
            .entries
            .iter()
            .filter(|e| e.in_scope)
            .fold((0.0, 0.0), |(n, d), e| (n + e.sparsity * e.size as f64, d + e.size as f64));
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    /// Inserts out-of-scope entries for graph layers the plan does not
    /// mention, so the plan lists every layer in graph order.
    pub fn covering(mut self, g: &ModelGraph) -> Self {
        let mut entries = Vec::with_capacity(g.len());
        for layer in g.layers() {
            match self.entries.iter().position(|e| e.layer_id == layer.id()) {
                Some(k) => entries.push(self.entries.swap_remove(k)),
                None => entries.push(PlanEntry::excluded(layer.id().to_owned(), layer.weight.len())),
            }
        }
        entries.append(&mut self.entries);
        self.entries = entries;
        self
    }

    /// Header with the configuration, then `layer_id TAB S_i TAB count`.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# S={} lambda={} M={} allocation={} coefficient={}\n",
            self.sparsity, self.lambda, self.threshold, self.allocation, self.coefficient
        );
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}", e.layer_id, e.sparsity, e.pruned_count);
        }
        out
    }
}

/// Same sparsity for every listed layer.
pub fn allocate_uniform(cfg: &PruningConfig, layers: &[LayerSize]) -> Result<SparsityPlan> {
    if layers.is_empty() {
        return Err(Error::config("cannot allocate sparsity over zero layers"));
    }
    if !(0.0..=1.0).contains(&cfg.sparsity) {
        return Err(Error::config(format!("sparsity must lie in [0, 1], got {}", cfg.sparsity)));
    }
    Ok(SparsityPlan {
        entries: layers
            .iter()
            .map(|l| PlanEntry::new(l.layer_id.clone(), l.size, cfg.sparsity))
            .collect(),
        sparsity: cfg.sparsity,
        lambda: cfg.lambda,
        threshold: cfg.threshold,
        allocation: Allocation::Uniform,
        coefficient: 0.0,
    })
}

/// Outlier-weighed targets for the profiled layers. `layers` must list the
/// same layers as `profile`, in the same order.
pub fn allocate(profile: &LayerOutlierProfile, cfg: &PruningConfig, layers: &[LayerSize]) -> Result<SparsityPlan> {
    if profile.is_empty() {
        return Err(Error::config("cannot allocate sparsity over an empty profile"));
    }
    if profile.len() != layers.len()
        || profile
            .entries
            .iter()
            .zip(layers)
            .any(|(p, l)| p.layer_id != l.layer_id)
    {
        return Err(Error::structural("profile and layer sizes list different layers"));
    }
    let mut checked = cfg.clone();
    if checked.allocation == Allocation::Uniform {
        checked.allocation = Allocation::OwledLmOnly;
    }
    checked.validate()?;

    let s = cfg.sparsity;
    let (lo, hi) = (s - cfg.lambda, s + cfg.lambda);
    let weights: Vec<f64> = match cfg.weighting {
        MeanWeighting::Parameters => layers.iter().map(|l| l.size as f64).collect(),
        MeanWeighting::Layers => vec![1.0; layers.len()],
    };

    let raw: Vec<f64> = profile.entries.iter().map(|e| 1.0 - e.ratio).collect();
    let mean_raw = raw.iter().sum::<f64>() / raw.len() as f64;
    let max_dev = raw.iter().map(|r| (r - mean_raw).abs()).fold(0.0, f64::max);
    let mut targets: Vec<f64> = if max_dev == 0.0 || cfg.lambda == 0.0 {
        vec![s; raw.len()]
    } else {
        raw.iter()
            .map(|r| (s + cfg.lambda * ((r - mean_raw) / max_dev)).clamp(lo, hi))
            .collect()
    };
    restore_mean(&mut targets, &weights, s, lo, hi)?;

    Ok(SparsityPlan {
        entries: layers
            .iter()
            .zip(targets)
            .map(|(l, t)| PlanEntry::new(l.layer_id.clone(), l.size, t))
            .collect(),
        sparsity: s,
        lambda: cfg.lambda,
        threshold: cfg.threshold,
        allocation: cfg.allocation,
        coefficient: 0.0,
    })
}

/// Uniform additive shift of the layers not pinned at the relevant bound,
/// repeated until the weighted mean is `target`. Each pass either reaches
/// the target or pins at least one more layer.
fn restore_mean(values: &mut [f64], weights: &[f64], target: f64, lo: f64, hi: f64) -> Result<()> {
    let total_w: f64 = weights.iter().sum();
    for _ in 0..=values.len() + 1 {
        let current: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
        let deficit = target * total_w - current;
        if deficit.abs() <= MEAN_TOLERANCE * total_w {
            return Ok(());
        }
        let free_w: f64 = values
            .iter()
            .zip(weights)
            .filter(|(v, _)| if deficit > 0.0 { **v < hi } else { **v > lo })
            .map(|(_, w)| w)
            .sum();
        if free_w == 0.0 {
            break;
        }
        let delta = deficit / free_w;
        for v in values.iter_mut() {
            *v = (*v + delta).clamp(lo, hi);
        }
    }
    let current: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total_w;
    if (current - target).abs() <= 1e-12 {
        Ok(())
    } else {
        Err(Error::config(format!(
            "cannot reach mean sparsity {target} inside [{lo}, {hi}] (reached {current})"
        )))
    }
}

/// Plan over the whole graph for the configured allocation scope. Layers
/// outside the scope are carried with sparsity 0.
pub fn allocate_scoped(g: &ModelGraph, trace: &ActivationTrace, cfg: &PruningConfig) -> Result<SparsityPlan> {
    cfg.validate()?;
    let plan = match cfg.allocation {
        Allocation::Uniform => allocate_uniform(cfg, &layer_sizes(g, None))?,
        Allocation::OwledLmOnly => {
            let scope = Some(ComponentTag::Lm);
            let profile = compute_lod(g, trace, cfg.threshold, scope)?;
            allocate(&profile, cfg, &layer_sizes(g, scope))?
        }
        Allocation::OwledSeparate => {
            let mut parts = Vec::new();
            for tag in [ComponentTag::Encoder, ComponentTag::Lm] {
                let profile = compute_lod(g, trace, cfg.threshold, Some(tag))?;
                parts.push(allocate(&profile, cfg, &layer_sizes(g, Some(tag)))?);
            }
            let mut plan = parts.remove(0);
            plan.entries.extend(parts.remove(0).entries);
            plan
        }
        Allocation::OwledGlobal => {
            let profile = compute_lod_pooled(g, trace, cfg.threshold, None)?;
            allocate(&profile, cfg, &layer_sizes(g, None))?
        }
    };
    Ok(plan.covering(g))
}

/// Rescales `target` so it prunes as many parameters as `reference`.
///
/// Every in-scope target sparsity is multiplied by
/// `reference_expected / target_expected` (pre-rounding totals), and the
/// clamp band is scaled with it.
pub fn match_budget(reference: &SparsityPlan, target: &SparsityPlan) -> Result<SparsityPlan> {
    let budget = reference.expected_pruned();
    let unscaled = target.expected_pruned();
    let coefficient = if budget == 0.0 {
        0.0
    } else if unscaled == 0.0 {
        return Err(Error::config("target plan prunes nothing and cannot be scaled to a non-zero budget"));
    } else {
        budget / unscaled
    };
    let (lo, hi) = (
        coefficient * (target.sparsity - target.lambda).max(0.0),
        coefficient * (target.sparsity + target.lambda),
    );
    let mut entries = Vec::with_capacity(target.entries.len());
    for e in &target.entries {
        if !e.in_scope {
            entries.push(e.clone());
            continue;
        }
        let mut s = e.sparsity * coefficient;
        if target.allocation.is_outlier_weighed() {
            s = s.clamp(lo, hi);
        }
        if s > 1.0 {
            return Err(Error::config(format!(
                "budget coefficient {coefficient} pushes layer `{}` to sparsity {s}",
                e.layer_id
            )));
        }
        entries.push(PlanEntry::new(e.layer_id.clone(), e.size, s));
    }
    Ok(SparsityPlan {
        entries,
        coefficient,
        ..target.clone()
    })
}
