//! Mask construction, model pruning, and the reports that describe it.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::allocation::{PlanEntry, SparsityPlan};
use crate::error::{Error, Result};
use crate::graph::{ActivationTrace, ComponentTag, ModelGraph};
use crate::tensor::{apply_mask, dot, select_smallest_k, ActivationNorms, Matrix, PruneMask, WeightMatrix};

/// Per-weight importance; the lowest-scoring weights are pruned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ImportanceMetric {
    /// `|W_ij|`
    Magnitude,
    /// `|W_ij| * ||X_j||_2`
    Wanda,
}

impl ImportanceMetric {
    pub fn needs_activations(self) -> bool {
        self == ImportanceMetric::Wanda
    }
}

impl fmt::Display for ImportanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImportanceMetric::Magnitude => "MAGNITUDE",
            ImportanceMetric::Wanda => "WANDA",
        })
    }
}

impl FromStr for ImportanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MAGNITUDE" => Ok(ImportanceMetric::Magnitude),
            "WANDA" => Ok(ImportanceMetric::Wanda),
            _ => Err(Error::config(format!("unknown importance metric `{s}`"))),
        }
    }
}

/// The set of weights ranked against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ComparisonGroup {
    /// Each output row gets its share of the layer's prune count.
    #[default]
    PerRow,
    /// One ranking over the whole layer.
    PerLayer,
}

impl fmt::Display for ComparisonGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComparisonGroup::PerRow => "PER_ROW",
            ComparisonGroup::PerLayer => "PER_LAYER",
        })
    }
}

impl FromStr for ComparisonGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "PER_ROW" | "ROW" => Ok(ComparisonGroup::PerRow),
            "PER_LAYER" | "LAYER" => Ok(ComparisonGroup::PerLayer),
            _ => Err(Error::config(format!("unknown comparison group `{s}`"))),
        }
    }
}

fn importance(w: &WeightMatrix, metric: ImportanceMetric, norms: Option<&ActivationNorms>) -> Result<Vec<f64>> {
    match metric {
        ImportanceMetric::Magnitude => Ok(w.values().iter().map(|v| v.abs()).collect()),
        ImportanceMetric::Wanda => {
            let norms = norms.ok_or_else(|| {
                Error::precondition(format!("WANDA needs activation norms for layer `{}`", w.layer_id()))
            })?;
            if norms.norms.len() != w.cols() {
                return Err(Error::structural(format!(
                    "layer `{}` has {} input channels but {} norms",
                    w.layer_id(),
                    w.cols(),
                    norms.norms.len()
                )));
            }
            let mut scores = Vec::with_capacity(w.len());
            for i in 0..w.rows() {
                scores.extend(w.row(i).iter().zip(&norms.norms).map(|(v, n)| v.abs() * n));
            }
            Ok(scores)
        }
    }
}

/// Mask with exactly `entry.pruned_count` false bits, chosen as the lowest
/// scores within each comparison group. Ties go to the lower flat index.
pub fn build_mask(
    w: &WeightMatrix,
    entry: &PlanEntry,
    metric: ImportanceMetric,
    group: ComparisonGroup,
    norms: Option<&ActivationNorms>,
) -> Result<PruneMask> {
    if entry.layer_id != w.layer_id() {
        return Err(Error::structural(format!(
            "plan entry `{}` applied to layer `{}`",
            entry.layer_id,
            w.layer_id()
        )));
    }
    let count = entry.pruned_count;
    if count > w.len() {
        return Err(Error::config(format!(
            "plan prunes {count} weights from layer `{}` of size {}",
            w.layer_id(),
            w.len()
        )));
    }
    let scores = importance(w, metric, norms)?;
    let mut bits = vec![true; w.len()];
    match group {
        ComparisonGroup::PerLayer => {
            for k in select_smallest_k(&scores, count)? {
                bits[k] = false;
            }
        }
        ComparisonGroup::PerRow => {
            let (rows, cols) = (w.rows(), w.cols());
            let (base, extra) = (count / rows, count % rows);
            for r in 0..rows {
                let k = base + usize::from(r < extra);
                for j in select_smallest_k(&scores[r * cols..(r + 1) * cols], k)? {
                    bits[r * cols + j] = false;
                }
            }
        }
    }
    PruneMask::new(w.rows(), w.cols(), bits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPruneStats {
    pub layer_id: String,
    pub component: ComponentTag,
    pub size: usize,
    pub planned: usize,
    pub pruned: usize,
}

impl LayerPruneStats {
    pub fn sparsity(&self) -> f64 {
        self.pruned as f64 / self.size as f64
    }
}

/// Outcome of [`prune_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub metric: ImportanceMetric,
    pub group: ComparisonGroup,
    pub plan: SparsityPlan,
    pub layers: Vec<LayerPruneStats>,
}

impl PruneReport {
    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.size).sum()
    }

    pub fn total_pruned(&self) -> usize {
        self.layers.iter().map(|l| l.pruned).sum()
    }

    /// Pruned fraction of every weight in the graph.
    pub fn global_sparsity(&self) -> f64 {
        self.total_pruned() as f64 / self.total_params() as f64
    }

    pub fn component_sparsity(&self, tag: ComponentTag) -> f64 {
        let (p, n) = self
            .layers
            .iter()
            .filter(|l| l.component == tag)
            .fold((0, 0), |(p, n), l| (p + l.pruned, n + l.size));
        if n == 0 {
            0.0
        } else {
            p as f64 / n as f64
        }
    }

    /// Pruned fraction over the layers the plan allocated to.
    pub fn scope_sparsity(&self) -> f64 {
        let (p, n) = self
            .layers
            .iter()
            .filter(|l| self.plan.entry(&l.layer_id).is_some_and(|e| e.in_scope))
            .fold((0, 0), |(p, n), l| (p + l.pruned, n + l.size));
        if n == 0 {
            0.0
        } else {
            p as f64 / n as f64
        }
    }

    /// `key=value` lines, one fact per line.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "metric={}", self.metric);
        let _ = writeln!(out, "group={}", self.group);
        let _ = writeln!(out, "allocation={}", self.plan.allocation);
        let _ = writeln!(out, "target_sparsity={}", self.plan.sparsity);
        let _ = writeln!(out, "lambda={}", self.plan.lambda);
        let _ = writeln!(out, "threshold={}", self.plan.threshold);
        let _ = writeln!(out, "coefficient={}", self.plan.coefficient);
        let _ = writeln!(out, "total_params={}", self.total_params());
        let _ = writeln!(out, "total_pruned={}", self.total_pruned());
        let _ = writeln!(out, "global_sparsity={}", self.global_sparsity());
        let _ = writeln!(out, "scope_sparsity={}", self.scope_sparsity());
        let _ = writeln!(out, "encoder_sparsity={}", self.component_sparsity(ComponentTag::Encoder));
        let _ = writeln!(out, "lm_sparsity={}", self.component_sparsity(ComponentTag::Lm));
        for l in &self.layers {
            let _ = writeln!(out, "layer.{}.component={}", l.layer_id, l.component);
            let _ = writeln!(out, "layer.{}.size={}", l.layer_id, l.size);
            let _ = writeln!(out, "layer.{}.planned={}", l.layer_id, l.planned);
            let _ = writeln!(out, "layer.{}.pruned={}", l.layer_id, l.pruned);
            let _ = writeln!(out, "layer.{}.sparsity={}", l.layer_id, l.sparsity());
        }
        out
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "pruning report: metric={} group={} allocation={} S={}\n",
            self.metric, self.group, self.plan.allocation, self.plan.sparsity
        );
        let _ = writeln!(out, "{:<12} {:<8} {:>8} {:>8} {:>8} {:>9}", "layer", "part", "size", "planned", "pruned", "sparsity");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<12} {:<8} {:>8} {:>8} {:>8} {:>9.4}",
                l.layer_id,
                l.component.to_string(),
                l.size,
                l.planned,
                l.pruned,
                l.sparsity()
            );
        }
        let _ = writeln!(
            out,
            "total: {} of {} weights pruned, global sparsity {:.6}",
            self.total_pruned(),
            self.total_params(),
            self.global_sparsity()
        );
        let _ = writeln!(
            out,
            "encoder sparsity {:.6}, LM sparsity {:.6}",
            self.component_sparsity(ComponentTag::Encoder),
            self.component_sparsity(ComponentTag::Lm)
        );
        out
    }
}

/// Masks every layer named in `plan`; other layers are copied unchanged.
/// `trace` is required for [`ImportanceMetric::Wanda`].
pub fn prune_model(
    g: &ModelGraph,
    plan: &SparsityPlan,
    metric: ImportanceMetric,
    group: ComparisonGroup,
    trace: Option<&ActivationTrace>,
) -> Result<(ModelGraph, PruneReport)> {
    for e in &plan.entries {
        if g.layer(&e.layer_id).is_none() {
            return Err(Error::structural(format!("plan names unknown layer `{}`", e.layer_id)));
        }
    }
    if metric.needs_activations() && trace.is_none() {
        return Err(Error::precondition("WANDA pruning needs an activation trace"));
    }
    let outcomes: Vec<(Option<WeightMatrix>, LayerPruneStats)> = g
        .layers()
        .par_iter()
        .map(|layer| {
            let size = layer.weight.len();
            let stats = |planned, pruned| LayerPruneStats {
                layer_id: layer.id().to_owned(),
                component: layer.component,
                size,
                planned,
                pruned,
            };
            match plan.entry(layer.id()) {
                Some(entry) if entry.pruned_count > 0 => {
                    let norms = match trace {
                        Some(t) if metric.needs_activations() => Some(t.get(layer.id()).ok_or_else(|| {
                            Error::structural(format!("trace has no entry for layer `{}`", layer.id()))
                        })?),
                        _ => None,
                    };
                    let mask = build_mask(&layer.weight, entry, metric, group, norms)?;
                    let pruned = mask.pruned_count();
                    Ok((Some(apply_mask(&layer.weight, &mask)?), stats(entry.pruned_count, pruned)))
                }
                _ => Ok((None, stats(0, 0))),
            }
        })
        .collect::<Result<_>>()?;
    let (replacements, layers): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let pruned = g.with_weights(replacements.into_iter().flatten().collect())?;
    Ok((
        pruned,
        PruneReport {
            metric,
            group,
            plan: plan.clone(),
            layers,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionError {
    /// `||(W - W_pruned) X||_F^2` per layer, `X` being the dense model's
    /// input to that layer.
    pub per_layer: Vec<(String, f64)>,
    /// Mean squared difference of the final outputs.
    pub output_mse: f64,
}

impl ReconstructionError {
    pub fn total(&self) -> f64 {
        self.per_layer.iter().map(|(_, e)| e).sum()
    }
}

pub fn reconstruction_error(original: &ModelGraph, pruned: &ModelGraph, batch: &Matrix) -> Result<ReconstructionError> {
    if original.len() != pruned.len()
        || original.layers().iter().zip(pruned.layers()).any(|(a, b)| {
            a.id() != b.id() || a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols()
        })
    {
        return Err(Error::structural("graphs differ in more than their masks"));
    }
    let inputs = original.layer_inputs(batch)?;
    let mut per_layer = Vec::with_capacity(original.len());
    for ((a, b), x) in original.layers().iter().zip(pruned.layers()).zip(&inputs) {
        let (wa, wb) = (&a.weight, &b.weight);
        let diff: Vec<f64> = wa.values().iter().zip(wb.values()).map(|(p, q)| p - q).collect();
        let cols = wa.cols();
        let mut err = 0.0;
        for s in 0..x.rows() {
            let xs = x.row(s);
            for i in 0..wa.rows() {
                let d = dot(&diff[i * cols..(i + 1) * cols], xs);
                err += d * d;
            }
        }
        per_layer.push((a.id().to_owned(), err));
    }
    let dense_out = inputs.last().expect("output present");
    let pruned_out = pruned.predict(batch)?;
    Ok(ReconstructionError {
        per_layer,
        output_mse: mean_squared_difference(dense_out, &pruned_out),
    })
}

pub(crate) fn mean_squared_difference(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.as_slice().len();
    if n == 0 {
        return 0.0;
    }
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{allocate_uniform, layer_sizes, PruningConfig};
    use crate::graph::{Activation, Layer};

    fn entry(id: &str, size: usize, count: usize) -> PlanEntry {
        PlanEntry {
            layer_id: id.into(),
            size,
            sparsity: count as f64 / size as f64,
            pruned_count: count,
            in_scope: true,
        }
    }

    #[test]
    fn magnitude_per_layer_example() {
        let w = WeightMatrix::from_rows("w", &[[1.0, -4.0], [3.0, -2.0]]).unwrap();
        let m = build_mask(&w, &entry("w", 4, 2), ImportanceMetric::Magnitude, ComparisonGroup::PerLayer, None).unwrap();
        assert_eq!(m.bits(), &[false, true, true, false]);
    }

    #[test]
    fn wanda_uses_activation_norms() {
        let w = WeightMatrix::from_rows("w", &[[1.0, 1.0]]).unwrap();
        let norms = ActivationNorms {
            layer_id: "w".into(),
            norms: vec![10.0, 0.1],
            sample_count: 4,
        };
        let m = build_mask(&w, &entry("w", 2, 1), ImportanceMetric::Wanda, ComparisonGroup::PerRow, Some(&norms)).unwrap();
        assert_eq!(m.bits(), &[true, false]);
        assert!(build_mask(&w, &entry("w", 2, 1), ImportanceMetric::Wanda, ComparisonGroup::PerRow, None).is_err());
    }

    #[test]
    fn zero_count_keeps_everything_and_overflow_errors() {
        let w = WeightMatrix::from_rows("w", &[[1.0, 2.0]]).unwrap();
        let m = build_mask(&w, &entry("w", 2, 0), ImportanceMetric::Magnitude, ComparisonGroup::PerRow, None).unwrap();
        assert_eq!(m, PruneMask::all_true(1, 2));
        assert!(matches!(
            build_mask(&w, &entry("w", 2, 3), ImportanceMetric::Magnitude, ComparisonGroup::PerRow, None),
            Err(Error::Config(_))
        ));
        assert!(build_mask(&w, &entry("x", 2, 1), ImportanceMetric::Magnitude, ComparisonGroup::PerRow, None).is_err());
    }

    #[test]
    fn per_row_remainder_goes_to_first_rows() {
        let w = WeightMatrix::new("w", 3, 4, (1..=12).map(f64::from).collect()).unwrap();
        let m = build_mask(&w, &entry("w", 12, 5), ImportanceMetric::Magnitude, ComparisonGroup::PerRow, None).unwrap();
        let per_row: Vec<usize> = m.bits().chunks(4).map(|r| r.iter().filter(|b| !**b).count()).collect();
        assert_eq!(per_row, vec![2, 2, 1]);
        assert_eq!(m.bits()[..4], [false, false, true, true]);
    }

    fn two_layer(w0: f64) -> ModelGraph {
        ModelGraph::new(
            1,
            vec![
                Layer::new(ComponentTag::Encoder, WeightMatrix::from_rows("a", &[[w0]]).unwrap(), None, Activation::Identity).unwrap(),
                Layer::new(ComponentTag::Lm, WeightMatrix::from_rows("b", &[[1.0]]).unwrap(), None, Activation::Identity).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn reconstruction_error_examples() {
        let g = two_layer(2.0);
        let x = Matrix::from_rows(&[[1.0]]).unwrap();
        let same = reconstruction_error(&g, &g, &x).unwrap();
        assert_eq!(same.total(), 0.0);
        assert_eq!(same.output_mse, 0.0);

        let pruned = g.with_weights(vec![WeightMatrix::from_rows("a", &[[0.0]]).unwrap()]).unwrap();
        let err = reconstruction_error(&g, &pruned, &x).unwrap();
        assert_eq!(err.per_layer[0], ("a".to_string(), 4.0));
        assert_eq!(err.per_layer[1].1, 0.0);
        assert_eq!(err.output_mse, 4.0);
    }

    #[test]
    fn zero_sparsity_is_identity() {
        let g = two_layer(2.0);
        let plan = allocate_uniform(&PruningConfig::default().with_sparsity(0.0), &layer_sizes(&g, None)).unwrap();
        let (p, report) = prune_model(&g, &plan, ImportanceMetric::Magnitude, ComparisonGroup::PerRow, None).unwrap();
        assert_eq!(p, g);
        assert_eq!(report.total_pruned(), 0);
    }

    #[test]
    fn wanda_without_trace_is_rejected() {
        let g = two_layer(2.0);
        let plan = allocate_uniform(&PruningConfig::default().with_sparsity(1.0), &layer_sizes(&g, None)).unwrap();
        assert!(prune_model(&g, &plan, ImportanceMetric::Wanda, ComparisonGroup::PerRow, None).is_err());
    }
}
