//! Activation-aware outlier scores and the layerwise outlier distribution.
//!
//! A weight's outlier score is `|W_ij| * ||X_j||_2`, the same importance
//! used by activation-aware pruning. A layer's outlier ratio is the fraction
//! of its scores lying strictly above `M` times the layer's mean score:
//!
//! ```text
//! D = #{ (i, j) : A_ij > M * mean(A) } / (C_out * C_in)
//! ```
//!
//! The vector of ratios over layers, in graph order, is the LOD.

use std::fmt::Write as _;

use crate::calibration::Regime;
use crate::error::{Error, Result};
use crate::graph::{ActivationTrace, ComponentTag, ModelGraph};
use crate::tensor::{ActivationNorms, WeightMatrix};

pub const DEFAULT_THRESHOLD: f64 = 5.0;
/// Threshold multipliers covered by the grid search.
pub const THRESHOLD_GRID: [f64; 4] = [3.0, 5.0, 7.0, 10.0];

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierScoreMatrix {
    pub layer_id: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `scores[i * cols + j] = norms[j] * |W(i, j)|`.
    pub scores: Vec<f64>,
    pub mean_score: f64,
}

pub fn outlier_scores(w: &WeightMatrix, a: &ActivationNorms) -> Result<OutlierScoreMatrix> {
    if a.norms.len() != w.cols() {
        return Err(Error::structural(format!(
            "layer `{}` has {} input channels but {} norms",
            w.layer_id(),
            w.cols(),
            a.norms.len()
        )));
    }
    if a.sample_count == 0 {
        return Err(Error::precondition(format!(
            "activation norms for `{}` were built from zero samples",
            a.layer_id
        )));
    }
    let mut scores = Vec::with_capacity(w.len());
    let mut sum = 0.0;
    for i in 0..w.rows() {
        for (v, n) in w.row(i).iter().zip(&a.norms) {
            let s = n * v.abs();
            sum += s;
            scores.push(s);
        }
    }
    Ok(OutlierScoreMatrix {
        layer_id: w.layer_id().to_owned(),
        rows: w.rows(),
        cols: w.cols(),
        mean_score: sum / scores.len() as f64,
        scores,
    })
}

fn check_threshold(m: f64) -> Result<()> {
    if m > 0.0 && m.is_finite() {
        Ok(())
    } else {
        Err(Error::precondition(format!("threshold multiplier must be positive, got {m}")))
    }
}

/// Fraction of `scores` strictly above `m * mean`.
fn ratio_above(scores: &[f64], mean: f64, m: f64) -> f64 {
    if mean == 0.0 || scores.is_empty() {
        return 0.0;
    }
    let threshold = m * mean;
    let count = scores.iter().filter(|s| **s > threshold).count();
    count as f64 / scores.len() as f64
}

/// Outlier ratio `D` of one layer. A layer whose mean score is zero has no
/// outliers.
pub fn layer_outlier_ratio(s: &OutlierScoreMatrix, m: f64) -> Result<f64> {
    check_threshold(m)?;
    Ok(ratio_above(&s.scores, s.mean_score, m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierEntry {
    pub layer_id: String,
    pub ratio: f64,
}

/// Per-layer outlier ratios in graph order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutlierProfile {
    pub entries: Vec<OutlierEntry>,
    pub threshold: f64,
}

impl LayerOutlierProfile {
    pub fn ratios(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.ratio).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest absolute per-layer difference; profiles must cover the same layers.
    pub fn linf_distance(&self, other: &LayerOutlierProfile) -> Result<f64> {
        if self.entries.len() != other.entries.len()
            || self.entries.iter().zip(&other.entries).any(|(a, b)| a.layer_id != b.layer_id)
        {
            return Err(Error::structural("profiles cover different layers"));
        }
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a.ratio - b.ratio).abs())
            .fold(0.0, f64::max))
    }
}

fn scores_in_scope(g: &ModelGraph, t: &ActivationTrace, scope: Option<ComponentTag>) -> Result<Vec<OutlierScoreMatrix>> {
    g.layers_in(scope)
        .map(|layer| {
            let norms = t
                .get(layer.id())
                .ok_or_else(|| Error::structural(format!("trace has no entry for layer `{}`", layer.id())))?;
            outlier_scores(&layer.weight, norms)
        })
        .collect()
}

/// Outlier profile of every layer in `scope` (`None` for all layers), each
/// layer thresholded against its own mean score.
pub fn compute_lod(g: &ModelGraph, t: &ActivationTrace, m: f64, scope: Option<ComponentTag>) -> Result<LayerOutlierProfile> {
    check_threshold(m)?;
    let entries = scores_in_scope(g, t, scope)?
        .into_iter()
        .map(|s| OutlierEntry {
            ratio: ratio_above(&s.scores, s.mean_score, m),
            layer_id: s.layer_id,
        })
        .collect();
    Ok(LayerOutlierProfile { entries, threshold: m })
}

/// Like [`compute_lod`], but every layer is thresholded against one mean
/// score pooled over all in-scope weights.
pub fn compute_lod_pooled(
    g: &ModelGraph,
    t: &ActivationTrace,
    m: f64,
    scope: Option<ComponentTag>,
) -> Result<LayerOutlierProfile> {
    check_threshold(m)?;
    let all = scores_in_scope(g, t, scope)?;
    let total: usize = all.iter().map(|s| s.scores.len()).sum();
    let sum: f64 = all.iter().flat_map(|s| s.scores.iter()).sum();
    let pooled_mean = if total == 0 { 0.0 } else { sum / total as f64 };
    let entries = all
        .into_iter()
        .map(|s| OutlierEntry {
            ratio: ratio_above(&s.scores, pooled_mean, m),
            layer_id: s.layer_id,
        })
        .collect();
    Ok(LayerOutlierProfile { entries, threshold: m })
}

/// Provenance written into the LOD export header.
#[derive(Debug, Clone, PartialEq)]
pub struct LodSource {
    pub regime: Regime,
    pub seed: u64,
    pub samples: usize,
}

/// Header line with `M` and calibration provenance, then `layer_id TAB D`
/// per layer.
pub fn lod_to_text(profile: &LayerOutlierProfile, source: &LodSource) -> String {
    let mut out = format!(
        "# M={} regime={} seed={} samples={}\n",
        profile.threshold, source.regime, source.seed, source.samples
    );
    for e in &profile.entries {
        let _ = writeln!(out, "{}\t{}", e.layer_id, e.ratio);
    }
    out
}

pub fn parse_lod(text: &str) -> Result<(LayerOutlierProfile, LodSource)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|h| h.strip_prefix("# "))
        .ok_or_else(|| Error::format(0, "missing LOD header"))?;
    let mut threshold = None;
    let mut regime = None;
    let mut seed = None;
    let mut samples = None;
    for kv in header.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::format(0, format!("bad header field `{kv}`")))?;
        let bad = |_| Error::format(0, format!("bad value for `{k}`"));
        match k {
            "M" => threshold = Some(v.parse::<f64>().map_err(|_| Error::format(0, "bad M"))?),
            "regime" => regime = Some(v.parse::<Regime>()?),
            "seed" => seed = Some(v.parse::<u64>().map_err(bad)?),
            "samples" => samples = Some(v.parse::<usize>().map_err(bad)?),
            _ => {}
        }
    }
    let mut entries = Vec::new();
    let mut offset = text.find('\n').map_or(text.len(), |p| p + 1);
    for line in lines {
        let (id, d) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(offset, "expected `layer_id TAB D`"))?;
        let ratio = d.parse::<f64>().map_err(|_| Error::format(offset, "bad outlier ratio"))?;
        entries.push(OutlierEntry {
            layer_id: id.to_owned(),
            ratio,
        });
        offset += line.len() + 1;
    }
    let missing = |what: &str| Error::format(0, format!("LOD header lacks {what}"));
    Ok((
        LayerOutlierProfile {
            entries,
            threshold: threshold.ok_or_else(|| missing("M"))?,
        },
        LodSource {
            regime: regime.ok_or_else(|| missing("regime"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            samples: samples.ok_or_else(|| missing("samples"))?,
        },
    ))
}
