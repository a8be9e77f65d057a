//! Dense row-major storage, binary masks, and the small numerical kernels
//! the rest of the crate is built from.
//!
//! Everything is `f64`. Pruned weights are stored as explicit zeros, so a
//! masked [`WeightMatrix`] has exactly the same layout as a dense one.

use crate::error::{Error, Result};

/// A dense row-major matrix of `f64`.
///
/// Used for activation batches (one sample per row) and layer outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::structural(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from nested rows. All rows must have the same width.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::structural(format!(
                    "row {i} has width {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::structural(format!(
                "cannot stack width {} onto width {}",
                other.cols, self.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }
}

/// Weights of one prunable layer, `rows = C_out`, `cols = C_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    layer_id: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(layer_id: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        let layer_id = layer_id.into();
        if rows == 0 || cols == 0 {
            return Err(Error::structural(format!(
                "layer `{layer_id}` has zero-sized weight {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::structural(format!(
                "layer `{layer_id}` declares {rows}x{cols} but has {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { layer: layer_id });
        }
        Ok(Self {
            layer_id,
            rows,
            cols,
            values,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(layer_id: impl Into<String>, rows: &[R]) -> Result<Self> {
        let m = Matrix::from_rows(rows)?;
        Self::new(layer_id, m.rows, m.cols, m.data)
    }

    pub fn identity(layer_id: impl Into<String>, n: usize) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Self::new(layer_id, n, n, values).expect("identity is well formed")
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Returns a copy with every value multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            layer_id: self.layer_id.clone(),
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn zero_count(&self) -> usize {
        self.values.iter().filter(|v| **v == 0.0).count()
    }
}

/// Keep/prune bits for one layer; `true` keeps the weight.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PruneMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl PruneMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::structural(format!(
                "mask has {} bits, expected {rows}x{cols}",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn all_true(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn all_false(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn pruned_count(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    /// Fraction of pruned (false) bits.
    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.pruned_count() as f64 / self.bits.len() as f64
        }
    }
}

/// Per-input-channel L2 norms of a layer's input over calibration data.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationNorms {
    pub layer_id: String,
    pub norms: Vec<f64>,
    pub sample_count: usize,
}

/// Running sum of squares per column.
///
/// Norms are only square-rooted in [`NormAccumulator::finish`], so the result
/// does not depend on how the samples were split into batches.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAccumulator {
    sum_sq: Vec<f64>,
    samples: usize,
}

impl NormAccumulator {
    pub fn new(width: usize) -> Self {
        Self {
            sum_sq: vec![0.0; width],
            samples: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.sum_sq.len()
    }

    pub fn update(&mut self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.sum_sq.len() {
            return Err(Error::structural(format!(
                "batch width {} does not match accumulator width {}",
                batch.cols(),
                self.sum_sq.len()
            )));
        }
        for r in 0..batch.rows() {
            for (acc, x) in self.sum_sq.iter_mut().zip(batch.row(r)) {
                *acc += x * x;
            }
        }
        self.samples += batch.rows();
        Ok(())
    }

    pub fn finish(self, layer_id: impl Into<String>) -> ActivationNorms {
        ActivationNorms {
            layer_id: layer_id.into(),
            norms: self.sum_sq.into_iter().map(f64::sqrt).collect(),
            sample_count: self.samples,
        }
    }
}

/// Inner product of two equal-length slices, accumulated in four
/// interleaved lanes so the compiler can vectorise it. The summation order
/// is fixed, so results are reproducible.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Zeroes every weight whose mask bit is false. `w` is left untouched.
pub fn apply_mask(w: &WeightMatrix, m: &PruneMask) -> Result<WeightMatrix> {
    if w.rows != m.rows || w.cols != m.cols {
        return Err(Error::structural(format!(
            "mask {}x{} does not match layer `{}` {}x{}",
            m.rows, m.cols, w.layer_id, w.rows, w.cols
        )));
    }
    let values = w
        .values
        .iter()
        .zip(&m.bits)
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect();
    Ok(WeightMatrix {
        layer_id: w.layer_id.clone(),
        rows: w.rows,
        cols: w.cols,
        values,
    })
}

/// `norms[j] = sqrt(sum_s batch[s, j]^2)` over all samples of `batch`.
pub fn column_l2_norms(layer_id: impl Into<String>, batch: &Matrix) -> Result<ActivationNorms> {
    if batch.rows() == 0 {
        return Err(Error::precondition("column norms of an empty batch"));
    }
    if !batch.is_finite() {
        return Err(Error::precondition("batch contains non-finite values"));
    }
    let mut acc = NormAccumulator::new(batch.cols());
    acc.update(batch)?;
    Ok(acc.finish(layer_id))
}

/// Indices of the `k` smallest scores, in ascending index order.
///
/// Ties are broken toward the lower index, so the result is a pure function
/// of its inputs.
pub fn select_smallest_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::precondition(format!(
            "cannot select {k} of {} scores",
            scores.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*a].total_cmp(&scores[*b]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}
