//! The driving-style toy task used to score pruned models.

use crate::calibration::{stream_rng, Scenario, EVAL_STREAM};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::prune::mean_squared_difference;
use crate::tensor::Matrix;

/// Output layout: car count, pedestrian count, three light logits
/// (red, green, none), steering.
pub const OUTPUT_WIDTH: usize = 6;
pub const N_EVAL: usize = 1000;
pub const EVAL_SEED: u64 = 0;

/// Regression/classification targets of one scenario, laid out like the
/// model output.
pub fn targets(s: &Scenario) -> [f64; OUTPUT_WIDTH] {
    let mut t = [0.0; OUTPUT_WIDTH];
    t[0] = s.cars.len() as f64;
    t[1] = s.pedestrians.len() as f64;
    t[2 + s.light.class()] = 1.0;
    t[5] = s.steering();
    t
}

/// Metric vector of one model on the evaluation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mae_car: f64,
    pub mae_ped: f64,
    pub acc_light: f64,
    pub mae_steer: f64,
    /// Mean squared difference from the dense model's outputs.
    pub mse: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["mae_car", "mae_ped", "acc_light", "mae_steer", "mse"];

    pub fn values(&self) -> [f64; 5] {
        [self.mae_car, self.mae_ped, self.acc_light, self.mae_steer, self.mse]
    }
}

/// Evaluation scenarios, their ground truth, and the dense model's outputs.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub inputs: Matrix,
    pub targets: Vec<[f64; OUTPUT_WIDTH]>,
    pub dense_outputs: Matrix,
    /// Most frequent light class in the eval set; wins exact argmax ties.
    pub majority_light: usize,
}

impl ToyTask {
    /// `n` scenarios from the evaluation stream, which no calibration seed
    /// can reproduce.
    pub fn generate(dense: &ModelGraph, n: usize, seed: u64) -> Result<Self> {
        if dense.output_dim() != OUTPUT_WIDTH {
            return Err(Error::structural(format!(
                "task expects {OUTPUT_WIDTH} outputs, model has {}",
                dense.output_dim()
            )));
        }
        let mut rng = stream_rng(seed, EVAL_STREAM);
        let scenarios: Vec<Scenario> = (0..n).map(|_| Scenario::sample(&mut rng)).collect();
        let inputs = Matrix::new(
            n,
            dense.input_dim(),
            scenarios.iter().flat_map(|s| s.encode()).collect(),
        )?;
        let targets: Vec<_> = scenarios.iter().map(targets).collect();
        let mut counts = [0usize; 3];
        for s in &scenarios {
            counts[s.light.class()] += 1;
        }
        let majority_light = (0..3).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
        let dense_outputs = dense.predict(&inputs)?;
        Ok(Self {
            inputs,
            targets,
            dense_outputs,
            majority_light,
        })
    }

    pub fn default_for(dense: &ModelGraph) -> Result<Self> {
        Self::generate(dense, N_EVAL, EVAL_SEED)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Fraction of eval scenarios whose light class is the majority class.
    pub fn majority_rate(&self) -> f64 {
        let hits = self.targets.iter().filter(|t| t[2 + self.majority_light] == 1.0).count();
        hits as f64 / self.len() as f64
    }

    fn light_prediction(&self, logits: &[f64]) -> usize {
        let best = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if logits[self.majority_light] == best {
            return self.majority_light;
        }
        logits.iter().position(|v| *v == best).unwrap_or(0)
    }
}

pub fn score(g: &ModelGraph, task: &ToyTask) -> Result<Metrics> {
    if g.output_dim() != OUTPUT_WIDTH || g.input_dim() != task.inputs.cols() {
        return Err(Error::structural(format!(
            "model maps {} -> {}, task needs {} -> {OUTPUT_WIDTH}",
            g.input_dim(),
            g.output_dim(),
            task.inputs.cols()
        )));
    }
    let out = g.predict(&task.inputs)?;
    let n = task.len() as f64;
    let (mut car, mut ped, mut steer, mut correct) = (0.0, 0.0, 0.0, 0usize);
    for (k, t) in task.targets.iter().enumerate() {
        let y = out.row(k);
        car += (y[0] - t[0]).abs();
        ped += (y[1] - t[1]).abs();
        steer += (y[5] - t[5]).abs();
        if t[2 + task.light_prediction(&y[2..5])] == 1.0 {
            correct += 1;
        }
    }
    Ok(Metrics {
        mae_car: car / n,
        mae_ped: ped / n,
        acc_light: correct as f64 / n,
        mae_steer: steer / n,
        mse: mean_squared_difference(&out, &task.dense_outputs),
    })
}
