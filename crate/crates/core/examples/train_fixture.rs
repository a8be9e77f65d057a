//! Trains the toy driving model shipped as `fixtures/driving.lodt`.
//!
//! The library never trains; this program exists so the committed fixture
//! can be regenerated:
//!
//! ```text
//! cargo run --release -p lodprune --example train_fixture -- crates/core/fixtures/driving.lodt
//! ```

use lodprune::calibration::{Scenario, SCENARIO_WIDTH};
use lodprune::eval::{targets, OUTPUT_WIDTH};
use lodprune::graph::{save_model, Activation, ComponentTag, Layer, ModelGraph};
use lodprune::tensor::WeightMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const TRAIN_SAMPLES: usize = 20_000;
const EPOCHS: usize = 40;
const BATCH: usize = 64;
const LR: f64 = 1e-3;
const LM_WIDTH: usize = 100;
/// Loss weight per output; steering is small in magnitude.
const OUTPUT_WEIGHT: [f64; OUTPUT_WIDTH] = [1.0, 1.0, 1.0, 1.0, 1.0, 4.0];

struct Dense {
    w: Vec<f64>,
    b: Vec<f64>,
    rows: usize,
    cols: usize,
    relu: bool,
    tag: ComponentTag,
    // Adam state
    mw: Vec<f64>,
    vw: Vec<f64>,
    mb: Vec<f64>,
    vb: Vec<f64>,
}

impl Dense {
    fn new(rows: usize, cols: usize, relu: bool, tag: ComponentTag, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).unwrap();
        Self {
            w: (0..rows * cols).map(|_| normal.sample(rng)).collect(),
            b: vec![0.0; rows],
            rows,
            cols,
            relu,
            tag,
            mw: vec![0.0; rows * cols],
            vw: vec![0.0; rows * cols],
            mb: vec![0.0; rows],
            vb: vec![0.0; rows],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|i| {
                let z: f64 = self.w[i * self.cols..(i + 1) * self.cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b[i];
                if self.relu {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect()
    }
}

fn adam(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: i32) {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let c1 = 1.0 - f64::powi(b1, t);
    let c2 = 1.0 - f64::powi(b2, t);
    for k in 0..p.len() {
        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
        p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
    }
}

fn main() {
    let out_path = std::env::args().nth(1).unwrap_or_else(|| "crates/core/fixtures/driving.lodt".into());
    let mut rng = ChaCha8Rng::seed_from_u64(0x0F1C_5EED);
    rng.set_stream(99);

    // The encoder's second layer projects into the LM width, so every LM
    // layer but the head is square.
    let shape: [(usize, bool, ComponentTag); 8] = [
        (8, true, ComponentTag::Encoder),
        (LM_WIDTH, true, ComponentTag::Encoder),
        (LM_WIDTH, true, ComponentTag::Lm),
        (LM_WIDTH, true, ComponentTag::Lm),
        (LM_WIDTH, true, ComponentTag::Lm),
        (LM_WIDTH, true, ComponentTag::Lm),
        (LM_WIDTH, true, ComponentTag::Lm),
        (OUTPUT_WIDTH, false, ComponentTag::Lm),
    ];
    let mut width = SCENARIO_WIDTH;
    let mut net: Vec<Dense> = shape
        .iter()
        .map(|&(rows, relu, tag)| {
            let d = Dense::new(rows, width, relu, tag, &mut rng);
            width = rows;
            d
        })
        .collect();

    let data: Vec<([f64; SCENARIO_WIDTH], [f64; OUTPUT_WIDTH])> = (0..TRAIN_SAMPLES)
        .map(|_| {
            let s = Scenario::sample(&mut rng);
            (s.encode(), targets(&s))
        })
        .collect();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..EPOCHS {
        order.shuffle(&mut rng);
        let lr = LR * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / EPOCHS as f64).cos());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(BATCH) {
            let mut gw: Vec<Vec<f64>> = net.iter().map(|l| vec![0.0; l.w.len()]).collect();
            let mut gb: Vec<Vec<f64>> = net.iter().map(|l| vec![0.0; l.b.len()]).collect();
            for &k in batch {
                let (x, t) = &data[k];
                let mut acts = vec![x.to_vec()];
                for l in &net {
                    let next = l.forward(acts.last().unwrap());
                    acts.push(next);
                }
                let y = acts.last().unwrap();
                let mut delta: Vec<f64> = (0..OUTPUT_WIDTH)
                    .map(|j| {
                        let e = y[j] - t[j];
                        epoch_loss += OUTPUT_WEIGHT[j] * e * e;
                        2.0 * OUTPUT_WEIGHT[j] * e / batch.len() as f64
                    })
                    .collect();
                for (li, l) in net.iter().enumerate().rev() {
                    let out = &acts[li + 1];
                    if l.relu {
                        for (d, o) in delta.iter_mut().zip(out) {
                            if *o <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    let input = &acts[li];
                    let mut prev = vec![0.0; l.cols];
                    for i in 0..l.rows {
                        gb[li][i] += delta[i];
                        for j in 0..l.cols {
                            gw[li][i * l.cols + j] += delta[i] * input[j];
                            prev[j] += l.w[i * l.cols + j] * delta[i];
                        }
                    }
                    delta = prev;
                }
            }
            step += 1;
            for (li, l) in net.iter_mut().enumerate() {
                adam(&mut l.w, &gw[li], &mut l.mw, &mut l.vw, lr, step);
                adam(&mut l.b, &gb[li], &mut l.mb, &mut l.vb, lr, step);
            }
        }
        eprintln!("epoch {epoch:>2}: loss {:.5}", epoch_loss / data.len() as f64);
    }

    let mut enc = 0;
    let mut lm = 0;
    let layers = net
        .iter()
        .map(|l| {
            let id = match l.tag {
                ComponentTag::Encoder => {
                    enc += 1;
                    format!("enc.{}", enc - 1)
                }
                ComponentTag::Lm => {
                    lm += 1;
                    format!("lm.{}", lm - 1)
                }
            };
            let act = if l.relu { Activation::Relu } else { Activation::Identity };
            Layer::new(l.tag, WeightMatrix::new(id, l.rows, l.cols, l.w.clone()).unwrap(), Some(l.b.clone()), act).unwrap()
        })
        .collect();
    let graph = ModelGraph::new(SCENARIO_WIDTH, layers).unwrap();
    save_model(&graph, &out_path).unwrap();
    eprintln!(
        "wrote {out_path}: encoder {} params, LM {} params",
        graph.parameter_count(Some(ComponentTag::Encoder)),
        graph.parameter_count(Some(ComponentTag::Lm))
    );
}
