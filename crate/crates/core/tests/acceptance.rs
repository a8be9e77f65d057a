//! Acceptance suite, built without the libtest harness so its report is
//! always printed. Criteria run in sequence because timings are only
//! meaningful without other tests competing for the CPU. Exits non-zero if
//! any hard criterion failed.

use std::time::{Duration, Instant};

use lodprune::allocation::{
    allocate, allocate_scoped, allocate_uniform, match_budget, Allocation, LayerSize, PruningConfig, SparsityPlan,
    SPARSITY_GRID,
};
use lodprune::calibration::{collect_norms, CalibrationSet, Regime, ABLATION_SAMPLE_COUNTS};
use lodprune::eval::{Harness, Method, SweepGrid, ToyTask};
use lodprune::fixture::default_graph;
use lodprune::graph::{decode_model, encode_model, Activation, ComponentTag, Layer, ModelGraph};
use lodprune::outlier::{compute_lod, layer_outlier_ratio, outlier_scores, LayerOutlierProfile, OutlierEntry};
use lodprune::prune::{build_mask, ComparisonGroup, ImportanceMetric};
use lodprune::tensor::{ActivationNorms, WeightMatrix};
use lodprune::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_weights(r: &mut ChaCha8Rng, id: &str, rows: usize, cols: usize) -> WeightMatrix {
    let values = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
    WeightMatrix::new(id, rows, cols, values).unwrap()
}

fn random_norms(r: &mut ChaCha8Rng, id: &str, cols: usize) -> ActivationNorms {
    ActivationNorms {
        layer_id: id.into(),
        norms: (0..cols)
            .map(|_| if r.random_bool(0.1) { 0.0 } else { r.random_range(0.0..10.0) })
            .collect(),
        sample_count: 1,
    }
}

fn uniform_entry(w: &WeightMatrix, s: f64) -> lodprune::allocation::PlanEntry {
    let cfg = PruningConfig::default().with_allocation(Allocation::Uniform).with_sparsity(s);
    let sizes = [LayerSize {
        layer_id: w.layer_id().into(),
        size: w.len(),
    }];
    allocate_uniform(&cfg, &sizes).unwrap().entries.remove(0)
}

fn criterion_1() -> Outcome {
    let mut r = rng(1);
    let mut ratio_mismatch = 0;
    let mut score_mismatch = 0;
    for k in 0..100 {
        let (rows, cols) = (r.random_range(1..=16), r.random_range(1..=16));
        let mut w = random_weights(&mut r, "l", rows, cols);
        if k % 10 == 0 {
            w = w.scaled(0.0);
        }
        let a = random_norms(&mut r, "l", cols);
        let s = outlier_scores(&w, &a).unwrap();
        for i in 0..rows {
            for j in 0..cols {
                if s.scores[i * cols + j].to_bits() != (a.norms[j] * w.get(i, j).abs()).to_bits() {
                    score_mismatch += 1;
                }
            }
        }
        let mut sum = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                sum += a.norms[j] * w.get(i, j).abs();
            }
        }
        let mean = sum / (rows * cols) as f64;
        for m in [3.0, 5.0, 7.0, 10.0] {
            let mut count = 0;
            for i in 0..rows {
                for j in 0..cols {
                    if mean != 0.0 && a.norms[j] * w.get(i, j).abs() > m * mean {
                        count += 1;
                    }
                }
            }
            let oracle = count as f64 / (rows * cols) as f64;
            if layer_outlier_ratio(&s, m).unwrap() != oracle {
                ratio_mismatch += 1;
            }
        }
    }
    outcome(
        ratio_mismatch == 0 && score_mismatch == 0,
        format!("100 layers x 4 thresholds; ratio mismatches {ratio_mismatch}, score mismatches {score_mismatch}"),
    )
}

fn profile(ratios: &[f64]) -> LayerOutlierProfile {
    let ids: Vec<String> = (0..ratios.len()).map(|i| format!("l{i}")).collect();
    LayerOutlierProfile {
        entries: ids
            .iter()
            .zip(ratios)
            .map(|(id, d)| OutlierEntry {
                layer_id: id.clone(),
                ratio: *d,
            })
            .collect(),
        threshold: 5.0,
    }
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let mut failures = Vec::new();
    for case in 0..1000 {
        let n = r.random_range(1..=12);
        let ratios: Vec<f64> = (0..n).map(|_| r.random_range(0.0..0.3)).collect();
        let p = profile(&ratios);
        let sizes: Vec<LayerSize> = p
            .entries
            .iter()
            .map(|e| LayerSize {
                layer_id: e.layer_id.clone(),
                size: r.random_range(1..=5000),
            })
            .collect();
        let lambda = if case % 10 == 0 { 0.0 } else { r.random_range(0.0..0.2) };
        let s = r.random_range(lambda..=1.0 - lambda);
        let cfg = PruningConfig::default().with_sparsity(s).with_lambda(lambda);
        let plan = match allocate(&p, &cfg, &sizes) {
            Ok(plan) => plan,
            Err(e) => {
                failures.push(format!("case {case}: {e}"));
                continue;
            }
        };
        let (lo, hi) = (s - lambda, s + lambda);
        let sp = plan.sparsities();
        if sp.iter().any(|v| *v < lo || *v > hi) {
            failures.push(format!("case {case}: clamp violated"));
        }
        let total: f64 = sizes.iter().map(|l| l.size as f64).sum();
        let mean = sp.iter().zip(&sizes).map(|(v, l)| v * l.size as f64).sum::<f64>() / total;
        if (mean - s).abs() > 1e-9 {
            failures.push(format!("case {case}: weighted mean {mean} vs {s}"));
        }
        for i in 0..n {
            for j in 0..n {
                if ratios[i] > ratios[j] && sp[i] > sp[j] {
                    failures.push(format!("case {case}: layers {i},{j} not anti-monotone"));
                }
            }
        }
        if lambda == 0.0 && sp.iter().any(|v| *v != s) {
            failures.push(format!("case {case}: lambda=0 not uniform"));
        }
    }
    let p = profile(&[0.2, 0.0]);
    let sizes = [
        LayerSize {
            layer_id: "l0".into(),
            size: 100,
        },
        LayerSize {
            layer_id: "l1".into(),
            size: 100,
        },
    ];
    let worked = allocate(&p, &PruningConfig::default().with_sparsity(0.5).with_lambda(0.1), &sizes)
        .map(|plan| plan.sparsities())
        .ok();
    if worked.as_deref() != Some(&[0.4, 0.6][..]) {
        failures.push(format!("worked example gave {worked:?}"));
    }
    outcome(
        failures.is_empty(),
        format!(
            "1000 profiles + worked example [0.4, 0.6]; {} violations{}",
            failures.len(),
            failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut count_mismatch = 0;
    let mut nondeterministic = 0;
    for k in 0..500 {
        let (rows, cols) = (r.random_range(1..=24), r.random_range(1..=24));
        let mut w = random_weights(&mut r, "l", rows, cols);
        if k % 3 == 0 {
            // coarse values force ties
            let v = w.values().iter().map(|v| (v * 3.0).round()).collect();
            w = WeightMatrix::new("l", rows, cols, v).unwrap();
        }
        let norms = random_norms(&mut r, "l", cols);
        let metric = if r.random_bool(0.5) { ImportanceMetric::Magnitude } else { ImportanceMetric::Wanda };
        let group = if r.random_bool(0.5) { ComparisonGroup::PerRow } else { ComparisonGroup::PerLayer };
        let entry = uniform_entry(&w, r.random_range(0.0..=1.0));
        let first = build_mask(&w, &entry, metric, group, Some(&norms)).unwrap();
        if first.pruned_count() != entry.pruned_count {
            count_mismatch += 1;
        }
        let second = build_mask(&w, &entry, metric, group, Some(&norms)).unwrap();
        if first != second {
            nondeterministic += 1;
        }
    }
    outcome(
        count_mismatch == 0 && nondeterministic == 0,
        format!("500 triples; count mismatches {count_mismatch}, nondeterministic masks {nondeterministic}"),
    )
}

fn criterion_4(g: &ModelGraph) -> Outcome {
    let mut r = rng(4);
    let mut changed = Vec::new();
    let ids: Vec<String> = g.layer_ids().map(str::to_owned).collect();
    for seed in 0..50u64 {
        let id = &ids[r.random_range(0..ids.len())];
        let s = r.random_range(0.05..0.95);
        let calib = CalibrationSet::generate(Regime::Scenario, 32, seed).unwrap();
        let mut reference = None;
        for c in [0.01, 1.0, 100.0] {
            let scaled = g
                .with_weights(vec![g.layer(id).unwrap().weight.scaled(c)])
                .unwrap();
            let trace = collect_norms(&scaled, &calib).unwrap();
            let norms = trace.get(id).unwrap();
            let w = &scaled.layer(id).unwrap().weight;
            let d = layer_outlier_ratio(&outlier_scores(w, norms).unwrap(), 5.0).unwrap();
            let entry = uniform_entry(w, s);
            let masks: Vec<_> = [ImportanceMetric::Magnitude, ImportanceMetric::Wanda]
                .into_iter()
                .flat_map(|m| [ComparisonGroup::PerRow, ComparisonGroup::PerLayer].map(|gr| (m, gr)))
                .map(|(m, gr)| build_mask(w, &entry, m, gr, Some(norms)).unwrap())
                .collect();
            match &reference {
                None => reference = Some((d, masks)),
                Some((d0, m0)) => {
                    if *d0 != d || *m0 != masks {
                        changed.push(format!("seed {seed} layer {id} c={c}"));
                    }
                }
            }
        }
    }
    outcome(
        changed.is_empty(),
        format!(
            "50 seeds x c in {{0.01, 1, 100}}; {} changed{}",
            changed.len(),
            changed.first().map(|c| format!(", first: {c}")).unwrap_or_default()
        ),
    )
}

fn criterion_5(g: &ModelGraph) -> Outcome {
    let limit = g.len();
    let mut lines = Vec::new();
    let mut pass = true;
    for s in [0.3, 0.4] {
        let trace = collect_norms(g, &CalibrationSet::generate(Regime::Scenario, 128, 0).unwrap()).unwrap();
        let plan = |a| allocate_scoped(g, &trace, &PruningConfig::default().with_sparsity(s).with_allocation(a)).unwrap();
        let reference = plan(Allocation::OwledLmOnly);
        let plans: Vec<SparsityPlan> = vec![
            reference.clone(),
            match_budget(&reference, &plan(Allocation::OwledSeparate)).unwrap(),
            match_budget(&reference, &plan(Allocation::OwledGlobal)).unwrap(),
        ];
        let totals: Vec<usize> = plans.iter().map(SparsityPlan::total_pruned).collect();
        let spread = totals.iter().max().unwrap() - totals.iter().min().unwrap();
        pass &= spread <= limit;
        lines.push(format!("S={s} totals {totals:?} spread {spread}"));
    }
    outcome(pass, format!("{} (limit L={limit})", lines.join("; ")))
}

fn criterion_6(g: &ModelGraph, task: &ToyTask) -> (Outcome, Outcome, Duration) {
    let harness = Harness::new(g, task);
    let start = Instant::now();
    let result = harness.run_sweep(&SweepGrid::default()).unwrap();
    let elapsed = start.elapsed();
    let mse = |m: Method, s: f64| {
        let allocation = if matches!(m, Method::Owl | Method::Owled) { Allocation::OwledLmOnly } else { Allocation::Uniform };
        result.row(m, allocation, s).unwrap().mse()
    };
    let failed = result.cells.iter().filter(|c| c.error.is_some()).count();
    let mut notes = Vec::new();
    let mut monotone = true;
    for m in [Method::Magnitude, Method::Wanda, Method::Owl, Method::Owled] {
        let curve: Vec<f64> = SPARSITY_GRID.iter().map(|&s| mse(m, s).mean).collect();
        if curve.windows(2).any(|w| w[1] < w[0]) {
            monotone = false;
            notes.push(format!("{m} not monotone: {curve:?}"));
        }
    }
    let (mag, wanda) = (mse(Method::Magnitude, 0.5).mean, mse(Method::Wanda, 0.5).mean);
    let hard = outcome(
        failed == 0 && monotone && mag > wanda,
        format!(
            "(a) monotone in S for all methods: {monotone}; (b) S=0.5 MAGNITUDE {mag:.4e} > WANDA {wanda:.4e}: {}; failed cells {failed}{}",
            mag > wanda,
            if notes.is_empty() { String::new() } else { format!("; {}", notes.join("; ")) }
        ),
    );
    let mut ordering = Vec::new();
    let mut ordered = true;
    for s in [0.3, 0.4] {
        let (o, w) = (mse(Method::Owled, s), mse(Method::Wanda, s));
        let ok = o.mean <= 1.05 * w.mean;
        ordered &= ok;
        ordering.push(format!(
            "S={s} OWLED {:.4e} ±{:.1e} vs WANDA {:.4e} ±{:.1e} (x1.05 = {:.4e}) {}",
            o.mean,
            o.ci95,
            w.mean,
            w.ci95,
            1.05 * w.mean,
            if ok { "ok" } else { "above" }
        ));
    }
    (hard, outcome(ordered, ordering.join("; ")), elapsed)
}

fn criterion_7(g: &ModelGraph, task: &ToyTask) -> Outcome {
    let mut max_dist: f64 = 0.0;
    for seed in 0..5 {
        let lod = |regime| {
            let trace = collect_norms(g, &CalibrationSet::generate(regime, 128, seed).unwrap()).unwrap();
            compute_lod(g, &trace, 5.0, None).unwrap()
        };
        max_dist = max_dist.max(lod(Regime::Scenario).linf_distance(&lod(Regime::Generic)).unwrap());
    }
    let harness = Harness::new(g, task);
    let seeds: Vec<u64> = (0..5).collect();
    let run = || {
        harness
            .run_calibration_ablation(&ABLATION_SAMPLE_COUNTS, 0.4, &seeds, &SweepGrid::default())
            .unwrap()
    };
    let (a, b) = (run(), run());
    let deterministic = a.cells == b.cells && a.cells_csv().unwrap() == b.cells_csv().unwrap();
    let complete = a.cells.len() == ABLATION_SAMPLE_COUNTS.len() * seeds.len()
        && a.cells.iter().all(|c| c.error.is_none())
        && a.aggregate().len() == ABLATION_SAMPLE_COUNTS.len();
    outcome(
        max_dist > 0.0 && deterministic && complete,
        format!("max L-inf distance over 5 seeds {max_dist:.4}; calib sweep complete {complete}, deterministic {deterministic}"),
    )
}

fn random_graph(r: &mut ChaCha8Rng) -> ModelGraph {
    let depth = r.random_range(2..=6);
    let split = r.random_range(1..depth);
    let input = r.random_range(1..=12);
    let mut width = input;
    let mut layers = Vec::new();
    for k in 0..depth {
        let rows = r.random_range(1..=12);
        let values = (0..rows * width)
            .map(|_| match r.random_range(0..10) {
                0 => -0.0,
                1 => f64::MIN_POSITIVE / 4.0,
                2 => f64::MAX,
                _ => r.random_range(-1e3..1e3),
            })
            .collect();
        let tag = if k < split { ComponentTag::Encoder } else { ComponentTag::Lm };
        let weight = WeightMatrix::new(format!("layer-{k}"), rows, width, values).unwrap();
        let bias = r.random_bool(0.5).then(|| (0..rows).map(|_| r.random_range(-1.0..1.0)).collect());
        let act = if r.random_bool(0.5) { Activation::Relu } else { Activation::Identity };
        layers.push(Layer::new(tag, weight, bias, act).unwrap());
        width = rows;
    }
    ModelGraph::new(input, layers).unwrap()
}

fn raw_layer(out: &mut Vec<u8>, id: &str, rows: u32, cols: u32) {
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id.as_bytes());
    out.extend_from_slice(&[ComponentTag::Lm.code(), Activation::Identity.code()]);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.push(0);
    for _ in 0..rows * cols {
        out.extend_from_slice(&1.0f64.to_le_bytes());
    }
}

fn criterion_8() -> Outcome {
    let mut r = rng(8);
    let mut not_exact = 0;
    let mut truncations_accepted = 0;
    for k in 0..100 {
        let g = random_graph(&mut r);
        let bytes = encode_model(&g);
        match decode_model(&bytes) {
            Ok(back) => {
                let same_bits = back.layers().iter().zip(g.layers()).all(|(a, b)| {
                    a.weight.values().iter().zip(b.weight.values()).all(|(x, y)| x.to_bits() == y.to_bits())
                });
                if back != g || !same_bits || encode_model(&back) != bytes {
                    not_exact += 1;
                }
            }
            Err(_) => not_exact += 1,
        }
        let cuts: Vec<usize> = if k < 5 { (0..bytes.len()).collect() } else { vec![r.random_range(0..bytes.len())] };
        for cut in cuts {
            if !matches!(decode_model(&bytes[..cut]), Err(Error::Format { .. })) {
                truncations_accepted += 1;
            }
        }
    }
    let mut bad = Vec::new();
    bad.extend_from_slice(b"LODT");
    bad.extend_from_slice(&1u32.to_le_bytes());
    bad.extend_from_slice(&2u32.to_le_bytes());
    raw_layer(&mut bad, "a", 3, 2);
    raw_layer(&mut bad, "b", 1, 4);
    let inconsistent_rejected = matches!(decode_model(&bad), Err(Error::Format { .. }));
    outcome(
        not_exact == 0 && truncations_accepted == 0 && inconsistent_rejected,
        format!(
            "100 graphs; inexact round trips {not_exact}, truncations accepted {truncations_accepted}, dimension-inconsistent rejected {inconsistent_rejected}"
        ),
    )
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn main() {
    let g = default_graph().unwrap();
    let task = ToyTask::default_for(&g).unwrap();
    let mut rows: Vec<(&str, Outcome, Duration, Duration)> = Vec::new();
    let s = Duration::from_secs;

    let (o, t) = timed(criterion_1);
    rows.push(("1 outlier-ratio oracle", o, t, s(1)));
    let (o, t) = timed(criterion_2);
    rows.push(("2 allocation invariants", o, t, s(1)));
    let (o, t) = timed(criterion_3);
    rows.push(("3 mask exactness", o, t, s(2)));
    let (o, t) = timed(|| criterion_4(&g));
    rows.push(("4 scale invariance", o, t, Duration::MAX));
    let (o, t) = timed(|| criterion_5(&g));
    rows.push(("5 budget matching", o, t, s(1)));
    let (hard, ordering, t) = criterion_6(&g, &task);
    rows.push(("6 trend (a)+(b)", hard, t, s(30)));
    let (o, t) = timed(|| criterion_7(&g, &task));
    rows.push(("7 calibration regime", o, t, s(10)));
    let (o, t) = timed(criterion_8);
    rows.push(("8 archive round trip", o, t, s(2)));

    let mut failed = Vec::new();
    for (name, o, t, limit) in &rows {
        let in_time = t <= limit;
        let pass = o.pass && in_time;
        let budget = if *limit == Duration::MAX { String::new() } else { format!(" / {limit:.0?}") };
        println!(
            "criterion {name}: {} [{t:.2?}{budget}] {}",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !pass {
            failed.push(*name);
        }
    }
    println!(
        "criterion 6 (c) ordering, reported only: {} {}",
        if ordering.pass { "PASS" } else { "FAIL" },
        ordering.detail
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
