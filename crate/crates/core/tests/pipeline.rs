//! End-to-end behaviour on the bundled fixture.

use lodprune::allocation::{allocate_scoped, allocate_uniform, layer_sizes, Allocation, PruningConfig};
use lodprune::calibration::{collect_norms, CalibrationSet, Regime};
use lodprune::eval::{score, CellConfig, Harness, Method, SweepGrid, ToyTask};
use lodprune::fixture::default_graph;
use lodprune::graph::{ComponentTag, Layer, ModelGraph};
use lodprune::outlier::compute_lod;
use lodprune::prune::{build_mask, prune_model, reconstruction_error, ComparisonGroup, ImportanceMetric};
use lodprune::tensor::{apply_mask, PruneMask, WeightMatrix};
use proptest::prelude::*;

fn fixture() -> (ModelGraph, ToyTask) {
    let g = default_graph().unwrap();
    let task = ToyTask::default_for(&g).unwrap();
    (g, task)
}

#[test]
fn uniform_half_sparsity_prunes_rounded_counts() {
    let (g, _) = fixture();
    let trace = collect_norms(&g, &CalibrationSet::generate(Regime::Scenario, 128, 0).unwrap()).unwrap();
    let cfg = PruningConfig::default().with_allocation(Allocation::Uniform).with_sparsity(0.5);
    let plan = allocate_scoped(&g, &trace, &cfg).unwrap();
    let (pruned, report) = prune_model(&g, &plan, ImportanceMetric::Wanda, ComparisonGroup::PerRow, Some(&trace)).unwrap();
    let expected: usize = g.layers().iter().map(|l| (0.5 * l.weight.len() as f64).round() as usize).sum();
    assert_eq!(report.total_pruned(), expected);
    // fixture weights are never exactly zero, so zeros are exactly the pruned entries
    let zeros: usize = pruned.layers().iter().map(|l| l.weight.zero_count()).sum();
    assert_eq!(zeros, expected);
    for (a, b) in g.layers().iter().zip(pruned.layers()) {
        assert_eq!(a.bias, b.bias);
    }
}

#[test]
fn lm_only_plan_leaves_encoder_bit_identical() {
    let (g, _) = fixture();
    let trace = collect_norms(&g, &CalibrationSet::generate(Regime::Scenario, 128, 3).unwrap()).unwrap();
    let plan = allocate_scoped(&g, &trace, &PruningConfig::default().with_sparsity(0.5)).unwrap();
    let (pruned, report) = prune_model(&g, &plan, ImportanceMetric::Wanda, ComparisonGroup::PerRow, Some(&trace)).unwrap();
    for (a, b) in g.layers_in(Some(ComponentTag::Encoder)).zip(pruned.layers_in(Some(ComponentTag::Encoder))) {
        let bits = |l: &Layer| l.weight.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(report.component_sparsity(ComponentTag::Encoder), 0.0);
    assert!((report.component_sparsity(ComponentTag::Lm) - 0.5).abs() < 1e-3);
}

#[test]
fn wanda_reconstructs_better_than_magnitude() {
    let (g, _) = fixture();
    let sizes = layer_sizes(&g, None);
    let plan = allocate_uniform(&PruningConfig::default().with_sparsity(0.3), &sizes).unwrap();
    let magnitude = prune_model(&g, &plan, ImportanceMetric::Magnitude, ComparisonGroup::PerRow, None).unwrap().0;
    let mut wins = 0;
    for seed in 0..100 {
        let calib = CalibrationSet::generate(Regime::Scenario, 128, seed).unwrap();
        let eval = CalibrationSet::generate(Regime::Scenario, 128, 1_000 + seed).unwrap();
        let trace = collect_norms(&g, &calib).unwrap();
        let wanda = prune_model(&g, &plan, ImportanceMetric::Wanda, ComparisonGroup::PerRow, Some(&trace)).unwrap().0;
        let w = reconstruction_error(&g, &wanda, &eval.samples).unwrap().total();
        let m = reconstruction_error(&g, &magnitude, &eval.samples).unwrap().total();
        if w <= m {
            wins += 1;
        }
    }
    assert!(wins >= 90, "WANDA won {wins} of 100");
}

#[test]
fn dense_only_grid_reproduces_baseline() {
    let (g, task) = fixture();
    let grid = SweepGrid {
        methods: vec![Method::Dense],
        seeds: vec![0, 1, 2],
        ..SweepGrid::default()
    };
    let result = Harness::new(&g, &task).run_sweep(&grid).unwrap();
    let baseline = score(&g, &task).unwrap();
    assert_eq!(baseline.mse, 0.0);
    assert_eq!(result.cells.len(), 3);
    for c in &result.cells {
        assert_eq!(c.metrics, Some(baseline));
        assert_eq!(c.pruned, 0);
    }
}

#[test]
fn cells_are_deterministic_and_reports_regenerate() {
    let (g, task) = fixture();
    let h = Harness::new(&g, &task);
    let cell = CellConfig {
        method: Method::Owled,
        allocation: Allocation::OwledLmOnly,
        sparsity: 0.4,
        regime: Regime::Scenario,
        samples: 64,
        seed: 5,
        lambda: 0.1,
        threshold: 5.0,
        group: ComparisonGroup::PerRow,
    };
    assert_eq!(h.run_cell(&cell), h.run_cell(&cell));

    let grid = SweepGrid {
        sparsities: vec![0.3],
        seeds: vec![0, 1],
        ..SweepGrid::default()
    };
    let (a, b) = (h.run_sweep(&grid).unwrap(), h.run_sweep(&grid).unwrap());
    assert_eq!(a.cells_csv().unwrap(), b.cells_csv().unwrap());
    assert_eq!(a.table_csv().unwrap(), b.table_csv().unwrap());
    assert_eq!(a.summary(), b.summary());
}

#[test]
fn sweep_prunes_only_the_lm() {
    let (g, task) = fixture();
    let grid = SweepGrid {
        sparsities: vec![0.3, 0.4, 0.5],
        seeds: vec![0, 1, 2],
        ..SweepGrid::default()
    };
    let result = Harness::new(&g, &task).run_sweep(&grid).unwrap();
    let pruned: Vec<_> = result.cells.iter().filter(|c| c.config.method != Method::Dense).collect();
    assert!(pruned.iter().all(|c| c.lm_sparsity > 0.0 && c.encoder_sparsity == 0.0 && c.metrics.unwrap().mse > 0.0));
}

#[test]
fn zero_weight_graph_predicts_majority_light() {
    let (g, task) = fixture();
    let layers = g
        .layers()
        .iter()
        .map(|l| {
            let w = l.weight.scaled(0.0);
            Layer::new(l.component, w, None, l.activation).unwrap()
        })
        .collect();
    let zero = ModelGraph::new(g.input_dim(), layers).unwrap();
    let m = score(&zero, &task).unwrap();
    assert_eq!(m.acc_light, task.majority_rate());
}

#[test]
fn all_true_masks_match_dense() {
    let (g, task) = fixture();
    let kept: Vec<WeightMatrix> = g
        .layers()
        .iter()
        .map(|l| apply_mask(&l.weight, &PruneMask::all_true(l.weight.rows(), l.weight.cols())).unwrap())
        .collect();
    let masked = g.with_weights(kept).unwrap();
    assert_eq!(masked, g);
    assert_eq!(score(&masked, &task).unwrap(), score(&g, &task).unwrap());
}

#[test]
fn scope_ablation_keeps_encoder_dense_under_lm_only() {
    let (g, task) = fixture();
    let result = Harness::new(&g, &task)
        .run_scope_ablation(&[0.3], &[0, 1], &SweepGrid::default())
        .unwrap();
    assert_eq!(result.cells.len(), 6);
    for c in &result.cells {
        assert!(c.error.is_none(), "{:?}", c.error);
        if c.config.allocation == Allocation::OwledLmOnly {
            assert_eq!(c.encoder_sparsity, 0.0);
        }
    }
    assert_eq!(result.notes.len(), 2);
    assert!(result.notes.iter().all(|n| n.ends_with(" EQUAL")), "{:?}", result.notes);
}

#[test]
fn calibration_size_changes_lod() {
    let g = default_graph().unwrap();
    let lod = |n, seed| {
        let trace = collect_norms(&g, &CalibrationSet::generate(Regime::Scenario, n, seed).unwrap()).unwrap();
        compute_lod(&g, &trace, 5.0, None).unwrap()
    };
    let differs = (0..5).any(|seed| lod(32, seed).linf_distance(&lod(512, seed)).unwrap() > 0.0);
    assert!(differs);
}

#[test]
fn calibration_ablation_rows_cover_every_count() {
    let (g, task) = fixture();
    let result = Harness::new(&g, &task)
        .run_calibration_ablation(&[32, 512], 0.4, &[0, 1], &SweepGrid::default())
        .unwrap();
    let rows = result.aggregate();
    assert_eq!(rows.iter().map(|r| r.samples).collect::<Vec<_>>(), vec![32, 512]);
    assert!(rows.iter().all(|r| r.failed == 0 && r.seeds == 2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_ignore_positive_scaling(
        values in prop::collection::vec(-1.0f64..1.0, 1..64),
        norms_seed in prop::collection::vec(0.01f64..4.0, 8),
        s in 0.0f64..=1.0,
        c in prop::sample::select(vec![0.01, 0.5, 3.0, 100.0]),
        per_row in any::<bool>(),
    ) {
        let cols = 8.min(values.len());
        let rows = values.len() / cols;
        let w = WeightMatrix::new("l", rows, cols, values[..rows * cols].to_vec()).unwrap();
        let norms = lodprune::tensor::ActivationNorms { layer_id: "l".into(), norms: norms_seed[..cols].to_vec(), sample_count: 1 };
        let plan = allocate_uniform(
            &PruningConfig::default().with_allocation(Allocation::Uniform).with_sparsity(s),
            &[lodprune::allocation::LayerSize { layer_id: "l".into(), size: w.len() }],
        ).unwrap();
        let group = if per_row { ComparisonGroup::PerRow } else { ComparisonGroup::PerLayer };
        for metric in [ImportanceMetric::Magnitude, ImportanceMetric::Wanda] {
            let a = build_mask(&w, &plan.entries[0], metric, group, Some(&norms)).unwrap();
            let b = build_mask(&w.scaled(c), &plan.entries[0], metric, group, Some(&norms)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
