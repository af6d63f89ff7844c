use super::*;
use crate::calibrate::{CalibConfig, InitKind};
use crate::numerics::StorageDtype;
use crate::transformer::{toy_config, RandomModelSpec, TransformerWeights};

fn model() -> TransformerWeights {
    TransformerWeights::random(&RandomModelSpec::new(toy_config(2, 32, 4, 64), 17)).unwrap()
}

fn config(cells: Vec<CellSpec>, seeds: Vec<u64>, fit: FitSpec) -> SweepConfig {
    SweepConfig {
        cells,
        seeds,
        task: TaskSpec {
            n_lines: 3,
            max_new: 8,
            vocab: VocabProfile::new(64).unwrap(),
        },
        fit,
        storage: StorageDtype::F16,
        calib_streams: 4,
        calib_seed: 5,
    }
}

fn metrics(r: &CellResult) -> &CellMetrics {
    r.outcome.as_ref().unwrap()
}

#[test]
fn single_cell_matches_direct_evaluation() {
    let w = model();
    let cell = CellSpec::cskv(0.5, 0.5, 4);
    let cfg = config(vec![cell], vec![3], FitSpec::Oracle);
    let res = run_sweep(&w, &cfg);
    assert_eq!(res.rows.len(), 1);
    assert_eq!(res.n_errors(), 0);

    let task = gen_lines_task(3, 3, &cfg.task.vocab).unwrap();
    let base = baseline_run(&w, task, 8, StorageDtype::F16).unwrap();
    let streams = calibration_streams(4, 3, 5, &cfg.task.vocab).unwrap();
    let acts = crate::calibrate::capture_activations(&w, &streams, &[0, 1]).unwrap();
    let plan = cell.plan(&w, StorageDtype::F16).unwrap();
    let f = crate::calibrate::oracle_factors(&w, &acts, &plan).unwrap();
    let direct = evaluate_cell(&w, &cell, Some(&f), &base, StorageDtype::F16).unwrap();
    assert_eq!(metrics(&res.rows[0]), &direct);
    assert!(direct.fidelity.mean_logit_err > 0.0);
    assert_eq!(direct.fidelity.layer_residuals.len(), 2);
    assert_eq!(direct.fidelity.logit_errors.len(), 8);
}

#[test]
fn rows_are_cells_times_seeds_and_reproducible() {
    let w = model();
    let cfg = config(window_grid(0.75), vec![0, 1], FitSpec::Oracle);
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = (0..2)
        .map(|i| {
            let res = run_sweep(&w, &cfg);
            let csv = dir.path().join(format!("{i}.csv"));
            let json = dir.path().join(format!("{i}.json"));
            emit_csv(&res, &csv).unwrap();
            emit_plot_data(&res, &json).unwrap();
            (csv, json)
        })
        .collect();
    let a = std::fs::read(&paths[0].0).unwrap();
    assert_eq!(a, std::fs::read(&paths[1].0).unwrap());
    assert_eq!(
        std::fs::read(&paths[0].1).unwrap(),
        std::fs::read(&paths[1].1).unwrap()
    );
    let rows = read_csv(&paths[0].0).unwrap();
    assert_eq!(rows.len(), 6 * 2);
    assert!(rows.iter().all(|r| r.error.is_none()));
    let windows: Vec<usize> = rows.iter().step_by(2).map(|r| r.window).collect();
    assert_eq!(windows, WINDOW_GRID.to_vec());
}

#[test]
fn kv_split_grid_keeps_totals() {
    let g = kv_split_grid(32);
    assert_eq!(g.len(), 14);
    assert_eq!((g[0].ratio_k, g[0].ratio_v), (0.875, 0.125));
    assert_eq!((g[6].ratio_k, g[6].ratio_v), (0.125, 0.875));
    assert_eq!((g[7].ratio_k, g[7].ratio_v), (0.9375, 0.5625));
    for (i, c) in g.iter().enumerate() {
        let t = KV_SPLIT_TOTALS[i / 7];
        assert!(((c.ratio_k + c.ratio_v) / 2.0 - t).abs() < 1e-12);
    }
    assert_eq!(init_grid(32).len(), 12);
    assert_eq!(quant_grid(32).len(), 12);
}

#[test]
fn failures_stay_in_their_cell() {
    let w = model();
    let cells = vec![
        CellSpec::cskv(0.5, 0.5, 4),
        CellSpec::cskv(1.5, 0.5, 4),
        CellSpec::cskv(0.5, 0.5, 4).with_quant(QuantMode::Qat4),
    ];
    let res = run_sweep(&w, &config(cells, vec![0, 1], FitSpec::Oracle));
    assert_eq!(res.rows.len(), 6);
    assert!(res.rows[..2].iter().all(|r| r.outcome.is_ok()));
    assert!(res.rows[2..].iter().all(|r| r.outcome.is_err()));
    assert_eq!(res.n_errors(), 4);
    let csv = csv_rows(&res);
    assert!(csv[2].mean_logit_err.is_none() && csv[2].error.is_some());
}

#[test]
fn wide_window_and_baseline_rows_are_exact() {
    let w = model();
    let cells = vec![
        CellSpec::cskv(0.75, 0.75, 1000),
        CellSpec::cskv(0.0, 0.0, 0).with_method(Method::Baseline),
    ];
    let res = run_sweep(&w, &config(cells, vec![4], FitSpec::Oracle));
    for r in &res.rows {
        let m = metrics(r);
        assert_eq!(m.fidelity.mean_logit_err, 0.0, "{:?}", r.cell.method);
        assert!((m.fidelity.attention_cosine - 1.0).abs() < 1e-12);
    }
    assert_eq!(metrics(&res.rows[1]).stats.achieved_ratio, 0.0);
}

#[test]
fn pruning_rows_match_cskv_bytes() {
    let w = model();
    let cfg = SweepConfig {
        task: TaskSpec {
            n_lines: 8,
            max_new: 16,
            vocab: VocabProfile::new(64).unwrap(),
        },
        ..config(baseline_grid(&[0.5, 0.8], 8), vec![0], FitSpec::Oracle)
    };
    let res = run_sweep(&w, &cfg);
    assert_eq!(res.n_errors(), 0);
    for trio in res.rows.chunks(3) {
        let cskv = metrics(&trio[0]).stats.bytes_total as f64;
        for r in &trio[1..] {
            let b = metrics(r).stats.bytes_total as f64;
            assert!(
                (b - cskv).abs() / cskv <= 0.02,
                "{:?}: {b} vs {cskv}",
                r.cell.method
            );
            assert!(metrics(r).budget_tokens.is_some());
            assert!(metrics(r).fidelity.layer_residuals.is_empty());
        }
    }
}

#[test]
fn calibrated_fits_emit_loss_curves() {
    let w = model();
    let calib = CalibConfig {
        steps: 20,
        learning_rate: 1e-3,
        ..CalibConfig::default()
    };
    let cells = vec![
        CellSpec::cskv(0.5, 0.5, 4),
        CellSpec::cskv(0.5, 0.5, 4).with_quant(QuantMode::Ptq4),
        CellSpec::cskv(0.5, 0.5, 4).with_quant(QuantMode::Qat4),
        CellSpec::cskv(0.5, 0.5, 4).with_init(InitKind::Svd),
    ];
    let res = run_sweep(
        &w,
        &config(cells, vec![0], FitSpec::Calibrated { alpha: 0.5, calib }),
    );
    assert_eq!(res.n_errors(), 0, "{:?}", res.fits);
    // asvd plain (shared by none/ptq4), asvd qat, svd plain.
    assert_eq!(res.fits.len(), 3);
    let plot = plot_data(&res);
    assert_eq!(plot.loss_curves.len(), 3 * 2 * 2);
    assert!(plot.loss_curves.iter().all(|c| !c.points.is_empty()));
    assert_eq!(csv_rows(&res)[3].method, "cskv+svd");
    let q = metrics(&res.rows[1]).stats;
    assert!(q.bytes_total < metrics(&res.rows[0]).stats.bytes_total);
}
