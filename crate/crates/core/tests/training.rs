use std::sync::atomic::{AtomicBool, Ordering};

use deepnorm::data::TaskSpec;
use deepnorm::init::InitFamily;
use deepnorm::layers::NormOrder;
use deepnorm::model::{ModelConfig, TransformerModel};
use deepnorm::rng::Rng;
use deepnorm::train::{run_grid, train_loop, train_loop_with, GridSpec, TrainConfig, TrainHooks, Verdict};

fn small_model() -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        d_model: 16,
        d_ff: 32,
        n_heads: 2,
        vocab_size: 16,
        max_seq_len: 12,
        ..ModelConfig::default()
    }
}

fn small_task() -> TaskSpec {
    TaskSpec {
        vocab_size: 16,
        max_len: 6,
        train_size: 400,
        eval_size: 32,
        ..TaskSpec::default()
    }
}

fn short_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        warmup: 10,
        batch_tokens: 128,
        eval_every: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_is_undetermined_with_no_evals() {
    let out = train_loop(&small_model(), &short_train(0), &small_task()).unwrap();
    assert_eq!(out.report.verdict, Verdict::Undetermined);
    assert!(out.report.evals.is_empty());
    assert_eq!(out.report.steps_run, 0);
    assert!(out.report.complete);
}

#[test]
fn same_seed_gives_identical_losses() {
    let a = train_loop(&small_model(), &short_train(12), &small_task()).unwrap();
    let b = train_loop(&small_model(), &short_train(12), &small_task()).unwrap();
    let bits = |r: &deepnorm::train::RunReport| r.trace.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.report), bits(&b.report));
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
}

#[test]
fn zero_lr_leaves_parameters_unchanged() {
    let cfg = TrainConfig {
        lr_scale: 0.0,
        ..short_train(8)
    };
    let out = train_loop(&small_model(), &cfg, &small_task()).unwrap();
    assert_eq!(out.report.steps_run, 8);
    let fresh = TransformerModel::build(small_model(), &Rng::new(cfg.seed).split("model")).unwrap();
    for ((name, a), (_, b)) in out.model.params.iter().zip(fresh.params.iter()) {
        assert_eq!(a.data, b.data, "{name} moved");
    }
}

#[test]
fn singleton_grid_matches_single_run() {
    let grid = GridSpec {
        depths: vec![6],
        orders: vec![NormOrder::V2],
        inits: vec![InitFamily::Glorot],
        parallel: false,
    };
    let train = short_train(10);
    let report = run_grid(&grid, &small_model(), &train, &small_task(), None).unwrap();
    assert_eq!(report.cells.len(), 1);
    let cfg = ModelConfig {
        enc_layers: 6,
        dec_layers: 6,
        ..small_model()
    };
    let single = train_loop(&cfg, &train, &small_task()).unwrap().report;
    let cell = &report.cells[0];
    assert_eq!(cell.verdict, single.verdict);
    assert_eq!(cell.verdict_step, single.verdict_step);
    assert_eq!(cell.steps_run, single.steps_run);
    assert_eq!(cell.final_accuracy.map(f64::to_bits), single.final_accuracy.map(f64::to_bits));
}

#[test]
fn grid_report_shape_and_files() {
    let grid = GridSpec {
        depths: vec![1, 2],
        orders: vec![NormOrder::V1, NormOrder::V2],
        inits: vec![InitFamily::Lipschitz],
        parallel: true,
    };
    let dir = tempfile::tempdir().unwrap();
    let report = run_grid(&grid, &small_model(), &short_train(4), &small_task(), Some(dir.path())).unwrap();
    assert_eq!(report.rows, vec![1, 2]);
    assert_eq!(report.columns.len(), 2);
    assert_eq!(report.verdicts.len(), 2);
    assert!(report.verdicts.iter().all(|r| r.len() == 2));
    for (i, c) in report.cells.iter().enumerate() {
        assert_eq!(c.seed, short_train(4).seed + i as u64);
        assert_ne!(c.verdict, Verdict::Error, "{:?}", c.error);
        let cell = dir.path().join("cells").join(deepnorm::train::cell_dir_name(c.depth, c.order, c.init));
        for f in ["run.json", "evals.csv", "timing.json", "model.ckpt"] {
            assert!(cell.join(f).is_file(), "{}", cell.join(f).display());
        }
    }
    assert!(dir.path().join("grid.json").is_file());
    assert!(dir.path().join("grid.csv").is_file());
}

#[test]
fn interrupted_run_stays_undetermined() {
    let stop = AtomicBool::new(false);
    let mut on_eval = |_: &deepnorm::train::EvalRecord| stop.store(true, Ordering::Relaxed);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        convergence_threshold: 1.0,
        ..short_train(100)
    };
    let hooks = TrainHooks {
        stop: Some(&stop),
        out_dir: Some(dir.path()),
        on_eval: Some(&mut on_eval),
    };
    let out = train_loop_with(&small_model(), &cfg, &small_task(), None, hooks).unwrap();
    assert_eq!(out.report.verdict, Verdict::Undetermined);
    assert!(!out.report.complete);
    assert_eq!(out.report.steps_run, 5);
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(saved["verdict"], "undetermined");
    assert_eq!(saved["complete"], false);
}

// Means over consecutive 100-step windows must fall, allowing two upticks.
#[test]
fn copy_loss_falls_over_first_thousand_steps() {
    let model = ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        steps: 1000,
        batch_tokens: 512,
        eval_every: 1000,
        stop_on_converge: false,
        ..TrainConfig::default()
    };
    let out = train_loop(&model, &cfg, &TaskSpec::default()).unwrap();
    assert_eq!(out.report.steps_run, 1000);
    let means: Vec<f64> = out.report.trace.chunks(100).map(|w| w.iter().map(|s| s.loss).sum::<f64>() / 100.0).collect();
    let violations = means.windows(2).filter(|p| p[1] >= p[0]).count();
    assert!(violations <= 2, "window means {means:?}");
}
