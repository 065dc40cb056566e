use std::path::PathBuf;

use meddiff_core::checkpoint;
use meddiff_core::config::{AblationMode, TrainConfig};
use meddiff_core::corpus::{load_corpus, split_cohort, Cohort, SplitRatios};
use meddiff_core::diffusion::{diffusion_loss, loss_stream, FusionContext, NoiseNet};
use meddiff_core::embedder::embed_visit;
use meddiff_core::encoder::encode_sequence;
use meddiff_core::error::Error;
use meddiff_core::predictor::{cross_entropy, predict_risk};
use meddiff_core::trainer::{evaluate, predict_cohort, run_ablation, run_experiment, sweep, train, train_observed};

fn fixture(name: &str) -> Cohort {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name);
    load_corpus(&path).unwrap()
}

fn small(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 1e-2,
        d_e: 8,
        d_h: 8,
        d_f: 4,
        d_b: 4,
        d_s: 4,
        diffusion_steps: 10,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn toy_pair_loss_decreases() {
    let toy = fixture("toy_pair.txt");
    let out = train(&small(3, 7), &toy, &toy).unwrap();
    let loss: Vec<f64> = out.history.iter().map(|h| h.mean_loss.total).collect();
    assert_eq!(loss.len(), 3);
    assert!(loss[2] < loss[0], "{loss:?}");
}

#[test]
fn identical_seeds_give_identical_runs() {
    let toy = fixture("separable_toy.txt");
    let (tr, va, _) = split_cohort(&toy, SplitRatios::default(), 3).unwrap();
    let a = train(&small(4, 3), &tr, &va).unwrap();
    let b = train(&small(4, 3), &tr, &va).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
    let c = train(&small(4, 4), &tr, &va).unwrap();
    assert_ne!(a.model.params, c.model.params);
}

#[test]
fn selection_and_learning_rate_contracts() {
    let toy = fixture("separable_toy.txt");
    let (tr, va, _) = split_cohort(&toy, SplitRatios::default(), 1).unwrap();
    let cfg = TrainConfig {
        plateau_patience: 2,
        ..small(12, 1)
    };
    let out = train(&cfg, &tr, &va).unwrap();
    let h = &out.history;
    assert!(h.iter().all(|e| out.model.best_val_f1 >= e.val_f1));
    assert_eq!(h[out.model.epoch_of_best - 1].val_f1, out.model.best_val_f1);
    assert!((0.0..=1.0).contains(&out.model.best_val_f1));

    // Replay the plateau rule on the recorded scores.
    let (mut best, mut bad, mut lr) = (f64::NEG_INFINITY, 0, cfg.learning_rate);
    for e in h {
        assert_eq!(e.learning_rate, lr);
        if e.val_f1 > best {
            best = e.val_f1;
            bad = 0;
        } else {
            bad += 1;
            if bad == cfg.plateau_patience {
                lr *= 0.2;
                bad = 0;
            }
        }
    }
    assert!(h.windows(2).all(|w| w[1].learning_rate <= w[0].learning_rate));
}

#[test]
fn selected_model_reproduces_its_validation_f1() {
    let toy = fixture("separable_toy.txt");
    let (tr, va, _) = split_cohort(&toy, SplitRatios::default(), 5).unwrap();
    let out = train(&small(5, 5), &tr, &va).unwrap();
    assert_eq!(evaluate(&out.model.params, &va).unwrap().f1, out.model.best_val_f1);
}

#[test]
fn as3_total_is_original_plus_weighted_diffusion() {
    let toy = fixture("toy_pair.txt");
    let cfg = TrainConfig {
        ablation: AblationMode::As3,
        ..small(3, 2)
    };
    let mut steps = 0;
    train_observed(&cfg, &toy, &toy, |ev| {
        steps += 1;
        let p = ev.parts;
        assert_eq!(p.ce_synth, 0.0);
        assert_eq!(p.total, p.ce_orig + cfg.lambda_d * p.l_diff);

        // Independent recomputation with the patient's replayed streams.
        let record = &toy.records[ev.patient];
        let anchor = record.last_day();
        let e: Vec<Vec<f64>> = record
            .visits()
            .iter()
            .map(|v| embed_visit(v, anchor, &ev.params.embedder).unwrap())
            .collect();
        let states = encode_sequence(&e, &ev.params.encoder).unwrap();
        let ce = cross_entropy(&predict_risk(&states.last().unwrap().h, &ev.params.head), record.label);
        let zero = vec![0.0; cfg.d_h];
        let targets: Vec<Vec<f64>> = (0..e.len())
            .map(|k| {
                let h_prev = if k == 0 { &zero } else { &states[k - 1].h };
                let ctx = FusionContext::new(h_prev, &ev.params.fusion, cfg.objective().fusion).unwrap();
                ctx.fuse(&e[k], &ev.params.fusion).0.fused
            })
            .collect();
        let schedule = cfg.schedule().unwrap();
        let mut net = NoiseNet::new(&ev.params.noise, schedule.steps());
        let l_diff = diffusion_loss(&targets, &schedule, &mut net, cfg.loss_steps, |k| {
            loss_stream(ev.seed, k)
        })
        .unwrap();
        assert_eq!(p.ce_orig, ce);
        assert_eq!(p.l_diff, l_diff);
        assert_eq!(p.total, ce + cfg.lambda_d * l_diff);
    })
    .unwrap();
    assert_eq!(steps, 6);
}

#[test]
fn fusion_ablations_hold_during_training() {
    let toy = fixture("toy_pair.txt");
    for (mode, expected) in [(AblationMode::As1, [1.0, 0.0]), (AblationMode::As2, [0.5, 0.5])] {
        let cfg = TrainConfig {
            ablation: mode,
            ..small(2, 9)
        };
        let mut seen = 0;
        train_observed(&cfg, &toy, &toy, |ev| {
            seen += ev.gammas.len();
            assert!(ev.gammas.iter().all(|g| *g == expected));
        })
        .unwrap();
        assert!(seen > 0);
    }
}

#[test]
fn ablations_produce_finite_reports() {
    let toy = fixture("separable_toy.txt");
    for mode in [
        AblationMode::As1,
        AblationMode::As2,
        AblationMode::As3,
        AblationMode::Plain,
    ] {
        let r = run_ablation(mode, &small(3, 0), &toy).unwrap();
        assert!(r.is_finite(), "{mode}: {r:?}");
        assert_eq!(r.n_samples, 6);
    }
}

#[test]
fn minibatches_train_deterministically() {
    let toy = fixture("separable_toy.txt");
    let cfg = TrainConfig {
        batch_size: 4,
        ..small(3, 6)
    };
    let a = run_experiment(&cfg, &toy).unwrap();
    let b = run_experiment(&cfg, &toy).unwrap();
    assert_eq!(a.output.model, b.output.model);
    assert_ne!(
        a.output.model.params,
        run_experiment(&small(3, 6), &toy).unwrap().output.model.params
    );
}

#[test]
fn exploding_updates_abort_with_a_diagnostic() {
    let toy = fixture("toy_pair.txt");
    let cfg = TrainConfig {
        learning_rate: 1e308,
        ..small(2, 1)
    };
    match train(&cfg, &toy, &toy) {
        Err(Error::NonFinite { term, epoch, .. }) => {
            assert!(!term.is_empty());
            assert_eq!(epoch, 1);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let toy = fixture("toy_pair.txt");
    let empty = toy.subset(&[]);
    assert!(train(&small(1, 0), &empty, &toy).is_err());
    assert!(train(
        &TrainConfig {
            epochs: 0,
            ..small(1, 0)
        },
        &toy,
        &toy
    )
    .is_err());
    assert!(sweep(&[], &[0.1], &small(1, 0), &toy).is_err());
}

#[test]
fn sweep_cells_match_single_runs() {
    let toy = fixture("separable_toy.txt");
    let cfg = small(2, 11);
    let cells = sweep(&[0.25], &[0.75], &cfg, &toy).unwrap();
    assert_eq!(cells.len(), 1);
    let single = run_experiment(
        &TrainConfig {
            lambda_d: 0.25,
            lambda_s: 0.75,
            ..cfg.clone()
        },
        &toy,
    )
    .unwrap();
    assert_eq!(cells[0].report, single.test);

    let grid = sweep(&[0.1, 0.5], &[0.1, 0.5, 1.0], &cfg, &toy).unwrap();
    assert_eq!(grid.len(), 6);
    assert_eq!((grid[4].lambda_d, grid[4].lambda_s, grid[4].seed), (0.5, 0.5, 15));
}

#[test]
fn checkpoints_reload_to_identical_predictions() {
    let toy = fixture("separable_toy.txt");
    let exp = run_experiment(&small(2, 8), &toy).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&exp.output.model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, exp.output.model);
    let a = predict_cohort(&exp.output.model.params, &toy).unwrap();
    let b = predict_cohort(&back.params, &toy).unwrap();
    assert_eq!(a, b);
}
