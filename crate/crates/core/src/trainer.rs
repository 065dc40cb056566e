//! Training loop, evaluation, ablations and the loss-weight sweep.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::{AblationMode, TrainConfig};
use crate::corpus::{split_cohort, Cohort, SplitRatios};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, DEFAULT_THRESHOLD};
use crate::model::{check_vocab, patient_objective, predict_positive, LossParts, ModelParams};
use crate::rng;

const SHUFFLE_STREAM: u64 = 0x5_4F1E;
const PATIENT_STREAM: u64 = 0x9A7;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ModelParams, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update: `p ← p(1 - lr·wd) - lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let shrink = 1.0 - lr * self.weight_decay;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for (((_, _, p), (_, _, g)), ((_, _, m), (_, _, v))) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let m_hat = m.data[i] / c1;
                let v_hat = v.data[i] / c2;
                p.data[i] = p.data[i] * shrink - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Reduces the learning rate after `patience` epochs without a strict
/// improvement of the monitored score.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            best: f64::NEG_INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's score; returns true when the rate was reduced.
    pub fn observe(&mut self, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Rate used during this epoch.
    pub learning_rate: f64,
    /// Means over the training patients.
    pub mean_loss: LossParts,
    pub val_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub schedule: DiffusionSchedule,
    pub config: TrainConfig,
    pub best_val_f1: f64,
    pub epoch_of_best: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
}

/// What the trainer reports after evaluating one patient's objective.
pub struct StepEvent<'a> {
    pub epoch: usize,
    /// Position of the patient in the training set.
    pub patient: usize,
    /// Seed of the patient's random streams for this epoch.
    pub seed: u64,
    /// Parameters the objective was evaluated at.
    pub params: &'a ModelParams,
    pub parts: LossParts,
    /// Fusion weights `(γ^e, γ^h)` of every fusion evaluation.
    pub gammas: &'a [[f64; 2]],
}

/// Seed of training patient `patient` in `epoch`.
pub fn patient_seed(seed: u64, epoch: usize, patient: usize) -> u64 {
    rng::derive_seed(seed, &[PATIENT_STREAM, epoch as u64, patient as u64])
}

/// Positive-class probabilities for every record, in order.
pub fn predict_cohort(params: &ModelParams, cohort: &Cohort) -> Result<Vec<f64>> {
    check_vocab(params, cohort.vocab_size)?;
    cohort.records.iter().map(|r| predict_positive(params, r)).collect()
}

pub fn labels(cohort: &Cohort) -> Vec<u8> {
    cohort.records.iter().map(|r| r.label).collect()
}

/// Metrics of `params` on `cohort` at the fixed 0.5 threshold.
pub fn evaluate(params: &ModelParams, cohort: &Cohort) -> Result<MetricsReport> {
    MetricsReport::evaluate(&predict_cohort(params, cohort)?, &labels(cohort), DEFAULT_THRESHOLD)
}

fn validation_f1(params: &ModelParams, cohort: &Cohort) -> Result<f64> {
    let probs = predict_cohort(params, cohort)?;
    let preds = crate::metrics::threshold_predictions(&probs, DEFAULT_THRESHOLD);
    crate::metrics::f1(&preds, &labels(cohort))
}

pub fn train(config: &TrainConfig, train_set: &Cohort, val_set: &Cohort) -> Result<TrainOutput> {
    train_observed(config, train_set, val_set, |_| {})
}

/// [`train`], calling `observer` after every patient objective.
pub fn train_observed<F>(
    config: &TrainConfig,
    train_set: &Cohort,
    val_set: &Cohort,
    mut observer: F,
) -> Result<TrainOutput>
where
    F: FnMut(&StepEvent<'_>),
{
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::validation("training and validation sets must be non-empty"));
    }
    if train_set.vocab_size != val_set.vocab_size {
        return Err(Error::Shape(format!(
            "training vocabulary {} differs from validation vocabulary {}",
            train_set.vocab_size, val_set.vocab_size
        )));
    }
    let schedule = config.schedule()?;
    let opts = config.objective();
    let mut params = ModelParams::init(config.dims(train_set.vocab_size), config.seed);
    let mut optimizer = AdamW::new(&params, config.weight_decay);
    let mut plateau = PlateauScheduler::new(config.learning_rate, config.plateau_factor, config.plateau_patience);
    let mut grads = params.zeros_like();

    let mut best: Option<(ModelParams, f64, usize)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        let lr = plateau.lr;
        order.shuffle(&mut rng::stream(config.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut sum = LossParts::default();

        for batch in order.chunks(config.batch_size) {
            grads.tensors_mut().into_iter().for_each(|(_, _, t)| t.fill(0.0));
            for &patient in batch {
                let seed = patient_seed(config.seed, epoch, patient);
                let record = &train_set.records[patient];
                let outcome = patient_objective(&params, &schedule, &opts, record, seed, Some(&mut grads))?;
                let parts = outcome.parts;
                if let Some(term) = parts.non_finite_term() {
                    return Err(Error::NonFinite { term, epoch, patient });
                }
                observer(&StepEvent {
                    epoch,
                    patient,
                    seed,
                    params: &params,
                    parts,
                    gammas: &outcome.gammas,
                });
                sum.ce_orig += parts.ce_orig;
                sum.ce_synth += parts.ce_synth;
                sum.l_diff += parts.l_diff;
                sum.total += parts.total;
            }
            if batch.len() > 1 {
                let inv = 1.0 / batch.len() as f64;
                for (_, _, t) in grads.tensors_mut() {
                    t.data.iter_mut().for_each(|g| *g *= inv);
                }
            }
            optimizer.step(&mut params, &grads, lr);
            if !params.is_finite() {
                return Err(Error::NonFinite {
                    term: "parameter update",
                    epoch,
                    patient: batch[batch.len() - 1],
                });
            }
        }

        let n = train_set.len() as f64;
        let mean_loss = LossParts {
            ce_orig: sum.ce_orig / n,
            ce_synth: sum.ce_synth / n,
            l_diff: sum.l_diff / n,
            total: sum.total / n,
        };
        let val_f1 = validation_f1(&params, val_set)?;
        log::info!(
            "epoch {epoch}: loss {:.4} (ce {:.4}, synth {:.4}, diff {:.4}) val F1 {val_f1:.4} lr {lr:.2e}",
            mean_loss.total,
            mean_loss.ce_orig,
            mean_loss.ce_synth,
            mean_loss.l_diff
        );
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            mean_loss,
            val_f1,
        });
        if best.as_ref().is_none_or(|(_, f1, _)| val_f1 > *f1) {
            best = Some((params.clone(), val_f1, epoch));
        }
        if plateau.observe(val_f1) {
            log::info!("validation F1 plateaued; learning rate now {:.2e}", plateau.lr);
        }
    }

    let (params, best_val_f1, epoch_of_best) = best.expect("at least one epoch");
    Ok(TrainOutput {
        model: TrainedModel {
            params,
            schedule,
            config: config.clone(),
            best_val_f1,
            epoch_of_best,
        },
        history,
    })
}

/// Result of training on the train split and scoring the test split.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub output: TrainOutput,
    pub test: MetricsReport,
}

/// Splits `cohort` 75/10/15 with `config.seed`, trains, and evaluates the
/// selected model on the test split.
pub fn run_experiment(config: &TrainConfig, cohort: &Cohort) -> Result<Experiment> {
    let (train_set, val_set, test_set) = split_cohort(cohort, SplitRatios::default(), config.seed)?;
    run_on_split(config, &train_set, &val_set, &test_set)
}

pub fn run_on_split(
    config: &TrainConfig,
    train_set: &Cohort,
    val_set: &Cohort,
    test_set: &Cohort,
) -> Result<Experiment> {
    let output = train(config, train_set, val_set)?;
    let test = evaluate(&output.model.params, test_set)?;
    Ok(Experiment { output, test })
}

/// Trains and evaluates with `mode` applied; everything else as in `config`.
pub fn run_ablation(mode: AblationMode, config: &TrainConfig, cohort: &Cohort) -> Result<MetricsReport> {
    let config = TrainConfig {
        ablation: mode,
        ..config.clone()
    };
    Ok(run_experiment(&config, cohort)?.test)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub lambda_d: f64,
    pub lambda_s: f64,
    pub seed: u64,
    pub report: MetricsReport,
}

/// The loss-weight values of the reference grid.
pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];

/// One experiment per `(λ_D, λ_S)` pair, row-major over `grid_d`. Cell `i`
/// trains with seed `config.seed + i` on the split drawn from `config.seed`.
/// Cells run in parallel on the current rayon pool; results do not depend on
/// the thread count.
pub fn sweep(grid_d: &[f64], grid_s: &[f64], config: &TrainConfig, cohort: &Cohort) -> Result<Vec<SweepCell>> {
    if grid_d.is_empty() || grid_s.is_empty() {
        return Err(Error::validation("sweep grids must be non-empty"));
    }
    config.validate()?;
    let (train_set, val_set, test_set) = split_cohort(cohort, SplitRatios::default(), config.seed)?;
    let cells: Vec<(usize, f64, f64)> = grid_d
        .iter()
        .flat_map(|&d| grid_s.iter().map(move |&s| (d, s)))
        .enumerate()
        .map(|(i, (d, s))| (i, d, s))
        .collect();
    cells
        .into_par_iter()
        .map(|(i, lambda_d, lambda_s)| {
            let seed = config.seed.wrapping_add(i as u64);
            let cfg = TrainConfig {
                lambda_d,
                lambda_s,
                seed,
                ..config.clone()
            };
            let report = run_on_split(&cfg, &train_set, &val_set, &test_set)?.test;
            log::info!(
                "sweep cell {i}: lambda_d {lambda_d} lambda_s {lambda_s} PR-AUC {:.4}",
                report.pr_auc
            );
            Ok(SweepCell {
                lambda_d,
                lambda_s,
                seed,
                report,
            })
        })
        .collect()
}

/// Comma-separated sweep table with a header row.
pub fn sweep_to_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("lambda_d,lambda_s,seed,pr_auc,f1,kappa,n_samples\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{}\n",
            c.lambda_d, c.lambda_s, c.seed, c.report.pr_auc, c.report.f1, c.report.kappa, c.report.n_samples
        ));
    }
    out
}
