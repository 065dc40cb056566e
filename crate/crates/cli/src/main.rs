//! `meddiff`: command-line driver for cohort generation, training,
//! evaluation, ablations, the loss-weight sweep and model inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use meddiff_core::analysis;
use meddiff_core::checkpoint;
use meddiff_core::config::{AblationMode, TrainConfig};
use meddiff_core::corpus::{generate_cohort, load_corpus, save_corpus, split_cohort, Cohort, CohortSpec, SplitRatios};
use meddiff_core::gradcheck::{gradient_check, micro_setup};
use meddiff_core::io::write_atomic;
use meddiff_core::metrics::aggregate_runs;
use meddiff_core::model::ObjectiveOptions;
use meddiff_core::trainer::{self, run_experiment, sweep, sweep_to_csv, EpochRecord, DEFAULT_LAMBDA_GRID};

#[derive(Parser, Debug)]
#[command(
    name = "meddiff",
    version,
    about = "Diffusion-augmented risk prediction over visit records"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a seeded synthetic cohort
    GenerateCohort {
        /// Cohort spec (`key = value`); defaults apply to missing keys
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training split and score the test split
    Train(TrainArgs),
    /// Score saved checkpoints on one split
    Evaluate {
        /// A checkpoint file or a directory written by `train`
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Evaluate only the first k runs of a training directory
        #[arg(long)]
        runs: Option<usize>,
        /// Report path (default: inside the checkpoint directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one ablation of the pipeline
    Ablate {
        /// none, AS1, AS2, AS3 or plain
        #[arg(long)]
        mode: AblationMode,
        #[command(flatten)]
        run: TrainArgs,
    },
    /// Train one model per (lambda_d, lambda_s) grid cell
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated lambda_d values
        #[arg(long, value_delimiter = ',')]
        grid_d: Option<Vec<f64>>,
        /// Comma-separated lambda_s values
        #[arg(long, value_delimiter = ',')]
        grid_s: Option<Vec<f64>>,
        /// Output CSV
        #[arg(long)]
        out: PathBuf,
    },
    /// Map synthetic visits onto codes and export hidden states
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        /// Cohort for original code frequencies and the hidden-state export
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Synthetic samples per code
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
        /// Records in the hidden-state export
        #[arg(long, default_value_t = 50)]
        sample: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the analytic gradient on a micro model
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Overrides the config seed; run r uses seed + r
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_kv(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<Cohort> {
    load_corpus(path).with_context(|| format!("loading cohort {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,learning_rate,loss,ce_orig,ce_synth,l_diff,val_f1\n");
    for h in history {
        let l = h.mean_loss;
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            h.epoch, h.learning_rate, l.total, l.ce_orig, l.ce_synth, l.l_diff, h.val_f1
        ));
    }
    out
}

fn run_dir(out: &Path, r: usize) -> PathBuf {
    out.join(format!("run-{r}"))
}

/// `runs` seeded experiments; writes per-run artifacts and an aggregate.
fn train_runs(args: &TrainArgs, mode: Option<AblationMode>) -> Result<()> {
    if args.runs == 0 {
        return Err(meddiff_core::Error::validation("--runs must be positive").into());
    }
    let mut base = load_config(args.config.as_deref(), args.seed)?;
    if let Some(m) = mode {
        base.ablation = m;
    }
    base.validate()?;
    let cohort = load_data(&args.data)?;
    let mut reports = Vec::new();
    for r in 0..args.runs {
        let cfg = TrainConfig {
            seed: base.seed.wrapping_add(r as u64),
            ..base.clone()
        };
        log::info!("run {r}: seed {} mode {}", cfg.seed, cfg.ablation);
        let exp = run_experiment(&cfg, &cohort)?;
        let dir = run_dir(&args.out, r);
        checkpoint::save(&exp.output.model, &dir.join("model.ckpt"))?;
        write(&dir.join("history.csv"), &history_csv(&exp.output.history))?;
        write(&dir.join("test_metrics.kv"), &exp.test.to_kv())?;
        println!(
            "run {r} (seed {}): best val F1 {:.6} at epoch {}; test PR-AUC {:.6} F1 {:.6} kappa {:.6}",
            cfg.seed,
            exp.output.model.best_val_f1,
            exp.output.model.epoch_of_best,
            exp.test.pr_auc,
            exp.test.f1,
            exp.test.kappa
        );
        reports.push(exp.test);
    }
    let agg = aggregate_runs(&reports)?;
    write(
        &args.out.join("aggregate.kv"),
        &format!("mode = {}\n{}", base.ablation, agg.to_kv()),
    )?;
    println!(
        "mode {}: PR-AUC {} F1 {} kappa {}",
        base.ablation, agg.pr_auc, agg.f1, agg.kappa
    );
    Ok(())
}

fn checkpoints_in(path: &Path, limit: Option<usize>) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if path.join("model.ckpt").is_file() {
        return Ok(vec![path.join("model.ckpt")]);
    }
    let mut found = Vec::new();
    for r in 0.. {
        let p = run_dir(path, r).join("model.ckpt");
        if !p.is_file() || limit.is_some_and(|k| r >= k) {
            break;
        }
        found.push(p);
    }
    if found.is_empty() {
        bail!("no checkpoint found at {}", path.display());
    }
    Ok(found)
}

fn select_split(cohort: &Cohort, split: &str, seed: u64) -> Result<Cohort> {
    if split == "all" {
        return Ok(cohort.clone());
    }
    let (train, val, test) = split_cohort(cohort, SplitRatios::default(), seed)?;
    Ok(match split {
        "train" => train,
        "val" => val,
        "test" => test,
        other => {
            return Err(meddiff_core::Error::validation(format!(
                "unknown split `{other}` (expected train, val, test or all)"
            ))
            .into())
        }
    })
}

fn evaluate_cmd(ckpt: &Path, data: &Path, split: &str, runs: Option<usize>, out: Option<&Path>) -> Result<()> {
    if runs == Some(0) {
        return Err(meddiff_core::Error::validation("--runs must be positive").into());
    }
    let cohort = load_data(data)?;
    let mut reports = Vec::new();
    for path in checkpoints_in(ckpt, runs)? {
        let model = checkpoint::load(&path)?;
        let subset = select_split(&cohort, split, model.config.seed)?;
        let report = trainer::evaluate(&model.params, &subset)?;
        println!(
            "{}: PR-AUC {:.6} F1 {:.6} kappa {:.6}",
            path.display(),
            report.pr_auc,
            report.f1,
            report.kappa
        );
        reports.push(report);
    }
    let text = match reports.as_slice() {
        [one] => one.to_kv(),
        many => aggregate_runs(many)?.to_kv(),
    };
    let dest = match out {
        Some(p) => p.to_path_buf(),
        None if ckpt.is_dir() => ckpt.join(format!("eval_{split}.kv")),
        None => ckpt.with_extension(format!("eval_{split}.kv")),
    };
    write(&dest, &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateCohort { spec, seed, out } => {
            let spec = match spec {
                Some(p) => CohortSpec::from_kv(
                    &std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                )?,
                None => CohortSpec::default(),
            };
            let cohort = generate_cohort(&spec, seed)?;
            save_corpus(&cohort, &out)?;
            println!(
                "{} patients ({} positive) written to {}",
                cohort.len(),
                cohort.positives(),
                out.display()
            );
        }
        Command::Train(args) => train_runs(&args, None)?,
        Command::Ablate { mode, run } => train_runs(&run, Some(mode))?,
        Command::Evaluate {
            ckpt,
            data,
            split,
            runs,
            out,
        } => evaluate_cmd(&ckpt, &data, &split, runs, out.as_deref())?,
        Command::Sweep {
            config,
            data,
            seed,
            grid_d,
            grid_s,
            out,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let cohort = load_data(&data)?;
            let grid_d = grid_d.unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
            let grid_s = grid_s.unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
            let cells = sweep(&grid_d, &grid_s, &cfg, &cohort)?;
            write(&out, &sweep_to_csv(&cells))?;
            println!("{} cells written to {}", cells.len(), out.display());
        }
        Command::Analyze {
            ckpt,
            data,
            seed,
            repetitions,
            sample,
            out,
        } => {
            let path = checkpoints_in(&ckpt, Some(1))?.remove(0);
            let model = checkpoint::load(&path)?;
            let cohort = data.as_deref().map(load_data).transpose()?;
            let freq = cohort.as_ref().map(|c| c.code_frequencies());
            let table = analysis::map_synthetic_codes(&model, seed, repetitions, freq.as_deref())?;
            write(&out.join("code_frequencies.csv"), &analysis::code_table_to_csv(&table))?;
            println!(
                "code frequency table written to {}",
                out.join("code_frequencies.csv").display()
            );
            if let Some(c) = &cohort {
                let dest = out.join("hidden_states.csv");
                analysis::export_hidden_states(&model, c, sample, seed, &dest)?;
                println!("hidden states written to {}", dest.display());
            }
        }
        Command::Gradcheck { seed, tolerance } => {
            let (params, schedule, batch) = micro_setup(seed);
            let report = gradient_check(&params, &schedule, &ObjectiveOptions::default(), &batch, seed)?;
            print!("{report}");
            report.check(tolerance)?;
            println!("all groups within {tolerance:e}");
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<meddiff_core::Error>() {
        Some(e) if e.is_input_error() => 1,
        _ => 2,
    }
}

fn init_threads() -> Result<()> {
    let threads = match std::env::var("MEDDIFF_THREADS") {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            meddiff_core::Error::validation(format!("MEDDIFF_THREADS must be a positive integer, got `{v}`"))
        })?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
