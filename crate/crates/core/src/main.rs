use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use severif::config::RunConfig;
use severif::experiment::{
    ablate, analyze, embeddings_container, embeddings_from_container, extract_embeddings, grid_cells, make_data,
    overfit_losses, parse_grid, read_corpus, train_run, trials_path, EVAL_SPLIT, TRAIN_SPLIT,
};
use severif::metrics::{label_scores, parse_scores, read_trials, score_trials, scores_to_text, MetricsReport};
use severif::model::load_checkpoint;
use severif::sevx::Container;
use severif::{gradcheck, Error, Result};

#[derive(Parser)]
#[command(name = "severif", version, about = "Squeeze-and-excitation speaker verification experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set se.reduction=8`. Repeatable; applied
    /// after the file and SEVERIF_SEED.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate (or ingest from WAV manifests) the train/eval splits and trial list.
    MakeData,
    /// Train a model and write the checkpoint, log and resolved config.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write utterance embeddings of one split to a SEVX file.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = EVAL_SPLIT)]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine-score a trial list from a checkpoint or saved embeddings.
    Score {
        #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Defaults to the trial list of the data directory.
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// EER and minDCF of a score file.
    Metrics {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every cell of a configuration grid.
    Ablate {
        /// Axis `key=v1/v2/...`; several axes form a cartesian product.
        #[arg(long, value_name = "KEY=V1/V2")]
        grid: Vec<String>,
        /// Vary stages, reduction, depth, integration and pooling one at a time.
        #[arg(long, conflicts_with = "grid")]
        standard_grid: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Excitation statistics of a trained model on sampled eval speakers.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overfit one fixed random batch and print the loss per step.
    Overfit {
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    for s in &common.set {
        cfg.set_override(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.cmd {
        Cmd::MakeData => {
            let s = make_data(&cfg)?;
            println!(
                "wrote {}: {} train and {} eval utterances, {} speakers, {} trials",
                cfg.data.dir.display(),
                s.train_utterances,
                s.eval_utterances,
                s.speakers,
                s.trials
            );
        }
        Cmd::Train { out } => {
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let (outcome, census) = train_run(&cfg, &out, |r| {
                if r.step % 10 == 0 {
                    eprintln!(
                        "step {:5} epoch {:3} lr {:.3e} loss {:.4} acc {:.3} {:.0}s",
                        r.step, r.epoch, r.lr, r.loss, r.accuracy, r.elapsed_s
                    );
                }
            })?;
            println!("train_accuracy = {:.4}", outcome.train_accuracy);
            println!("num_params = {}", census.total);
            println!(
                "se_params = {} (closed form {}, delta vs SE-free network {})",
                census.se,
                census.closed_form_se,
                census.total as i64 - census.baseline_total as i64
            );
            println!("checkpoint = {}", out.join("model.sevx").display());
        }
        Cmd::Extract { checkpoint, split, out } => {
            if split != TRAIN_SPLIT && split != EVAL_SPLIT {
                return Err(Error::InvalidArgument(format!("unknown split {split:?}")));
            }
            let mut model = load_checkpoint(&checkpoint)?;
            let utts = read_corpus(&cfg.data.dir, &split)?;
            let embs = extract_embeddings(&mut model, &utts)?;
            embeddings_container(&embs)?.save(&out)?;
            println!("wrote {} embeddings to {}", embs.len(), out.display());
        }
        Cmd::Score { checkpoint, embeddings, trials, out } => {
            let trials = read_trials(&trials.unwrap_or_else(|| trials_path(&cfg.data.dir)))?;
            let table: HashMap<String, Vec<f32>> = match (checkpoint, embeddings) {
                (Some(ckpt), _) => {
                    let mut model = load_checkpoint(&ckpt)?;
                    extract_embeddings(&mut model, &read_corpus(&cfg.data.dir, EVAL_SPLIT)?)?.into_iter().collect()
                }
                (None, Some(e)) => embeddings_from_container(&Container::load(&e)?),
                (None, None) => unreachable!("clap requires one source"),
            };
            let scores = score_trials(&table, &trials)?;
            write_text(&out, &scores_to_text(&scores))?;
            println!("wrote {} scores to {}", scores.entries.len(), out.display());
        }
        Cmd::Metrics { scores, trials, out } => {
            let trials = read_trials(&trials.unwrap_or_else(|| trials_path(&cfg.data.dir)))?;
            let text = fs::read_to_string(&scores).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::Missing(scores.clone()),
                _ => Error::Io { path: scores.clone(), source: e },
            })?;
            let set = label_scores(parse_scores(&text, &scores)?, &trials, &scores)?;
            let report = MetricsReport::compute(&set, &severif::experiment::dcf_params(&cfg))?;
            print!("{}", report.to_text());
            if let Some(out) = out {
                write_text(&out, &report.to_text())?;
            }
        }
        Cmd::Ablate { grid, standard_grid, out } => {
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let cells = if standard_grid {
                severif::experiment::standard_grid()
            } else if grid.is_empty() {
                return Err(Error::InvalidArgument("ablate needs --grid or --standard-grid".into()));
            } else {
                grid_cells(&parse_grid(&grid)?)
            };
            let rows = ablate(&cfg, &cells, &out, |m| eprintln!("{m}"))?;
            print!("{}", severif::experiment::results_tsv(&rows));
        }
        Cmd::Analyze { checkpoint, out } => {
            let out = out.unwrap_or_else(|| cfg.output_dir.join("analysis"));
            let mut model = load_checkpoint(&checkpoint)?;
            let eval = read_corpus(&cfg.data.dir, EVAL_SPLIT)?;
            let report = analyze(&cfg, &mut model, &eval, &out)?;
            print!("{}", report.to_text());
        }
        Cmd::Overfit { batch, frames, steps } => {
            let frames = frames.unwrap_or(cfg.model.segment_frames);
            let steps = steps.unwrap_or(cfg.optim.overfit_steps);
            let losses = overfit_losses(&cfg, batch, frames, steps)?;
            for (i, l) in losses.iter().enumerate() {
                println!("{i}\t{l:.6}");
            }
            let (first, last) = (losses[0], losses[losses.len() - 1]);
            println!("reduction = {:.1}%", 100.0 * (1.0 - last / first));
        }
        Cmd::Gradcheck { seeds } => {
            let reports = gradcheck::run_suite(seeds, |r, secs| {
                println!(
                    "{:30} {} worst_ratio {:.3e} worst_abs {:.3e} checked {} redraws {} {:.2}s",
                    r.name,
                    if r.passed() { "pass" } else { "FAIL" },
                    r.worst_ratio,
                    r.worst_abs,
                    r.checked,
                    r.redraws,
                    secs
                )
            })?;
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
