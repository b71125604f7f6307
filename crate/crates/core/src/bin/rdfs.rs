//! Experiment workbench CLI.
//!
//! Stages build on each other's artifacts under the output directory:
//! `prepare-data` -> `train-cnn` -> `attack` -> `train-rdfs` -> `evaluate`
//! -> `report`. A stage invoked before its prerequisite exists exits with
//! code 3 and names the command to run; configuration problems exit with
//! code 2.

use clap::{Parser, Subcommand, ValueEnum};
use rdfs_core::detectors::ScaleProfile;
use rdfs_core::harness::{Config, Workspace};
use rdfs_core::Result;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "rdfs",
    about = "Randomized deep-feature-selection workbench: train CNN manipulation detectors, \
             craft adversarial examples, measure how keyed feature selection blunts their transfer",
    version
)]
struct Cli {
    /// Partial JSON config overlaying the profile defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed; fixes the dataset, every model and the report bytes.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Scale profile: desk fits a laptop, paper mirrors the published sizes.
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,

    /// Artifact directory.
    #[arg(long = "out-dir", global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for ScaleProfile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => ScaleProfile::Desk,
            ProfileArg::Paper => ScaleProfile::Paper,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the labeled patch datasets for every planned task.
    PrepareData,
    /// Train the original CNN detector per task (requires prepare-data).
    TrainCnn,
    /// Craft and cache adversarial examples against the trained CNN.
    Attack,
    /// Train the keyed reduced detectors of the K-sweep.
    TrainRdfs,
    /// Evaluate reduced detectors on clean and adversarial data.
    Evaluate,
    /// Aggregate result rows into the accuracy tables.
    Report,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(
        cli.profile.into(),
        cli.config.as_deref(),
        cli.seed,
        cli.out_dir.as_deref(),
    )?;
    let ws = Workspace::new(&cfg);
    match cli.command {
        Command::PrepareData => {
            for &task in &cfg.plan.tasks {
                let t = Instant::now();
                let ds = ws.build_dataset(task)?;
                eprintln!(
                    "[{task}] dataset: {} train / {} val / {} test patches ({:.1}s) -> {}",
                    ds.train.len(),
                    ds.val.len(),
                    ds.test.len(),
                    t.elapsed().as_secs_f64(),
                    ws.dataset_dir(task).display()
                );
            }
        }
        Command::TrainCnn => {
            for &task in &cfg.plan.tasks {
                let dataset = ws.require_dataset(task)?;
                let t = Instant::now();
                let (det, report) = ws.train_model(task, &dataset)?;
                eprintln!(
                    "[{task}] cnn {}: N={} best val acc {:.2}% (epoch {}/{}) in {:.1}s -> {}",
                    cfg.architecture.id,
                    det.n_features(),
                    report.best_val_accuracy * 100.0,
                    report.best_epoch + 1,
                    report.epochs_run,
                    t.elapsed().as_secs_f64(),
                    ws.model_path(task).display()
                );
                eprintln!(
                    "[{task}]   val acc by epoch: {}",
                    report
                        .val_accuracies
                        .iter()
                        .map(|a| format!("{:.1}", a * 100.0))
                        .collect::<Vec<_>>()
                        .join(" ")
                );
            }
        }
        Command::Attack => {
            for &task in &cfg.plan.tasks {
                let dataset = ws.require_dataset(task)?;
                let det = ws.require_model(task)?;
                let t = Instant::now();
                for (kind, s) in ws.ensure_attacks(task, &det, &dataset)? {
                    eprintln!(
                        "[{task}] {kind}: success {}/{} ({:.1}%), mean psnr {}, post-quant {:.1}% ({:.1}s)",
                        s.succeeded,
                        s.attempted,
                        s.success_rate * 100.0,
                        s.mean_psnr_db.map_or("n/a".into(), |v| format!("{v:.1} dB")),
                        s.post_quantization_success_rate.unwrap_or(0.0) * 100.0,
                        t.elapsed().as_secs_f64(),
                    );
                }
            }
        }
        Command::TrainRdfs => {
            for &task in &cfg.plan.tasks {
                let dataset = ws.require_dataset(task)?;
                let det = ws.require_model(task)?;
                let feats = ws.ensure_features(task, &det, &dataset)?;
                let t = Instant::now();
                let trained = ws.train_reduced_all(task, &det, &feats)?;
                let total = ws.cell_list(det.n_features()).len();
                eprintln!(
                    "[{task}] reduced detectors: {trained} trained, {} reused ({:.1}s) -> {}",
                    total - trained,
                    t.elapsed().as_secs_f64(),
                    ws.rdfs_dir(task).display()
                );
            }
        }
        Command::Evaluate => {
            let mut all_rows = Vec::new();
            for &task in &cfg.plan.tasks {
                let dataset = ws.require_dataset(task)?;
                let det = ws.require_model(task)?;
                let feats = ws.ensure_features(task, &det, &dataset)?;
                let adv = ws.ensure_adversarial_features(task, &det)?;
                let t = Instant::now();
                let rows = ws.evaluate_reduced(task, &det, &feats, &adv)?;
                eprintln!("[{task}] evaluated {} cells ({:.1}s)", rows.len(), t.elapsed().as_secs_f64());
                all_rows.extend(rows);
            }
            ws.write_rows(&all_rows)?;
            eprintln!("rows -> {}", ws.results_path().display());
        }
        Command::Report => {
            let rows = ws.read_rows()?;
            let report = rdfs_core::harness::aggregate_report(&rows, &ws.reports_dir())?;
            for p in &report.tables {
                eprintln!("table -> {}", p.display());
            }
            eprintln!("summary -> {}", report.summary.display());
            let text = std::fs::read_to_string(&report.summary)?;
            print!("{text}");
        }
    }
    Ok(())
}

impl std::fmt::Display for ProfileArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProfileArg::Desk => write!(f, "desk"),
            ProfileArg::Paper => write!(f, "paper"),
        }
    }
}
