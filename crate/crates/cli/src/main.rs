//! `medrec`: synthesize benchmark cohorts and run the recommendation
//! pipeline from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use medrec_core::ehr::{save_cohort, save_ddi_csv};
use medrec_core::pipeline::{load_run_config, run_pipeline, PipelineOutcome};
use medrec_core::synth::{bundled, generate, save_ground_truth, ScmSpec};
use medrec_core::train::Mode;
use medrec_core::Result;

#[derive(Parser)]
#[command(name = "medrec", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with exact ground truth from a
    /// structural-model spec.
    Synth {
        /// Model spec JSON; omit to use the bundled benchmark.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Directory receiving cohort.jsonl, ddi.csv and ground_truth.json.
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
    /// Run load -> discover -> estimate -> train -> evaluate from a config.
    Pipeline {
        /// Run config JSON. MEDREC_* environment variables override keys;
        /// the flags below override both.
        #[arg(long)]
        config: PathBuf,
        /// Ablation mode: full, wo_T, wo_P, wo_TP or cooccurrence.
        #[arg(long)]
        mode: Option<Mode>,
        /// Random seed for splitting, initialization and training.
        #[arg(long)]
        seed: Option<u64>,
        /// Artifact directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth { spec, out } => cmd_synth(spec.as_deref(), &out),
        Command::Pipeline { config, mode, seed, out } => cmd_pipeline(&config, mode, seed, out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn cmd_synth(spec_path: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match spec_path {
        Some(p) => ScmSpec::load(p)?,
        None => ScmSpec::from_json(bundled::BENCHMARK)?,
    };
    let (cohort, truth) = generate(&spec)?;
    fs::create_dir_all(out)?;

    let cohort_path = out.join("cohort.jsonl");
    let ddi_path = out.join("ddi.csv");
    let truth_path = out.join("ground_truth.json");
    save_cohort(&cohort, &cohort_path)?;
    save_ddi_csv(&cohort.ddi, &cohort.medications, &ddi_path)?;
    save_ground_truth(&truth, &spec, &truth_path)?;

    let visits: usize = cohort.patients.iter().map(|p| p.visits.len()).sum();
    println!(
        "{}: {} patients, {} visits ({} diseases, {} procedures, {} medications)",
        cohort_path.display(),
        cohort.patients.len(),
        visits,
        cohort.diseases.len(),
        cohort.procedures.len(),
        cohort.medications.len(),
    );
    println!("{}: {} interacting pairs", ddi_path.display(), cohort.ddi.pairs().len());
    println!("{}: {} true edges", truth_path.display(), truth.edges.len());
    Ok(())
}

fn cmd_pipeline(
    config_path: &Path,
    mode: Option<Mode>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut config = load_run_config(config_path)?;
    if let Some(mode) = mode {
        config.mode = mode;
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.out_dir = out;
    }
    let outcome = run_pipeline(&config)?;
    report(&outcome, config.mode);
    Ok(())
}

fn report(outcome: &PipelineOutcome, mode: Mode) {
    let stages = [
        ("load", &outcome.hashes.load),
        ("discover", &outcome.hashes.discover),
        ("estimate", &outcome.hashes.estimate),
        ("train", &outcome.hashes.train),
        ("evaluate", &outcome.hashes.evaluate),
    ];
    for (name, hash) in stages {
        let note = if outcome.reused.contains(&name) { "  (reused)" } else { "" };
        println!("{name:<9} {hash}{note}");
    }
    if let Some(best) = outcome.best_epoch {
        println!("best validation epoch: {best}");
    }
    let m = &outcome.metrics.mean;
    let s = &outcome.metrics.std;
    println!(
        "test [{}]: jaccard {:.4} +/- {:.4}, ddi {:.4}, f1 {:.4}, prauc {:.4}, \
         avg med {:.2} ({} rounds)",
        mode,
        m.jaccard,
        s.jaccard,
        m.ddi_rate,
        m.f1,
        m.prauc,
        m.avg_med,
        outcome.metrics.rounds.len(),
    );
    println!("artifacts in {}", outcome.out_dir.display());
}
