//! Command-line entry point: corpus generation, two-stage training,
//! evaluation, and the ablation harness.

mod ablate;
mod runs;

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use prefseg_core::corpus::{corpus_hash, generate_dataset, load_dataset, GenParams, Split};
use prefseg_core::segmenter::load_checkpoint;
use prefseg_core::trainer::{evaluate, evaluate_with, PromptCache};
use prefseg_core::ProbMap;

/// Relative output paths resolve against this environment variable.
pub const OUT_ROOT_ENV: &str = "PREFSEG_OUT_ROOT";

pub fn resolve_out(p: &std::path::Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

#[derive(Parser)]
#[command(name = "prefseg", version, about = "Preference-aligned segmentation trainer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus.
    GenData(GenDataArgs),
    /// Stage-1 fine-tuning, optionally followed by stage-2 alignment.
    Train(runs::TrainArgs),
    /// Stage-2 alignment from an existing stage-1 checkpoint.
    Align(runs::AlignArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run an experiment grid from a spec file.
    Ablate(ablate::AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Square image side (32..=256).
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0.1)]
    frac_annotated: f64,
    #[arg(long, default_value_t = 0.4)]
    frac_unannotated: f64,
    #[arg(long, default_value_t = 0.5)]
    frac_test: f64,
    #[arg(long, default_value_t = 2)]
    blur_radius: usize,
    #[arg(long, default_value_t = 0.3)]
    noise_level: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Substitute ground-truth probabilities for the model (debug).
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value_t = 1.0)]
    sdc_tolerance: f64,
}

fn cmd_gen_data(a: &GenDataArgs) -> anyhow::Result<()> {
    let total = a.frac_annotated + a.frac_unannotated + a.frac_test;
    if (total - 1.0).abs() > 1e-9 {
        bail!(
            "--frac-annotated + --frac-unannotated + --frac-test must sum to 1, got {}",
            total
        );
    }
    let params = GenParams {
        seed: a.seed,
        n: a.n,
        size: a.size,
        class_count: a.classes,
        split_fractions: [a.frac_annotated, a.frac_unannotated, a.frac_test],
        blur_radius: a.blur_radius,
        noise_level: a.noise_level,
        ..Default::default()
    };
    let out = resolve_out(&a.out);
    let manifest = generate_dataset(&params, &out)?;
    let hash = corpus_hash(&manifest.manifest_path())?;
    println!("wrote {} samples to {}", manifest.n, out.display());
    println!("corpus_hash {}", hash);
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let split = Split::parse(&a.split).with_context(|| {
        format!("unknown split '{}' (annotated-train|unannotated-train|test)", a.split)
    })?;
    let dataset = load_dataset(&a.data.join("manifest.txt"))?;
    let out = resolve_out(&a.out);

    let eval_out = if a.oracle {
        evaluate_with(&dataset, split, a.sdc_tolerance, 0.5, |rec| {
            Ok(Some(ProbMap {
                h: rec.gt_mask.h,
                w: rec.gt_mask.w,
                data: rec.gt_mask.data.iter().map(|&b| b as u8 as f64).collect(),
            }))
        })?
    } else {
        let ckpt = a
            .checkpoint
            .as_ref()
            .context("--checkpoint is required unless --oracle is set")?;
        let policy = load_checkpoint(ckpt)?;
        let cache = PromptCache::build(
            dataset.samples.iter().filter(|r| r.split == split),
            dataset.manifest.seed,
            &prefseg_core::prompts::PromptConfig::default(),
        );
        evaluate(&policy, &dataset, split, &cache, a.sdc_tolerance)?
    };

    let corpus = corpus_hash(&dataset.manifest.manifest_path())?;
    let header = format!("corpus_hash={}\nsplit={}\noracle={}", corpus, split, a.oracle);
    let csv = eval_out.report.to_csv(&header);
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).ok();
    }
    std::fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "mean dice {:.4} iou {:.4} sdc {:.4} ({} samples, {} without prompts)",
        eval_out.report.mean_dice,
        eval_out.report.mean_iou,
        eval_out.report.mean_sdc,
        eval_out.report.rows.len(),
        eval_out.skipped_prompts
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => runs::cmd_train(a),
        Cmd::Align(a) => runs::cmd_align(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => ablate::cmd_ablate(a),
    };
    if let Err(e) = result {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}
