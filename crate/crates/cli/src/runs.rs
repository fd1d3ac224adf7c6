//! `train` and `align` subcommands.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;

use prefseg_core::annotator::ScoringStrategy;
use prefseg_core::corpus::{corpus_hash, load_dataset, Dataset, Split};
use prefseg_core::prompts::derive_prompts;
use prefseg_core::segmenter::{load_checkpoint, save_checkpoint, PolicyParams, SegmenterConfig};
use prefseg_core::trainer::{
    align_stage2, evaluate, load_optimizer_state, logs_to_csv, save_optimizer_state, train_stage1,
    PromptCache, ResumeState, StageOutput, TrainConfig,
};

use crate::resolve_out;

#[derive(Args, Clone)]
pub struct StageFlags {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub annotated_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub unannotated_fraction: f64,
    #[arg(long, default_value_t = 15)]
    pub epochs_stage1: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs_stage2: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub lr_halving_period: usize,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// ranking | rating | best-candidate
    #[arg(long, default_value = "ranking")]
    pub strategy: String,
    #[arg(long, default_value_t = 1.0)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta2: f64,
    #[arg(long, default_value_t = 0.0)]
    pub flip_fraction: f64,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 25)]
    pub val_subset: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sdc_tolerance: f64,
    /// Keep candidates fixed from the reference instead of refreshing
    /// them from the current policy each epoch.
    #[arg(long)]
    pub fixed_candidates: bool,
}

impl StageFlags {
    pub fn to_config(&self) -> anyhow::Result<TrainConfig> {
        let strategy = ScoringStrategy::parse(&self.strategy)
            .with_context(|| format!("unknown --strategy '{}'", self.strategy))?;
        let mut cfg = TrainConfig {
            seed: self.seed,
            annotated_fraction: self.annotated_fraction,
            unannotated_fraction: self.unannotated_fraction,
            epochs_stage1: self.epochs_stage1,
            epochs_stage2: self.epochs_stage2,
            initial_lr: self.lr,
            lr_halving_period: self.lr_halving_period,
            batch_size: self.batch_size,
            strategy,
            flip_fraction: self.flip_fraction,
            val_subset: self.val_subset,
            sdc_tolerance_px: self.sdc_tolerance,
            regenerate_candidates: !self.fixed_candidates,
            segmenter: SegmenterConfig {
                embed_dim: self.embed_dim,
                mid_dim: (self.embed_dim / 2).max(1),
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.dpo.beta1 = self.beta1;
        cfg.dpo.beta2 = self.beta2;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run stage-2 alignment after stage 1.
    #[arg(long)]
    pub align: bool,
    /// Save a resumable snapshot every N epochs (0 = off).
    #[arg(long, default_value_t = 0)]
    pub save_every: usize,
    /// Resume from the latest snapshot in --out.
    #[arg(long)]
    pub resume: bool,
    /// Write per-candidate audit rows during alignment.
    #[arg(long)]
    pub audit: bool,
    /// Dump CRF-refined maps, coarse masks, and prompt records here.
    #[arg(long)]
    pub dump_prompts: Option<PathBuf>,
    #[command(flatten)]
    pub flags: StageFlags,
}

#[derive(Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stage-1 checkpoint to align from.
    #[arg(long)]
    pub from_checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub save_every: usize,
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub audit: bool,
    #[command(flatten)]
    pub flags: StageFlags,
}

/// The samples a run touches: leading slices of the train splits plus the
/// test split (validation and final evaluation).
pub fn build_cache(dataset: &Dataset, cfg: &TrainConfig, include_unannotated: bool) -> PromptCache {
    let pool = dataset.split(Split::AnnotatedTrain).len()
        + dataset.split(Split::UnannotatedTrain).len();
    let want_ann = (cfg.annotated_fraction * pool as f64).round() as usize;
    let want_unann = if include_unannotated {
        (cfg.unannotated_fraction * pool as f64).round() as usize
    } else {
        0
    };
    let ann = dataset.split(Split::AnnotatedTrain);
    let unann = dataset.split(Split::UnannotatedTrain);
    let samples = ann
        .iter()
        .take(want_ann.min(ann.len()))
        .chain(unann.iter().take(want_unann.min(unann.len())))
        .copied()
        .chain(dataset.split(Split::Test))
        .collect::<Vec<_>>();
    PromptCache::build(samples, dataset.manifest.seed, &cfg.prompt)
}

pub fn write_run_header(out: &Path, cfg: &TrainConfig, corpus: &str) -> anyhow::Result<String> {
    let hash = cfg.config_hash(corpus);
    let content = format!(
        "config_hash={}\ncorpus_hash={}\n{}",
        hash,
        corpus,
        cfg.canonical_string()
    );
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("run_config.txt"), &content)?;
    Ok(hash)
}

struct Snapshots<'a> {
    dir: &'a Path,
    stage: &'a str,
    every: usize,
}

impl Snapshots<'_> {
    fn hook(
        &self,
    ) -> impl FnMut(usize, &PolicyParams, &prefseg_core::trainer::OptimizerState) -> prefseg_core::Result<()>
           + '_ {
        move |epoch, policy, opt| {
            if self.every == 0 || (epoch + 1) % self.every != 0 {
                return Ok(());
            }
            save_checkpoint(policy, &self.dir.join(format!("{}_latest.ckpt", self.stage)))?;
            save_optimizer_state(opt, &self.dir.join(format!("{}_latest.opt", self.stage)))?;
            std::fs::write(
                self.dir.join(format!("{}_latest.state", self.stage)),
                format!("next_epoch {}\n", epoch + 1),
            )
            .map_err(|e| {
                prefseg_core::Error::io(self.dir.join(format!("{}_latest.state", self.stage)), e)
            })?;
            Ok(())
        }
    }
}

fn read_resume(dir: &Path, stage: &str) -> anyhow::Result<Option<ResumeState>> {
    let state = dir.join(format!("{}_latest.state", stage));
    if !state.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&state)?;
    let next_epoch: usize = text
        .split_whitespace()
        .nth(1)
        .context("malformed snapshot state")?
        .parse()?;
    let policy = load_checkpoint(&dir.join(format!("{}_latest.ckpt", stage)))?;
    let opt = load_optimizer_state(&dir.join(format!("{}_latest.opt", stage)))?;
    Ok(Some(ResumeState { policy, opt, next_epoch }))
}

fn dump_prompts(dir: &Path, dataset: &Dataset, cfg: &TrainConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    for rec in dataset
        .split(Split::AnnotatedTrain)
        .into_iter()
        .chain(dataset.split(Split::UnannotatedTrain))
    {
        let seed = PromptCache::prompt_seed(dataset.manifest.seed, rec.id);
        match derive_prompts(rec, &cfg.prompt, seed) {
            Ok(d) => prefseg_core::prompts::dump_prompt_debug(dir, rec, &d, seed)?,
            Err(e) => eprintln!("sample {}: no prompts ({})", rec.id, e),
        }
    }
    Ok(())
}

fn report_stage(out: &StageOutput, stage: &str) {
    if out.skipped_samples > 0 {
        eprintln!("{}: skipped {} samples without prompts", stage, out.skipped_samples);
    }
    if let Some(last) = out.log.last() {
        println!(
            "{}: {} epochs, final loss {:.6}, val dice {}",
            stage,
            out.log.len(),
            last.loss,
            last.val_dice.map(|v| format!("{:.4}", v)).unwrap_or_else(|| "n/a".into())
        );
    }
}

fn final_eval(
    policy: &PolicyParams,
    dataset: &Dataset,
    cache: &PromptCache,
    cfg: &TrainConfig,
    out_dir: &Path,
    header: &str,
) -> anyhow::Result<()> {
    let eval_out = evaluate(policy, dataset, Split::Test, cache, cfg.sdc_tolerance_px)?;
    std::fs::write(out_dir.join("report.csv"), eval_out.report.to_csv(header))?;
    println!(
        "test: dice {:.4} iou {:.4} sdc {:.4}",
        eval_out.report.mean_dice, eval_out.report.mean_iou, eval_out.report.mean_sdc
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = a.flags.to_config()?;
    let out_dir = resolve_out(&a.out);
    let dataset = load_dataset(&a.data.join("manifest.txt"))?;
    let corpus = corpus_hash(&dataset.manifest.manifest_path())?;
    let hash = write_run_header(&out_dir, &cfg, &corpus)?;
    let header = format!("config_hash={}\ncorpus_hash={}", hash, corpus);

    if let Some(dir) = &a.dump_prompts {
        dump_prompts(&resolve_out(dir), &dataset, &cfg)?;
    }

    let cache = build_cache(&dataset, &cfg, a.align);
    let resume1 = if a.resume { read_resume(&out_dir, "stage1")? } else { None };
    let snaps1 = Snapshots { dir: &out_dir, stage: "stage1", every: a.save_every };
    let mut hook1 = snaps1.hook();
    let fine = train_stage1(&cfg, &dataset, &cache, resume1, Some(&mut hook1))?;
    save_checkpoint(&fine.policy, &out_dir.join("stage1.ckpt"))?;
    save_optimizer_state(&fine.opt_state, &out_dir.join("stage1.opt"))?;
    std::fs::write(
        out_dir.join("stage1_log.csv"),
        logs_to_csv(&fine.log, &format!("{}\nstage=1", header)),
    )?;
    report_stage(&fine, "stage1");

    let last_policy = if a.align {
        let resume2 = if a.resume { read_resume(&out_dir, "stage2")? } else { None };
        let snaps2 = Snapshots { dir: &out_dir, stage: "stage2", every: a.save_every };
        let mut hook2 = snaps2.hook();
        let aligned =
            align_stage2(&fine.policy, &cfg, &dataset, &cache, resume2, a.audit, Some(&mut hook2))?;
        save_checkpoint(&aligned.policy, &out_dir.join("aligned.ckpt"))?;
        save_optimizer_state(&aligned.opt_state, &out_dir.join("aligned.opt"))?;
        std::fs::write(
            out_dir.join("stage2_log.csv"),
            logs_to_csv(&aligned.log, &format!("{}\nstage=2", header)),
        )?;
        if a.audit {
            let mut audit = String::from("epoch,sample,thresholds,ious,ratings,order,flipped\n");
            audit.push_str(&aligned.audit_rows.join("\n"));
            audit.push('\n');
            std::fs::write(out_dir.join("audit.csv"), audit)?;
        }
        report_stage(&aligned, "stage2");
        aligned.policy
    } else {
        fine.policy
    };

    final_eval(&last_policy, &dataset, &cache, &cfg, &out_dir, &header)
}

pub fn cmd_align(a: &AlignArgs) -> anyhow::Result<()> {
    let cfg = a.flags.to_config()?;
    let out_dir = resolve_out(&a.out);
    let dataset = load_dataset(&a.data.join("manifest.txt"))?;
    let corpus = corpus_hash(&dataset.manifest.manifest_path())?;
    let hash = write_run_header(&out_dir, &cfg, &corpus)?;
    let header = format!("config_hash={}\ncorpus_hash={}", hash, corpus);

    let pi_fine = load_checkpoint(&a.from_checkpoint)?;
    let cache = build_cache(&dataset, &cfg, true);
    let resume = if a.resume { read_resume(&out_dir, "stage2")? } else { None };
    let snaps = Snapshots { dir: &out_dir, stage: "stage2", every: a.save_every };
    let mut hook = snaps.hook();
    let aligned = align_stage2(&pi_fine, &cfg, &dataset, &cache, resume, a.audit, Some(&mut hook))?;
    save_checkpoint(&aligned.policy, &out_dir.join("aligned.ckpt"))?;
    save_optimizer_state(&aligned.opt_state, &out_dir.join("aligned.opt"))?;
    std::fs::write(
        out_dir.join("stage2_log.csv"),
        logs_to_csv(&aligned.log, &format!("{}\nstage=2", header)),
    )?;
    if a.audit {
        let mut audit = String::from("epoch,sample,thresholds,ious,ratings,order,flipped\n");
        audit.push_str(&aligned.audit_rows.join("\n"));
        audit.push('\n');
        std::fs::write(out_dir.join("audit.csv"), audit)?;
    }
    report_stage(&aligned, "stage2");
    final_eval(&aligned.policy, &dataset, &cache, &cfg, &out_dir, &header)
}
