//! Experiment harness: runs a grid of config overrides across seeds and
//! emits one CSV table with per-run rows and mean/std aggregates.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use prefseg_core::annotator::ScoringStrategy;
use prefseg_core::corpus::{corpus_hash, load_dataset, Dataset, Split};
use prefseg_core::segmenter::PolicyParams;
use prefseg_core::trainer::{
    align_stage2, evaluate, logs_to_csv, train_stage1, PromptCache, TrainConfig,
};

use crate::resolve_out;

#[derive(Args)]
pub struct AblateArgs {
    /// Plain-text experiment spec (name/data/out/seeds/set/grid lines).
    #[arg(long)]
    pub spec: PathBuf,
    /// Grid points run in parallel; each run is fully isolated.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Also write per-run stage-2 epoch logs under <out>/runs/.
    #[arg(long)]
    pub keep_run_logs: bool,
}

#[derive(Debug)]
pub struct ExperimentSpec {
    pub name: String,
    pub data: PathBuf,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub base: Vec<(String, String)>,
    pub grid: Vec<(String, Vec<String>)>,
}

pub fn parse_spec(text: &str, origin: &Path) -> anyhow::Result<ExperimentSpec> {
    let mut name = None;
    let mut data = None;
    let mut out = None;
    let mut seeds = Vec::new();
    let mut base = Vec::new();
    let mut grid: Vec<(String, Vec<String>)> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let key = it.next().expect("non-empty line");
        let rest: Vec<&str> = it.collect();
        let ctx = || format!("{}:{}", origin.display(), ln + 1);
        match key {
            "name" => name = Some(rest.join(" ")),
            "data" => data = Some(PathBuf::from(rest.join(" "))),
            "out" => out = Some(PathBuf::from(rest.join(" "))),
            "seeds" => {
                seeds = rest
                    .iter()
                    .map(|s| s.parse::<u64>().with_context(|| format!("{}: bad seed '{}'", ctx(), s)))
                    .collect::<anyhow::Result<_>>()?;
            }
            "set" => {
                if rest.len() < 2 {
                    bail!("{}: 'set' needs a field and a value", ctx());
                }
                validate_field(rest[0]).with_context(ctx)?;
                base.push((rest[0].to_string(), rest[1].to_string()));
            }
            "grid" => {
                if rest.len() < 2 {
                    bail!("{}: 'grid' needs a field and at least one value", ctx());
                }
                validate_field(rest[0]).with_context(ctx)?;
                if grid.iter().any(|(f, _)| f == rest[0]) {
                    bail!("{}: duplicate grid axis '{}'", ctx(), rest[0]);
                }
                grid.push((
                    rest[0].to_string(),
                    rest[1..].iter().map(|s| s.to_string()).collect(),
                ));
            }
            other => bail!("{}: unknown spec key '{}'", ctx(), other),
        }
    }
    let spec = ExperimentSpec {
        name: name.context("spec is missing 'name'")?,
        data: data.context("spec is missing 'data'")?,
        out: out.context("spec is missing 'out'")?,
        seeds,
        base,
        grid,
    };
    if spec.seeds.is_empty() {
        bail!("spec needs a non-empty 'seeds' line");
    }
    if spec.grid.is_empty() || spec.grid.iter().any(|(_, vs)| vs.is_empty()) {
        bail!("spec needs at least one non-empty 'grid' axis");
    }
    Ok(spec)
}

const FIELDS: &[&str] = &[
    "annotated_fraction",
    "unannotated_fraction",
    "epochs_stage1",
    "epochs_stage2",
    "initial_lr",
    "lr_halving_period",
    "batch_size",
    "strategy",
    "beta1",
    "beta2",
    "beta_pair",
    "flip_fraction",
    "embed_dim",
    "val_subset",
    "regenerate_candidates",
    "sdc_tolerance_px",
];

fn validate_field(field: &str) -> anyhow::Result<()> {
    if !FIELDS.contains(&field) {
        bail!("unknown config field '{}' (expected one of {:?})", field, FIELDS);
    }
    Ok(())
}

pub fn apply_field(cfg: &mut TrainConfig, field: &str, value: &str) -> anyhow::Result<()> {
    let bad = || format!("bad value '{}' for field '{}'", value, field);
    match field {
        "annotated_fraction" => cfg.annotated_fraction = value.parse().with_context(bad)?,
        "unannotated_fraction" => cfg.unannotated_fraction = value.parse().with_context(bad)?,
        "epochs_stage1" => cfg.epochs_stage1 = value.parse().with_context(bad)?,
        "epochs_stage2" => cfg.epochs_stage2 = value.parse().with_context(bad)?,
        "initial_lr" => cfg.initial_lr = value.parse().with_context(bad)?,
        "lr_halving_period" => cfg.lr_halving_period = value.parse().with_context(bad)?,
        "batch_size" => cfg.batch_size = value.parse().with_context(bad)?,
        "strategy" => {
            cfg.strategy = ScoringStrategy::parse(value).with_context(bad)?;
        }
        "beta1" => cfg.dpo.beta1 = value.parse().with_context(bad)?,
        "beta2" => cfg.dpo.beta2 = value.parse().with_context(bad)?,
        "beta_pair" => {
            let (b1, b2) = value.split_once(':').with_context(bad)?;
            cfg.dpo.beta1 = b1.parse().with_context(bad)?;
            cfg.dpo.beta2 = b2.parse().with_context(bad)?;
        }
        "flip_fraction" => cfg.flip_fraction = value.parse().with_context(bad)?,
        "embed_dim" => {
            cfg.segmenter.embed_dim = value.parse().with_context(bad)?;
            cfg.segmenter.mid_dim = (cfg.segmenter.embed_dim / 2).max(1);
        }
        "val_subset" => cfg.val_subset = value.parse().with_context(bad)?,
        "regenerate_candidates" => cfg.regenerate_candidates = value.parse().with_context(bad)?,
        "sdc_tolerance_px" => cfg.sdc_tolerance_px = value.parse().with_context(bad)?,
        other => bail!("unknown config field '{}'", other),
    }
    Ok(())
}

/// Cartesian product of the grid axes, in axis order.
fn grid_points(grid: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (field, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((field.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

fn point_label(point: &[(String, String)]) -> String {
    point
        .iter()
        .map(|(f, v)| format!("{}={}", f, v))
        .collect::<Vec<_>>()
        .join(";")
}

/// Key identifying the stage-1 training a config requires: stage-2-only
/// fields are normalized away so grid points can share checkpoints.
fn stage1_key(cfg: &TrainConfig) -> String {
    let mut c = cfg.clone();
    c.epochs_stage2 = 0;
    c.unannotated_fraction = 0.0;
    c.strategy = ScoringStrategy::Ranking;
    c.dpo = Default::default();
    c.flip_fraction = 0.0;
    c.regenerate_candidates = true;
    c.canonical_string()
}

#[derive(Clone)]
struct RunMetrics {
    iou: f64,
    dice: f64,
    mdice: f64,
    msdc: f64,
}

fn macro_means(report: &prefseg_core::metrics::MetricReport) -> (f64, f64) {
    let n = report.per_class.len() as f64;
    let mdice = report.per_class.iter().map(|c| c.dice).sum::<f64>() / n;
    let msdc = report.per_class.iter().map(|c| c.sdc).sum::<f64>() / n;
    (mdice, msdc)
}

fn run_one(
    cfg: &TrainConfig,
    dataset: &Dataset,
    cache: &PromptCache,
    fine: &PolicyParams,
    run_log: Option<PathBuf>,
) -> anyhow::Result<RunMetrics> {
    let policy = if cfg.epochs_stage2 > 0 {
        let out = align_stage2(fine, cfg, dataset, cache, None, false, None)?;
        if let Some(path) = run_log {
            std::fs::write(path, logs_to_csv(&out.log, "stage=2"))?;
        }
        out.policy
    } else {
        fine.clone()
    };
    let report = evaluate(&policy, dataset, Split::Test, cache, cfg.sdc_tolerance_px)?.report;
    let (mdice, msdc) = macro_means(&report);
    Ok(RunMetrics { iou: report.mean_iou, dice: report.mean_dice, mdice, msdc })
}

pub fn cmd_ablate(a: &AblateArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.spec)
        .with_context(|| format!("reading spec {}", a.spec.display()))?;
    let spec = parse_spec(&text, &a.spec)?;
    let out_dir = resolve_out(&spec.out);
    std::fs::create_dir_all(&out_dir)?;

    let dataset = load_dataset(&spec.data.join("manifest.txt"))?;
    let corpus = corpus_hash(&dataset.manifest.manifest_path())?;

    // resolve every grid point's config up front so field errors fail fast
    let points = grid_points(&spec.grid);
    let mut configs: Vec<(String, Vec<TrainConfig>)> = Vec::new(); // label, per-seed
    for point in &points {
        let mut per_seed = Vec::new();
        for &seed in &spec.seeds {
            let mut cfg = TrainConfig { seed, ..Default::default() };
            for (f, v) in spec.base.iter().chain(point) {
                apply_field(&mut cfg, f, v)?;
            }
            cfg.validate()?;
            per_seed.push(cfg);
        }
        configs.push((point_label(point), per_seed));
    }

    // one prompt cache covers the union of all runs
    let max_cfg = configs
        .iter()
        .flat_map(|(_, cs)| cs.iter())
        .cloned()
        .reduce(|mut acc, c| {
            acc.annotated_fraction = acc.annotated_fraction.max(c.annotated_fraction);
            acc.unannotated_fraction = acc.unannotated_fraction.max(c.unannotated_fraction);
            acc
        })
        .expect("non-empty grid");
    let cache = crate::runs::build_cache(&dataset, &max_cfg, true);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.max(1))
        .build()
        .context("building worker pool")?;

    // phase 1: unique stage-1 trainings
    let mut stage1_configs: HashMap<String, TrainConfig> = HashMap::new();
    for (_, per_seed) in &configs {
        for cfg in per_seed {
            stage1_configs.entry(stage1_key(cfg)).or_insert_with(|| cfg.clone());
        }
    }
    let mut keys: Vec<String> = stage1_configs.keys().cloned().collect();
    keys.sort();
    let fines: HashMap<String, anyhow::Result<PolicyParams>> = pool.install(|| {
        keys.par_iter()
            .map(|k| {
                let cfg = &stage1_configs[k];
                let r = train_stage1(cfg, &dataset, &cache, None, None)
                    .map(|o| o.policy)
                    .map_err(anyhow::Error::from);
                (k.clone(), r)
            })
            .collect()
    });

    // phase 2: grid runs
    let tasks: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|pi| (0..spec.seeds.len()).map(move |si| (pi, si)))
        .collect();
    let results: Vec<anyhow::Result<RunMetrics>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(pi, si)| {
                let (label, per_seed) = &configs[pi];
                let cfg = &per_seed[si];
                let fine = match &fines[&stage1_key(cfg)] {
                    Ok(p) => p,
                    Err(e) => bail!("stage1 failed: {}", e),
                };
                let run_log = a.keep_run_logs.then(|| {
                    let safe = label.replace(['=', ';', ':', '/'], "_");
                    out_dir.join("runs").join(format!("{}_seed{}.csv", safe, spec.seeds[si]))
                });
                if let Some(p) = &run_log {
                    std::fs::create_dir_all(p.parent().expect("runs dir"))?;
                }
                run_one(cfg, &dataset, &cache, fine, run_log)
            })
            .collect()
    });

    // assemble the table
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher.update(corpus.as_bytes());
    let spec_hash = format!("{:x}", hasher.finalize());

    let mut csv = String::new();
    csv.push_str(&format!("# name={}\n", spec.name));
    csv.push_str(&format!("# config_hash={}\n", spec_hash));
    csv.push_str(&format!("# corpus_hash={}\n", corpus));
    csv.push_str("kind,label,seed,iou,dice,mdice,msdc,status\n");
    for (pi, (label, _)) in configs.iter().enumerate() {
        let mut ok_rows: Vec<&RunMetrics> = Vec::new();
        for (si, &seed) in spec.seeds.iter().enumerate() {
            let idx = tasks.iter().position(|&t| t == (pi, si)).expect("task exists");
            match &results[idx] {
                Ok(m) => {
                    csv.push_str(&format!(
                        "run,{},{},{},{},{},{},ok\n",
                        label, seed, m.iou, m.dice, m.mdice, m.msdc
                    ));
                    ok_rows.push(m);
                }
                Err(e) => {
                    let msg = e.to_string().replace([',', '\n'], " ");
                    csv.push_str(&format!("run,{},{},,,,,error: {}\n", label, seed, msg));
                }
            }
        }
        let stats = |f: fn(&RunMetrics) -> f64| -> (f64, f64) {
            let n = ok_rows.len() as f64;
            if ok_rows.is_empty() {
                return (f64::NAN, f64::NAN);
            }
            let mean = ok_rows.iter().map(|m| f(m)).sum::<f64>() / n;
            let var = if ok_rows.len() > 1 {
                ok_rows.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        };
        let (iou_m, iou_s) = stats(|m| m.iou);
        let (dice_m, dice_s) = stats(|m| m.dice);
        let (mdice_m, mdice_s) = stats(|m| m.mdice);
        let (msdc_m, msdc_s) = stats(|m| m.msdc);
        let status = if ok_rows.is_empty() {
            "error: no successful runs"
        } else {
            "ok"
        };
        csv.push_str(&format!(
            "mean,{},,{},{},{},{},{}\n",
            label, iou_m, dice_m, mdice_m, msdc_m, status
        ));
        csv.push_str(&format!(
            "std,{},,{},{},{},{},{}\n",
            label, iou_s, dice_s, mdice_s, msdc_s, status
        ));
    }
    let out_file = out_dir.join(format!("{}.csv", spec.name));
    std::fs::write(&out_file, &csv)?;
    println!("wrote {}", out_file.display());
    Ok(())
}
