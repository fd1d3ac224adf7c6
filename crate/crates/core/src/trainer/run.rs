//! Two-stage optimization driver.
//!
//! Stage 1 fine-tunes every parameter group on the annotated fraction with
//! the focal+dice combination. Stage 2 copies the result, freezes it as the
//! reference, and fine-tunes the decoder only: candidates are thresholded
//! from the policy's own probability map, scored by the virtual annotator
//! against ground truth (rating signal only), and pushed through the
//! four-candidate preference loss. All per-epoch randomness derives from
//! (seed, purpose, epoch), so runs resume bit-exactly.

use rand::seq::SliceRandom;

use crate::annotator::{flip_noise, generate_candidates, score_candidates, ScoringStrategy};
use crate::autodiff::{Tape, ValueId};
use crate::corpus::{Dataset, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::grid::ProbMap;
use crate::losses::{combo_loss, dpo_quad_loss};
use crate::metrics::dice;
use crate::segmenter::{log_likelihood, log_likelihood_value, PolicyParams, TrainableGroups};
use crate::seeding::{derive_seed, rng_for};
use crate::trainer::adam::{optimizer_step, OptimizerState};
use crate::trainer::cache::PromptCache;
use crate::trainer::config::{lr_at, TrainConfig};

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_dice: Option<f64>,
}

pub struct StageOutput {
    pub policy: PolicyParams,
    pub log: Vec<EpochLog>,
    pub opt_state: OptimizerState,
    /// Samples dropped because no prompt could be derived for them.
    pub skipped_samples: usize,
    /// Candidate audit rows (epoch-prefixed CSV), when enabled.
    pub audit_rows: Vec<String>,
}

/// Mid-run state for resumable training.
pub struct ResumeState {
    pub policy: PolicyParams,
    pub opt: OptimizerState,
    pub next_epoch: usize,
}

/// Called after each completed epoch with (epoch, policy, optimizer state);
/// lets callers persist mid-run snapshots for later resumption.
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, &PolicyParams, &OptimizerState) -> Result<()>;

pub fn logs_to_csv(logs: &[EpochLog], header: &str) -> String {
    let mut s = String::new();
    for line in header.lines() {
        s.push_str("# ");
        s.push_str(line);
        s.push('\n');
    }
    s.push_str("epoch,lr,loss,val_dice\n");
    for l in logs {
        let val = l.val_dice.map(|v| format!("{}", v)).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", l.epoch, l.lr, l.loss, val));
    }
    s
}

fn epoch_order(seed: u64, tag: &str, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, tag, &[epoch as u64]));
    order
}

/// Samples of a split actually used by a stage: the first
/// round(fraction * train_pool) entries, restricted to those with prompts.
fn usable_samples<'a>(
    dataset: &'a Dataset,
    cache: &PromptCache,
    split: Split,
    fraction: f64,
) -> Result<(Vec<&'a SampleRecord>, usize)> {
    let pool = dataset.split(Split::AnnotatedTrain).len()
        + dataset.split(Split::UnannotatedTrain).len();
    let want = (fraction * pool as f64).round() as usize;
    let available = dataset.split(split);
    if want == 0 || available.is_empty() {
        return Err(Error::EmptySplit { split: split.as_str().to_string() });
    }
    if want > available.len() {
        return Err(Error::InvalidConfig(format!(
            "fraction {} of a {}-sample training pool needs {} samples, split '{}' has {}",
            fraction,
            pool,
            want,
            split,
            available.len()
        )));
    }
    let mut skipped = 0usize;
    let mut usable = Vec::with_capacity(want);
    for rec in &available[..want] {
        if cache.get(rec.id).is_some() {
            usable.push(*rec);
        } else {
            skipped += 1;
        }
    }
    if usable.is_empty() {
        return Err(Error::EmptySplit {
            split: format!("{} (all {} candidates lack prompts)", split, want),
        });
    }
    Ok((usable, skipped))
}

fn batch_mean(tape: &mut Tape, losses: &[ValueId]) -> Result<ValueId> {
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.add(acc, l)?;
    }
    tape.scale(acc, 1.0 / losses.len() as f64)
}

/// Per-sample decoder inputs that stay constant while the encoder and
/// prompt projections are frozen.
struct CachedForward {
    feat_shape: Vec<usize>,
    feat: Vec<f64>,
    pembed: Vec<f64>,
    ref_prob: Vec<f64>,
}

fn cache_forward(
    reference: &PolicyParams,
    rec: &SampleRecord,
    cache: &PromptCache,
) -> Result<CachedForward> {
    let prompts = cache.get(rec.id).expect("caller filtered usable samples");
    let (feat_shape, feat) = reference.feature_values(&rec.image)?;
    let pembed = reference.prompt_embedding_values(prompts, (rec.image.h, rec.image.w))?;
    let ref_prob = reference
        .decode_values(&feat_shape, &feat, &pembed)?
        .data;
    Ok(CachedForward { feat_shape, feat, pembed, ref_prob })
}

fn val_dice_full(
    policy: &PolicyParams,
    dataset: &Dataset,
    cache: &PromptCache,
    val_subset: usize,
) -> Result<Option<f64>> {
    if val_subset == 0 {
        return Ok(None);
    }
    let test = dataset.split(Split::Test);
    let mut scores = Vec::new();
    for rec in test.iter().take(val_subset) {
        let Some(prompts) = cache.get(rec.id) else { continue };
        let pm = policy.predict(&rec.image, prompts)?;
        scores.push(dice(&pm.threshold(0.5), &rec.gt_mask)?);
    }
    Ok(if scores.is_empty() {
        None
    } else {
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    })
}

/// Stage 1: supervised fine-tuning of all parameter groups on the
/// annotated fraction, with unsupervised prompts.
pub fn train_stage1(
    config: &TrainConfig,
    dataset: &Dataset,
    cache: &PromptCache,
    resume: Option<ResumeState>,
    mut hook: Option<EpochHook>,
) -> Result<StageOutput> {
    config.validate()?;
    let (usable, skipped) =
        usable_samples(dataset, cache, Split::AnnotatedTrain, config.annotated_fraction)?;

    let (mut policy, mut opt, start_epoch) = match resume {
        Some(r) => (r.policy.trainable_copy(), r.opt, r.next_epoch),
        None => {
            let p = PolicyParams::init(
                config.segmenter.clone(),
                derive_seed(config.seed, "init", &[]),
            )?;
            let opt = OptimizerState::new(&p);
            (p, opt, 0)
        }
    };

    let mut log = Vec::new();
    for epoch in start_epoch..config.epochs_stage1 {
        let lr = lr_at(epoch, config.initial_lr, config.lr_halving_period);
        let order = epoch_order(config.seed, "stage1-order", epoch, usable.len());
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let binding = policy.bind(&mut tape, TrainableGroups::ALL);
            let mut losses = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let rec = usable[si];
                let prompts = cache.get(rec.id).expect("usable");
                let feat = policy.encode_image(&mut tape, &binding, &rec.image)?;
                let pe = policy.encode_prompts(
                    &mut tape,
                    &binding,
                    prompts,
                    (rec.image.h, rec.image.w),
                )?;
                let pm = policy.decode_mask(&mut tape, &binding, feat, pe, None)?;
                losses.push(combo_loss(&mut tape, pm, &rec.gt_mask, &config.combo)?);
            }
            let batch_loss = batch_mean(&mut tape, &losses)?;
            tape.backward(batch_loss)?;
            let grads = policy.collect_grads(&tape, &binding);
            optimizer_step(&mut policy, &grads, &mut opt, lr)?;
            loss_sum += tape.scalar_value(batch_loss) * chunk.len() as f64;
        }
        let val = val_dice_full(&policy, dataset, cache, config.val_subset)?;
        log.push(EpochLog {
            epoch,
            lr,
            loss: loss_sum / usable.len() as f64,
            val_dice: val,
        });
        if let Some(h) = hook.as_mut() {
            h(epoch, &policy, &opt)?;
        }
    }
    Ok(StageOutput { policy, log, opt_state: opt, skipped_samples: skipped, audit_rows: Vec::new() })
}

/// Stage 2: preference alignment of the decoder against the frozen stage-1
/// reference, on the unannotated fraction. Ground truth is consulted only
/// by the virtual annotator's scoring, never by the gradient path.
pub fn align_stage2(
    pi_fine: &PolicyParams,
    config: &TrainConfig,
    dataset: &Dataset,
    cache: &PromptCache,
    resume: Option<ResumeState>,
    audit: bool,
    mut hook: Option<EpochHook>,
) -> Result<StageOutput> {
    config.validate()?;
    if !pi_fine.all_finite() {
        return Err(Error::InvalidConfig("reference policy has non-finite parameters".into()));
    }
    let reference = pi_fine.frozen_copy();
    let (usable, skipped) =
        usable_samples(dataset, cache, Split::UnannotatedTrain, config.unannotated_fraction)?;

    let cached: Vec<CachedForward> = usable
        .iter()
        .map(|rec| cache_forward(&reference, rec, cache))
        .collect::<Result<_>>()?;

    // validation inputs also route through the frozen encoder
    let val_cached: Vec<(&SampleRecord, CachedForward)> = dataset
        .split(Split::Test)
        .into_iter()
        .filter(|r| cache.get(r.id).is_some())
        .take(config.val_subset)
        .map(|rec| cache_forward(&reference, rec, cache).map(|c| (rec, c)))
        .collect::<Result<_>>()?;

    let (mut policy, mut opt, start_epoch) = match resume {
        Some(r) => (r.policy.trainable_copy(), r.opt, r.next_epoch),
        None => (pi_fine.trainable_copy(), OptimizerState::new(pi_fine), 0),
    };

    let mut log = Vec::new();
    let mut audit_rows = Vec::new();
    for epoch in start_epoch..config.epochs_stage2 {
        let lr = lr_at(epoch, config.initial_lr, config.lr_halving_period);
        let order = epoch_order(config.seed, "stage2-order", epoch, usable.len());
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let binding = policy.bind(&mut tape, TrainableGroups::DECODER_ONLY);
            let mut losses = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let rec = usable[si];
                let cf = &cached[si];
                let feat = tape.constant(&cf.feat_shape, &cf.feat)?;
                let pe = tape.constant(&[cf.pembed.len()], &cf.pembed)?;
                let prob = policy.decode_mask(&mut tape, &binding, feat, pe, None)?;

                let source = if config.regenerate_candidates {
                    ProbMap::new(rec.image.h, rec.image.w, tape.value(prob).to_vec())?
                } else {
                    ProbMap::new(rec.image.h, rec.image.w, cf.ref_prob.clone())?
                };
                let cands = generate_candidates(&source, &config.thresholds)?;
                let scored = score_candidates(
                    &cands,
                    &config.thresholds,
                    &rec.gt_mask,
                    config.strategy,
                    derive_seed(config.seed, "rate", &[rec.id]),
                )?;
                // per-sample corruption: the flip pattern is a property of
                // the sample, stable across epochs
                let noisy = flip_noise(
                    &scored,
                    config.flip_fraction,
                    derive_seed(config.seed, "flip", &[rec.id]),
                )?;
                if audit {
                    audit_rows.push(format!("{},{}", epoch, noisy.audit_row(rec.id)));
                }

                let loss = match config.strategy {
                    ScoringStrategy::BestCandidateOnly => {
                        let best = &noisy.candidates[noisy.best()];
                        combo_loss(&mut tape, prob, best, &config.combo)?
                    }
                    ScoringStrategy::Rating | ScoringStrategy::Ranking => {
                        let mut lp_policy = [prob; 4];
                        let mut lp_ref = [0.0f64; 4];
                        for (k, ci) in noisy.ordered().enumerate() {
                            lp_policy[k] = log_likelihood(&mut tape, prob, &noisy.candidates[ci])?;
                            lp_ref[k] = log_likelihood_value(&cf.ref_prob, &noisy.candidates[ci]);
                        }
                        dpo_quad_loss(&mut tape, lp_policy, lp_ref, &config.dpo)?
                    }
                };
                losses.push(loss);
            }
            let batch_loss = batch_mean(&mut tape, &losses)?;
            tape.backward(batch_loss)?;
            let grads = policy.collect_grads(&tape, &binding);
            optimizer_step(&mut policy, &grads, &mut opt, lr)?;
            loss_sum += tape.scalar_value(batch_loss) * chunk.len() as f64;
        }

        let val = if config.val_subset == 0 || val_cached.is_empty() {
            None
        } else {
            let mut scores = Vec::with_capacity(val_cached.len());
            for (rec, cf) in &val_cached {
                let pm = policy.decode_values(&cf.feat_shape, &cf.feat, &cf.pembed)?;
                scores.push(dice(&pm.threshold(0.5), &rec.gt_mask)?);
            }
            Some(scores.iter().sum::<f64>() / scores.len() as f64)
        };
        log.push(EpochLog { epoch, lr, loss: loss_sum / usable.len() as f64, val_dice: val });
        if let Some(h) = hook.as_mut() {
            h(epoch, &policy, &opt)?;
        }
    }
    Ok(StageOutput { policy, log, opt_state: opt, skipped_samples: skipped, audit_rows })
}
