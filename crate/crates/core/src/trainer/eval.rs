//! Policy evaluation over a dataset split.

use crate::corpus::{Dataset, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::grid::{Mask, ProbMap};
use crate::metrics::{aggregate, dice, iou, surface_dice, MetricReport, MetricRow};
use crate::segmenter::PolicyParams;
use crate::trainer::cache::PromptCache;

pub struct EvalOutput {
    pub report: MetricReport,
    /// Samples evaluated as empty predictions because prompt derivation
    /// failed for them.
    pub skipped_prompts: usize,
}

/// Evaluate an arbitrary prediction source. `predict` returns `None` when no
/// prediction can be made; the sample then scores against an empty mask.
pub fn evaluate_with<F>(
    dataset: &Dataset,
    split: Split,
    sdc_tolerance_px: f64,
    threshold: f64,
    mut predict: F,
) -> Result<EvalOutput>
where
    F: FnMut(&SampleRecord) -> Result<Option<ProbMap>>,
{
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::EmptySplit { split: split.as_str().to_string() });
    }
    let mut rows = Vec::with_capacity(samples.len());
    let mut skipped = 0usize;
    for rec in samples {
        let pred_mask = match predict(rec)? {
            Some(pm) => pm.threshold(threshold),
            None => {
                skipped += 1;
                Mask::empty(rec.gt_mask.h, rec.gt_mask.w)
            }
        };
        rows.push(MetricRow {
            id: rec.id,
            class_id: rec.class_id,
            dice: dice(&pred_mask, &rec.gt_mask)?,
            iou: iou(&pred_mask, &rec.gt_mask)?,
            sdc: surface_dice(&pred_mask, &rec.gt_mask, sdc_tolerance_px)?,
        });
    }
    Ok(EvalOutput { report: aggregate(rows, sdc_tolerance_px)?, skipped_prompts: skipped })
}

/// Evaluate a policy: probability maps thresholded at 0.5 against ground
/// truth, with Dice / IoU / Surface Dice per sample, per class, and overall.
pub fn evaluate(
    policy: &PolicyParams,
    dataset: &Dataset,
    split: Split,
    cache: &PromptCache,
    sdc_tolerance_px: f64,
) -> Result<EvalOutput> {
    evaluate_with(dataset, split, sdc_tolerance_px, 0.5, |rec| {
        match cache.get(rec.id) {
            Some(prompts) => policy.predict(&rec.image, prompts).map(Some),
            None => Ok(None),
        }
    })
}
