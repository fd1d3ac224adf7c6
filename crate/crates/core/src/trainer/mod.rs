//! Two-stage training driver: supervised fine-tuning, preference
//! alignment, optimizer, prompt cache, and evaluation.

mod adam;
mod cache;
mod config;
mod eval;
mod run;

pub use adam::{
    load_optimizer_state, optimizer_step, save_optimizer_state, AdamHyper, OptimizerState,
};
pub use cache::PromptCache;
pub use config::{lr_at, TrainConfig};
pub use eval::{evaluate, evaluate_with, EvalOutput};
pub use run::{align_stage2, logs_to_csv, train_stage1, EpochHook, EpochLog, ResumeState, StageOutput};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_dataset, load_dataset, Dataset, GenParams, Split};
    use crate::grid::ProbMap;
    use crate::prompts::CrfParams;
    use crate::segmenter::{ParamGroup, SegmenterConfig};
    use std::sync::OnceLock;

    // one tiny corpus + cache shared by the trainer tests
    struct Fixture {
        dataset: Dataset,
        cache: PromptCache,
    }

    fn fixture() -> &'static Fixture {
        static FIX: OnceLock<Fixture> = OnceLock::new();
        FIX.get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let params = GenParams {
                seed: 21,
                n: 12,
                size: 32,
                class_count: 2,
                split_fractions: [0.25, 0.25, 0.5],
                ..Default::default()
            };
            let manifest = generate_dataset(&params, dir.path()).unwrap();
            let dataset = load_dataset(&manifest.manifest_path()).unwrap();
            let cfg = test_config();
            let cache = PromptCache::build_for_dataset(&dataset, &cfg.prompt);
            Fixture { dataset, cache }
        })
    }

    fn test_config() -> TrainConfig {
        TrainConfig {
            seed: 5,
            annotated_fraction: 0.5,
            unannotated_fraction: 0.5,
            epochs_stage1: 2,
            epochs_stage2: 2,
            batch_size: 2,
            segmenter: SegmenterConfig { embed_dim: 8, mid_dim: 4, text_dim: 16, ..Default::default() },
            prompt: crate::prompts::PromptConfig {
                crf: CrfParams { iterations: 2, ..Default::default() },
                ..Default::default()
            },
            val_subset: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let f = fixture();
        let cfg = TrainConfig { epochs_stage1: 0, epochs_stage2: 0, ..test_config() };
        let out = train_stage1(&cfg, &f.dataset, &f.cache, None, None).unwrap();
        let init = crate::segmenter::PolicyParams::init(
            cfg.segmenter.clone(),
            crate::seeding::derive_seed(cfg.seed, "init", &[]),
        )
        .unwrap();
        for i in 0..out.policy.blocks().len() {
            assert_eq!(out.policy.block(i).data(), init.block(i).data());
        }
        assert!(out.log.is_empty());

        let aligned = align_stage2(&out.policy, &cfg, &f.dataset, &f.cache, None, false, None).unwrap();
        for i in 0..aligned.policy.blocks().len() {
            assert_eq!(aligned.policy.block(i).data(), out.policy.block(i).data());
        }
    }

    #[test]
    fn log_row_count_matches_epochs() {
        let f = fixture();
        let cfg = test_config();
        let out = train_stage1(&cfg, &f.dataset, &f.cache, None, None).unwrap();
        assert_eq!(out.log.len(), cfg.epochs_stage1);
        assert_eq!(out.log[0].epoch, 0);
        let aligned = align_stage2(&out.policy, &cfg, &f.dataset, &f.cache, None, false, None).unwrap();
        assert_eq!(aligned.log.len(), cfg.epochs_stage2);
    }

    #[test]
    fn stage2_freezes_non_decoder_groups_bitwise() {
        let f = fixture();
        let cfg = test_config();
        let fine = train_stage1(&cfg, &f.dataset, &f.cache, None, None).unwrap();
        let aligned = align_stage2(&fine.policy, &cfg, &f.dataset, &f.cache, None, false, None).unwrap();
        assert!(aligned.policy.group_bits_equal(&fine.policy, ParamGroup::Encoder));
        assert!(aligned.policy.group_bits_equal(&fine.policy, ParamGroup::Prompt));
        assert!(!aligned.policy.group_bits_equal(&fine.policy, ParamGroup::Decoder));
    }

    #[test]
    fn identical_seeds_identical_runs() {
        let f = fixture();
        let cfg = test_config();
        let run = || {
            let fine = train_stage1(&cfg, &f.dataset, &f.cache, None, None).unwrap();
            let aligned =
                align_stage2(&fine.policy, &cfg, &f.dataset, &f.cache, None, false, None).unwrap();
            let report = evaluate(&aligned.policy, &f.dataset, Split::Test, &f.cache, 1.0)
                .unwrap()
                .report
                .to_csv("t");
            (aligned, report)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        for i in 0..a.policy.blocks().len() {
            let bits_equal = a
                .policy
                .block(i)
                .data()
                .iter()
                .zip(b.policy.block(i).data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(bits_equal, "block {} differs", i);
        }
        assert_eq!(ra, rb);
    }

    #[test]
    fn resume_matches_straight_run() {
        let f = fixture();
        let cfg = test_config();

        let straight = train_stage1(&cfg, &f.dataset, &f.cache, None, None).unwrap();

        let half_cfg = TrainConfig { epochs_stage1: 1, ..cfg.clone() };
        let half = train_stage1(&half_cfg, &f.dataset, &f.cache, None, None).unwrap();
        let resumed = train_stage1(
            &cfg,
            &f.dataset,
            &f.cache,
            Some(ResumeState { policy: half.policy, opt: half.opt_state, next_epoch: 1 }),
            None,
        )
        .unwrap();
        for i in 0..straight.policy.blocks().len() {
            let bits_equal = straight
                .policy
                .block(i)
                .data()
                .iter()
                .zip(resumed.policy.block(i).data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(bits_equal, "block {} differs after resume", i);
        }
    }

    #[test]
    fn empty_annotated_selection_is_rejected() {
        let f = fixture();
        let cfg = TrainConfig { annotated_fraction: 0.0, ..test_config() };
        assert!(matches!(
            train_stage1(&cfg, &f.dataset, &f.cache, None, None),
            Err(crate::error::Error::EmptySplit { .. })
        ));
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let f = fixture();
        let out = evaluate_with(&f.dataset, Split::Test, 1.0, 0.5, |rec| {
            Ok(Some(ProbMap {
                h: rec.gt_mask.h,
                w: rec.gt_mask.w,
                data: rec.gt_mask.data.iter().map(|&b| b as u8 as f64).collect(),
            }))
        })
        .unwrap();
        assert_eq!(out.report.mean_dice, 1.0);
        assert_eq!(out.report.mean_iou, 1.0);
        assert_eq!(out.report.mean_sdc, 1.0);
    }

    #[test]
    fn constant_half_maps_predict_all_foreground() {
        let f = fixture();
        let out = evaluate_with(&f.dataset, Split::Test, 1.0, 0.5, |rec| {
            Ok(Some(ProbMap {
                h: rec.gt_mask.h,
                w: rec.gt_mask.w,
                data: vec![0.5; rec.gt_mask.data.len()],
            }))
        })
        .unwrap();
        for (row, rec) in out.report.rows.iter().zip(f.dataset.split(Split::Test)) {
            let g = rec.gt_mask.area() as f64;
            let n = rec.gt_mask.data.len() as f64;
            assert!((row.dice - 2.0 * g / (g + n)).abs() < 1e-12);
        }
    }

    #[test]
    fn report_has_row_per_test_sample_plus_aggregates() {
        let f = fixture();
        let n_test = f.dataset.split(Split::Test).len();
        let out = evaluate_with(&f.dataset, Split::Test, 1.0, 0.5, |_| Ok(None)).unwrap();
        assert_eq!(out.report.rows.len(), n_test);
        assert_eq!(out.skipped_prompts, n_test);
        let csv = out.report.to_csv("h");
        assert_eq!(csv.lines().filter(|l| l.starts_with("sample,")).count(), n_test);
        assert_eq!(csv.lines().filter(|l| l.starts_with("overall-mean,")).count(), 1);
    }
}
