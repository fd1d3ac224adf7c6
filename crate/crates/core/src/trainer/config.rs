//! Training configuration and the learning-rate schedule.

use std::fmt::Write as _;

use crate::annotator::{ScoringStrategy, DEFAULT_THRESHOLDS};
use crate::error::{Error, Result};
use crate::losses::{ComboConfig, DpoConfig, FirstTermRef};
use crate::prompts::PromptConfig;
use crate::segmenter::SegmenterConfig;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    /// Fraction of the training pool used with labels (stage 1).
    pub annotated_fraction: f64,
    /// Fraction of the training pool used without labels (stage 2).
    pub unannotated_fraction: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub initial_lr: f64,
    /// Learning rate halves every this many epochs, per stage.
    pub lr_halving_period: usize,
    pub batch_size: usize,
    pub strategy: ScoringStrategy,
    pub dpo: DpoConfig,
    pub combo: ComboConfig,
    pub flip_fraction: f64,
    pub thresholds: [f64; 4],
    pub segmenter: SegmenterConfig,
    pub prompt: PromptConfig,
    /// Refresh candidate masks from the current policy every epoch; when
    /// off, candidates are fixed from the reference policy once.
    pub regenerate_candidates: bool,
    /// Validation subset size (drawn from the test split) for epoch logs.
    pub val_subset: usize,
    pub sdc_tolerance_px: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            annotated_fraction: 0.10,
            unannotated_fraction: 0.10,
            epochs_stage1: 15,
            epochs_stage2: 30,
            initial_lr: 1e-4,
            lr_halving_period: 10,
            batch_size: 1,
            strategy: ScoringStrategy::Ranking,
            dpo: DpoConfig::default(),
            combo: ComboConfig::default(),
            flip_fraction: 0.0,
            thresholds: DEFAULT_THRESHOLDS,
            segmenter: SegmenterConfig::default(),
            prompt: PromptConfig::default(),
            regenerate_candidates: true,
            val_subset: 25,
            sdc_tolerance_px: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Error::InvalidConfig(d);
        if self.annotated_fraction < 0.0 || self.unannotated_fraction < 0.0 {
            return Err(bad("fractions must be nonnegative".into()));
        }
        if self.annotated_fraction + self.unannotated_fraction > 1.0 + 1e-12 {
            return Err(bad(format!(
                "annotated + unannotated fraction must be <= 1, got {}",
                self.annotated_fraction + self.unannotated_fraction
            )));
        }
        if self.initial_lr <= 0.0 {
            return Err(bad(format!("initial_lr must be > 0, got {}", self.initial_lr)));
        }
        if self.lr_halving_period == 0 {
            return Err(bad("lr_halving_period must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_fraction) {
            return Err(bad(format!(
                "flip_fraction must be in [0, 1], got {}",
                self.flip_fraction
            )));
        }
        self.dpo.validate()?;
        self.segmenter.validate()?;
        self.prompt.crf.validate()?;
        Ok(())
    }

    /// Stable one-line-per-field rendering; feeds the run config hash.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "annotated_fraction={}", self.annotated_fraction);
        let _ = writeln!(s, "unannotated_fraction={}", self.unannotated_fraction);
        let _ = writeln!(s, "epochs_stage1={}", self.epochs_stage1);
        let _ = writeln!(s, "epochs_stage2={}", self.epochs_stage2);
        let _ = writeln!(s, "initial_lr={}", self.initial_lr);
        let _ = writeln!(s, "lr_halving_period={}", self.lr_halving_period);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "strategy={}", self.strategy);
        let _ = writeln!(s, "dpo.beta={}", self.dpo.beta);
        let _ = writeln!(s, "dpo.beta1={}", self.dpo.beta1);
        let _ = writeln!(s, "dpo.beta2={}", self.dpo.beta2);
        let _ = writeln!(s, "dpo.epsilon={}", self.dpo.epsilon);
        let _ = writeln!(
            s,
            "dpo.first_term_ref={}",
            match self.dpo.first_term_ref {
                FirstTermRef::Matched => "matched",
                FirstTermRef::SecondCandidate => "second-candidate",
            }
        );
        let _ = writeln!(s, "combo.focal_weight={}", self.combo.focal_weight);
        let _ = writeln!(s, "combo.dice_weight={}", self.combo.dice_weight);
        let _ = writeln!(s, "combo.gamma={}", self.combo.gamma);
        let _ = writeln!(s, "combo.alpha={}", self.combo.alpha);
        let _ = writeln!(s, "combo.dice_smooth={}", self.combo.dice_smooth);
        let _ = writeln!(s, "flip_fraction={}", self.flip_fraction);
        let _ = writeln!(s, "thresholds={:?}", self.thresholds);
        let _ = writeln!(s, "segmenter.embed_dim={}", self.segmenter.embed_dim);
        let _ = writeln!(s, "segmenter.mid_dim={}", self.segmenter.mid_dim);
        let _ = writeln!(s, "segmenter.text_dim={}", self.segmenter.text_dim);
        let _ = writeln!(s, "segmenter.use_prev_mask={}", self.segmenter.use_prev_mask);
        let _ = writeln!(s, "crf.iterations={}", self.prompt.crf.iterations);
        let _ = writeln!(s, "crf.unary_scale={}", self.prompt.crf.unary_scale);
        let _ = writeln!(s, "crf.appearance_weight={}", self.prompt.crf.appearance_weight);
        let _ = writeln!(s, "crf.appearance_sigma_spatial={}", self.prompt.crf.appearance_sigma_spatial);
        let _ = writeln!(s, "crf.appearance_sigma_intensity={}", self.prompt.crf.appearance_sigma_intensity);
        let _ = writeln!(s, "crf.smoothness_weight={}", self.prompt.crf.smoothness_weight);
        let _ = writeln!(s, "crf.smoothness_sigma={}", self.prompt.crf.smoothness_sigma);
        let _ = writeln!(s, "prompt.bin_threshold={}", self.prompt.bin_threshold);
        let _ = writeln!(s, "prompt.max_components={}", self.prompt.max_components);
        let _ = writeln!(s, "prompt.min_area_fraction={}", self.prompt.min_area_fraction);
        let _ = writeln!(s, "prompt.points_per_box={}", self.prompt.points_per_box);
        let _ = writeln!(s, "regenerate_candidates={}", self.regenerate_candidates);
        let _ = writeln!(s, "val_subset={}", self.val_subset);
        let _ = writeln!(s, "sdc_tolerance_px={}", self.sdc_tolerance_px);
        s
    }

    pub fn config_hash(&self, corpus_hash: &str) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.canonical_string().as_bytes());
        h.update(corpus_hash.as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// initial_lr * 0.5^(epoch / period), integer division.
pub fn lr_at(epoch: usize, initial_lr: f64, period: usize) -> f64 {
    initial_lr * 0.5f64.powi((epoch / period.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_closed_form() {
        assert_eq!(lr_at(0, 1e-4, 10), 1e-4);
        assert_eq!(lr_at(9, 1e-4, 10), 1e-4);
        assert_eq!(lr_at(10, 1e-4, 10), 5e-5);
        assert_eq!(lr_at(25, 1e-4, 10), 2.5e-5);
    }

    #[test]
    fn validation_catches_fraction_overflow() {
        let cfg = TrainConfig {
            annotated_fraction: 0.6,
            unannotated_fraction: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn canonical_string_distinguishes_configs() {
        let a = TrainConfig::default();
        let b = TrainConfig { flip_fraction: 0.3, ..Default::default() };
        assert_ne!(a.canonical_string(), b.canonical_string());
        assert_eq!(a.canonical_string(), TrainConfig::default().canonical_string());
        assert_ne!(a.config_hash("x"), a.config_hash("y"));
    }
}
