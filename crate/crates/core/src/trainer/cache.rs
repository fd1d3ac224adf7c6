//! Per-sample prompt cache. Prompts depend only on the corpus and the
//! prompt configuration (point seeds derive from corpus seed + sample id),
//! so one cache serves every run over the same dataset.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::corpus::{Dataset, SampleRecord};
use crate::prompts::{build_prompts, PromptConfig, PromptSet};
use crate::seeding::derive_seed;

pub struct PromptCache {
    entries: HashMap<u64, std::result::Result<PromptSet, String>>,
}

impl PromptCache {
    pub fn prompt_seed(corpus_seed: u64, sample_id: u64) -> u64 {
        derive_seed(corpus_seed, "prompt", &[sample_id])
    }

    /// Build prompts for the given samples in parallel. Failures (empty
    /// prompts) are recorded, not fatal: the owning sample is skipped.
    pub fn build<'a>(
        samples: impl IntoIterator<Item = &'a SampleRecord>,
        corpus_seed: u64,
        cfg: &PromptConfig,
    ) -> PromptCache {
        let samples: Vec<&SampleRecord> = samples.into_iter().collect();
        let entries = samples
            .par_iter()
            .map(|rec| {
                let seed = Self::prompt_seed(corpus_seed, rec.id);
                let r = build_prompts(rec, cfg, seed).map_err(|e| e.to_string());
                (rec.id, r)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect();
        PromptCache { entries }
    }

    pub fn build_for_dataset(dataset: &Dataset, cfg: &PromptConfig) -> PromptCache {
        Self::build(dataset.samples.iter(), dataset.manifest.seed, cfg)
    }

    pub fn get(&self, id: u64) -> Option<&PromptSet> {
        self.entries.get(&id).and_then(|r| r.as_ref().ok())
    }

    pub fn failure(&self, id: u64) -> Option<&str> {
        self.entries.get(&id).and_then(|r| r.as_ref().err().map(String::as_str))
    }

    pub fn failed_count(&self) -> usize {
        self.entries.values().filter(|r| r.is_err()).count()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
