//! Synthetic training corpus: blob images, ground-truth masks, saliency
//! heatmaps, and per-class text-embedding stubs, persisted as PGM files
//! plus a plain-text manifest.

mod gen;
mod manifest;
mod pgm;

pub use gen::{generate_dataset, make_heatmap, GenParams};
pub use manifest::{corpus_hash, load_dataset, load_manifest, DatasetManifest, ManifestEntry};
pub use pgm::{read_pgm, write_pgm, Pgm};

use crate::grid::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    AnnotatedTrain,
    UnannotatedTrain,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::AnnotatedTrain, Split::UnannotatedTrain, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::AnnotatedTrain => "annotated-train",
            Split::UnannotatedTrain => "unannotated-train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "annotated-train" => Some(Split::AnnotatedTrain),
            "unannotated-train" => Some(Split::UnannotatedTrain),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One training/eval example.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub id: u64,
    pub class_id: usize,
    pub split: Split,
    pub image: Image,
    pub gt_mask: Mask,
    pub heatmap: Image,
    pub text_stub: Vec<f64>,
}

/// Manifest plus fully loaded samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> Vec<&SampleRecord> {
        self.samples.iter().filter(|r| r.split == s).collect()
    }

    pub fn by_id(&self, id: u64) -> Option<&SampleRecord> {
        self.samples.iter().find(|r| r.id == id)
    }
}
