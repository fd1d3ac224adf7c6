//! Two-stage preference-aligned segmentation at desk scale.
//!
//! Stage 1 fine-tunes a small prompt-conditioned segmenter on a labeled
//! fraction of a synthetic corpus, with geometric prompts derived from
//! saliency heatmaps instead of human clicks. Stage 2 aligns the trained
//! model to a simulated annotator's preferences over thresholded
//! segmentation candidates, updating only the decoder against a frozen
//! reference copy.

pub mod annotator;
pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod prompts;
pub mod seeding;
pub mod segmenter;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{Image, Mask, ProbMap};
