//! Unsupervised visual-prompt pipeline: saliency heatmap to CRF-refined
//! mask to area-filtered components to bounding boxes and point prompts.

mod build;
mod components;
mod crf;

pub use build::{
    binarize, build_prompts, derive_prompts, dump_prompt_debug, PromptConfig, PromptDerivation,
};
pub use components::{
    connected_components, extract_box, sample_points, select_components, BoundingBox, Component,
    Connectivity, PointPrompt, PromptSet,
};
pub use crf::{crf_refine, CrfParams, DENSE_LIMIT, UNARY_EPS};
