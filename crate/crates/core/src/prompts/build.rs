//! End-to-end visual prompt derivation:
//! heatmap -> CRF -> binarize -> components -> boxes + sampled points.

use std::path::Path;

use crate::corpus::SampleRecord;
use crate::error::{Error, Result};
use crate::grid::{Mask, ProbMap};
use crate::prompts::components::{
    connected_components, extract_box, sample_points, select_components, Connectivity, PromptSet,
};
use crate::prompts::crf::{crf_refine, CrfParams};
use crate::seeding::derive_seed;

/// Pixel on iff probability >= threshold.
pub fn binarize(prob_map: &ProbMap, threshold: f64) -> Result<Mask> {
    if !(0.0..1.0).contains(&threshold) || threshold == 0.0 {
        return Err(Error::InvalidArgument {
            what: "binarize",
            detail: format!("threshold must be in (0, 1), got {}", threshold),
        });
    }
    Ok(prob_map.threshold(threshold))
}

#[derive(Debug, Clone)]
pub struct PromptConfig {
    pub crf: CrfParams,
    pub bin_threshold: f64,
    pub connectivity: Connectivity,
    /// Keep the largest component or up to two.
    pub max_components: usize,
    pub min_area_fraction: f64,
    pub points_per_box: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            crf: CrfParams::default(),
            bin_threshold: 0.5,
            connectivity: Connectivity::Eight,
            max_components: 2,
            min_area_fraction: 0.005,
            points_per_box: 3,
        }
    }
}

/// Derived prompts plus the intermediate rasters, for inspection.
pub struct PromptDerivation {
    pub refined: ProbMap,
    pub coarse_mask: Mask,
    pub prompts: PromptSet,
}

pub fn build_prompts(sample: &SampleRecord, cfg: &PromptConfig, seed: u64) -> Result<PromptSet> {
    Ok(derive_prompts(sample, cfg, seed)?.prompts)
}

pub fn derive_prompts(
    sample: &SampleRecord,
    cfg: &PromptConfig,
    seed: u64,
) -> Result<PromptDerivation> {
    let refined = crf_refine(&sample.heatmap, &sample.image, &cfg.crf)?;
    let coarse = binarize(&refined, cfg.bin_threshold)?;
    let comps = connected_components(&coarse, cfg.connectivity);
    let kept = select_components(
        &comps,
        cfg.max_components,
        cfg.min_area_fraction,
        coarse.h * coarse.w,
    )?;
    let mut boxes = Vec::with_capacity(kept.len());
    let mut points = Vec::new();
    for (k, comp) in kept.iter().enumerate() {
        boxes.push(extract_box(comp)?);
        let comp_seed = derive_seed(seed, "component", &[sample.id, k as u64]);
        points.extend(sample_points(comp, cfg.points_per_box, comp_seed));
    }
    Ok(PromptDerivation {
        refined,
        coarse_mask: coarse,
        prompts: PromptSet {
            boxes,
            points,
            text_stub: sample.text_stub.clone(),
        },
    })
}

/// Debug dump: refined probabilities and coarse mask as PGM, prompts as a
/// plain-text record.
pub fn dump_prompt_debug(dir: &Path, sample: &SampleRecord, d: &PromptDerivation, seed: u64) -> Result<()> {
    use crate::corpus::write_pgm;
    use std::fmt::Write as _;

    let q: Vec<u8> = d.refined.data.iter().map(|&v| (v * 255.0).round() as u8).collect();
    write_pgm(
        &dir.join(format!("refined_{:05}.pgm", sample.id)),
        d.refined.w,
        d.refined.h,
        &q,
    )?;
    let m: Vec<u8> = d.coarse_mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_pgm(
        &dir.join(format!("coarse_{:05}.pgm", sample.id)),
        d.coarse_mask.w,
        d.coarse_mask.h,
        &m,
    )?;
    let mut text = String::new();
    let _ = writeln!(text, "sample {}", sample.id);
    let _ = writeln!(text, "seed {}", seed);
    for b in &d.prompts.boxes {
        let _ = writeln!(text, "box {} {} {} {}", b.r0, b.c0, b.r1, b.c1);
    }
    for p in &d.prompts.points {
        let _ = writeln!(text, "point {} {} {}", p.row, p.col, p.label as u8);
    }
    let path = dir.join(format!("prompts_{:05}.txt", sample.id));
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::grid::Image;

    fn sample_with_mask(on: &[(usize, usize)], h: usize, w: usize) -> SampleRecord {
        let mut mask = Mask::empty(h, w);
        for &(r, c) in on {
            mask.set(r, c, true);
        }
        let heatmap = Image {
            h,
            w,
            data: mask.data.iter().map(|&b| b as u8 as f64).collect(),
        };
        // foreground brighter, on the 8-bit grid
        let image = Image {
            h,
            w,
            data: mask.data.iter().map(|&b| if b { 180.0 / 255.0 } else { 60.0 / 255.0 }).collect(),
        };
        SampleRecord {
            id: 3,
            class_id: 0,
            split: Split::Test,
            image,
            gt_mask: mask,
            heatmap,
            text_stub: vec![0.1; 16],
        }
    }

    #[test]
    fn binarize_constant_maps() {
        let pm = ProbMap { h: 2, w: 2, data: vec![0.45; 4] };
        assert_eq!(binarize(&pm, 0.5).unwrap().area(), 0);
        assert_eq!(binarize(&pm, 0.4).unwrap().area(), 4);
    }

    #[test]
    fn binarize_is_idempotent_on_binary_maps() {
        let pm = ProbMap { h: 2, w: 2, data: vec![1.0, 0.0, 0.0, 1.0] };
        let m = binarize(&pm, 0.5).unwrap();
        assert_eq!(m.data, vec![true, false, false, true]);
    }

    #[test]
    fn clean_one_component_heatmap_recovers_tight_box() {
        let on: Vec<(usize, usize)> = (4..10)
            .flat_map(|r| (6..12).map(move |c| (r, c)))
            .collect();
        let s = sample_with_mask(&on, 16, 16);
        let prompts = build_prompts(&s, &PromptConfig::default(), 1).unwrap();
        assert_eq!(prompts.boxes.len(), 1);
        let b = prompts.boxes[0];
        assert_eq!((b.r0, b.c0, b.r1, b.c1), (4, 6, 9, 11));
        assert!(prompts.points.iter().all(|p| b.contains(p.row, p.col)));
    }

    #[test]
    fn two_components_give_two_containing_boxes() {
        let mut on: Vec<(usize, usize)> = (2..6).flat_map(|r| (2..6).map(move |c| (r, c))).collect();
        on.extend((10..14).flat_map(|r| (10..14).map(move |c| (r, c))));
        let s = sample_with_mask(&on, 16, 16);
        let prompts = build_prompts(&s, &PromptConfig::default(), 1).unwrap();
        assert_eq!(prompts.boxes.len(), 2);
        for p in &prompts.points {
            assert!(prompts.boxes.iter().any(|b| b.contains(p.row, p.col)));
        }
    }

    #[test]
    fn all_zero_heatmap_is_empty_prompt() {
        let s = sample_with_mask(&[], 16, 16);
        assert!(matches!(
            build_prompts(&s, &PromptConfig::default(), 1),
            Err(Error::EmptyPrompt { .. })
        ));
    }
}
