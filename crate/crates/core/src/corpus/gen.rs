//! Corpus generation: randomized blob masks, textured images, and noisy
//! saliency heatmaps standing in for an external saliency model.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::corpus::manifest::{write_manifest, DatasetManifest, ManifestEntry, SampleFiles};
use crate::corpus::pgm::write_pgm;
use crate::corpus::{SampleRecord, Split};
use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::prompts::{connected_components, Connectivity};
use crate::seeding::rng_for;

#[derive(Debug, Clone)]
pub struct GenParams {
    pub seed: u64,
    pub n: usize,
    /// Square image side; 32..=256.
    pub size: usize,
    pub class_count: usize,
    /// (annotated-train, unannotated-train, test); must sum to 1.
    pub split_fractions: [f64; 3],
    /// Heatmap box-blur radius.
    pub blur_radius: usize,
    /// Heatmap uniform noise amplitude in [0, 1).
    pub noise_level: f64,
    pub stub_dim: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            seed: 7,
            n: 100,
            size: 64,
            class_count: 3,
            split_fractions: [0.1, 0.4, 0.5],
            blur_radius: 2,
            noise_level: 0.30,
            stub_dim: 16,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::InvalidConfig(detail);
        if self.n < 10 {
            return Err(bad(format!("n must be >= 10, got {}", self.n)));
        }
        if !(32..=256).contains(&self.size) {
            return Err(bad(format!("size must be in [32, 256], got {}", self.size)));
        }
        if self.class_count == 0 {
            return Err(bad("class_count must be >= 1".into()));
        }
        if self.split_fractions.iter().any(|&f| f < 0.0) {
            return Err(bad("split fractions must be nonnegative".into()));
        }
        let s: f64 = self.split_fractions.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(bad(format!("split fractions must sum to 1, got {}", s)));
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return Err(bad(format!(
                "noise_level must be in [0, 1), got {}",
                self.noise_level
            )));
        }
        Ok(())
    }

    /// (annotated, unannotated, test) sample counts; test absorbs rounding.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n_ann = (self.split_fractions[0] * self.n as f64).round() as usize;
        let n_unann = (self.split_fractions[1] * self.n as f64).round() as usize;
        let n_test = self.n.saturating_sub(n_ann + n_unann);
        (n_ann, n_unann, n_test)
    }
}

/// clamp(boxblur(gt_mask) + uniform noise, 0, 1), deterministic under seed.
pub fn make_heatmap(gt_mask: &Mask, blur_radius: usize, noise_level: f64, seed: u64) -> Image {
    let (h, w) = (gt_mask.h, gt_mask.w);
    let mut cur: Vec<f64> = gt_mask.data.iter().map(|&b| b as u8 as f64).collect();
    if blur_radius > 0 {
        let r = blur_radius as isize;
        let win = (2 * blur_radius + 1) as f64;
        // horizontal, zero padding
        let mut tmp = vec![0.0; h * w];
        for row in 0..h {
            for col in 0..w {
                let mut s = 0.0;
                for d in -r..=r {
                    let cc = col as isize + d;
                    if cc >= 0 && cc < w as isize {
                        s += cur[row * w + cc as usize];
                    }
                }
                tmp[row * w + col] = s / win;
            }
        }
        // vertical
        for col in 0..w {
            for row in 0..h {
                let mut s = 0.0;
                for d in -r..=r {
                    let rr = row as isize + d;
                    if rr >= 0 && rr < h as isize {
                        s += tmp[rr as usize * w + col];
                    }
                }
                cur[row * w + col] = s / win;
            }
        }
    }
    if noise_level > 0.0 {
        let mut rng = rng_for(seed, "heatmap-noise", &[]);
        let half = noise_level / 2.0;
        for v in &mut cur {
            *v += rng.random_range(-half..half);
        }
    }
    for v in &mut cur {
        *v = v.clamp(0.0, 1.0);
    }
    Image { h, w, data: cur }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct RawSample {
    id: u64,
    class_id: usize,
    split: Split,
    image: Vec<u8>,
    mask: Vec<u8>,
    heatmap: Vec<u8>,
}

fn draw_blob(mask: &mut Mask, rng: &mut impl Rng, size: usize, center: (f64, f64)) {
    let s = size as f64;
    let (cy, cx) = center;
    let a = rng.random_range(0.10..0.24) * s;
    let b = rng.random_range(0.10..0.24) * s;
    let phi = rng.random_range(0.0..std::f64::consts::PI);
    let amp = rng.random_range(0.0..0.20);
    let freq = rng.random_range(2..5) as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (sin_p, cos_p) = phi.sin_cos();
    for r in 0..size {
        for c in 0..size {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let u = dx * cos_p + dy * sin_p;
            let v = -dx * sin_p + dy * cos_p;
            let rad2 = (u / a).powi(2) + (v / b).powi(2);
            let theta = v.atan2(u);
            let boundary = 1.0 + amp * (freq * theta + phase).sin();
            if rad2 <= boundary * boundary {
                mask.set(r, c, true);
            }
        }
    }
}

fn draw_mask(rng: &mut impl Rng, size: usize) -> Mask {
    let s = size as f64;
    let mut mask = Mask::empty(size, size);
    let two = rng.random_bool(0.4);
    let cy = rng.random_range(0.30..0.70) * s;
    let cx = rng.random_range(0.30..0.70) * s;
    draw_blob(&mut mask, rng, size, (cy, cx));
    if two {
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let dist = rng.random_range(0.28..0.45) * s;
        let cy2 = (cy + dist * ang.sin()).clamp(0.2 * s, 0.8 * s);
        let cx2 = (cx + dist * ang.cos()).clamp(0.2 * s, 0.8 * s);
        draw_blob(&mut mask, rng, size, (cy2, cx2));
    }
    mask
}

fn mask_acceptable(mask: &Mask) -> bool {
    let frac = mask.area_fraction();
    if !(0.02..=0.40).contains(&frac) {
        return false;
    }
    let comps = connected_components(mask, Connectivity::Eight);
    if comps.is_empty() || comps.len() > 2 {
        return false;
    }
    // every component big enough to prompt from
    let floor = (mask.h * mask.w) / 100;
    comps.iter().all(|c| c.pixels.len() >= floor.max(4))
}

fn make_sample(p: &GenParams, id: u64, class_id: usize, split: Split) -> Result<RawSample> {
    let mut rng = rng_for(p.seed, "sample", &[id]);
    let mut mask = None;
    for _attempt in 0..200 {
        let m = draw_mask(&mut rng, p.size);
        if mask_acceptable(&m) {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        Error::InvalidConfig(format!("sample {}: no acceptable mask in 200 attempts", id))
    })?;

    let bg = rng.random_range(0.20..0.40);
    let fg_offset = rng.random_range(0.25..0.38);
    let tex = 0.05;
    let image: Vec<u8> = mask
        .data
        .iter()
        .map(|&fg| {
            let base = if fg { bg + fg_offset } else { bg };
            quantize(base + rng.random_range(-tex..tex))
        })
        .collect();

    let heat_seed = rng_for(p.seed, "heat", &[id]).random::<u64>();
    let heatmap = make_heatmap(&mask, p.blur_radius, p.noise_level, heat_seed);
    Ok(RawSample {
        id,
        class_id,
        split,
        image,
        mask: mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        heatmap: heatmap.data.iter().map(|&v| quantize(v)).collect(),
    })
}

/// Generate the corpus under `out_dir` and write its manifest.
/// Deterministic under `params.seed`: per-sample streams derive from the
/// sample id, so generation order (and parallelism) cannot matter.
pub fn generate_dataset(params: &GenParams, out_dir: &Path) -> Result<DatasetManifest> {
    params.validate()?;
    let (n_ann, n_unann, _) = params.split_counts();

    let mut class_rng = rng_for(params.seed, "classes", &[]);
    let plan: Vec<(u64, usize, Split)> = (0..params.n as u64)
        .map(|id| {
            let class_id = class_rng.random_range(0..params.class_count);
            let split = if (id as usize) < n_ann {
                Split::AnnotatedTrain
            } else if (id as usize) < n_ann + n_unann {
                Split::UnannotatedTrain
            } else {
                Split::Test
            };
            (id, class_id, split)
        })
        .collect();

    let raws: Vec<Result<RawSample>> = plan
        .par_iter()
        .map(|&(id, class_id, split)| make_sample(params, id, class_id, split))
        .collect();

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(params.n);
    for raw in raws {
        let raw = raw?;
        let files = SampleFiles {
            image: format!("images/img_{:05}.pgm", raw.id),
            mask: format!("masks/mask_{:05}.pgm", raw.id),
            heatmap: format!("heatmaps/heat_{:05}.pgm", raw.id),
        };
        write_pgm(&out_dir.join(&files.image), params.size, params.size, &raw.image)?;
        write_pgm(&out_dir.join(&files.mask), params.size, params.size, &raw.mask)?;
        write_pgm(&out_dir.join(&files.heatmap), params.size, params.size, &raw.heatmap)?;
        entries.push(ManifestEntry {
            id: raw.id,
            class_id: raw.class_id,
            split: raw.split,
            files,
        });
    }

    let class_stubs: Vec<Vec<f64>> = (0..params.class_count)
        .map(|k| {
            let mut rng = rng_for(params.seed, "stub", &[k as u64]);
            (0..params.stub_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        })
        .collect();

    let manifest = DatasetManifest {
        seed: params.seed,
        n: params.n,
        height: params.size,
        width: params.size,
        class_count: params.class_count,
        blur_radius: params.blur_radius,
        noise_level: params.noise_level,
        stub_dim: params.stub_dim,
        class_stubs,
        entries,
        root: out_dir.to_path_buf(),
    };
    write_manifest(&manifest)?;
    Ok(manifest)
}

pub(crate) fn record_from_bytes(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    image: Vec<u8>,
    mask: Vec<u8>,
    heatmap: Vec<u8>,
) -> SampleRecord {
    let to_f = |bytes: Vec<u8>| Image {
        h: manifest.height,
        w: manifest.width,
        data: bytes.into_iter().map(|b| b as f64 / 255.0).collect(),
    };
    SampleRecord {
        id: entry.id,
        class_id: entry.class_id,
        split: entry.split,
        image: to_f(image),
        gt_mask: Mask {
            h: manifest.height,
            w: manifest.width,
            data: mask.into_iter().map(|b| b > 127).collect(),
        },
        heatmap: to_f(heatmap),
        text_stub: manifest.class_stubs[entry.class_id].clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_identity_without_blur_and_noise() {
        let mut m = Mask::empty(8, 8);
        m.set(3, 3, true);
        m.set(3, 4, true);
        let h = make_heatmap(&m, 0, 0.0, 1);
        let expect: Vec<f64> = m.data.iter().map(|&b| b as u8 as f64).collect();
        assert_eq!(h.data, expect);
    }

    #[test]
    fn blur_spreads_mass_around_mask() {
        let mut m = Mask::empty(16, 16);
        for r in 6..10 {
            for c in 6..10 {
                m.set(r, c, true);
            }
        }
        let h = make_heatmap(&m, 2, 0.0, 1);
        assert!(h.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // strictly fractional values appear at the rim
        assert!(h.data.iter().any(|&v| v > 0.0 && v < 1.0));
        let inside: f64 = m.data.iter().zip(&h.data).filter(|(b, _)| **b).map(|(_, &v)| v).sum::<f64>()
            / m.area() as f64;
        let outside: f64 = m.data.iter().zip(&h.data).filter(|(b, _)| !**b).map(|(_, &v)| v).sum::<f64>()
            / (m.data.len() - m.area()) as f64;
        assert!(inside > outside);
    }

    #[test]
    fn noisy_heatmap_keeps_mask_contrast() {
        // empirical mean over 50 samples: inside > outside at noise 0.3
        for seed in 0..50u64 {
            let mut rng = rng_for(seed, "t-noise", &[]);
            let m = draw_mask(&mut rng, 32);
            let h = make_heatmap(&m, 1, 0.3, seed);
            let inside: f64 = m.data.iter().zip(&h.data).filter(|(b, _)| **b).map(|(_, &v)| v).sum::<f64>()
                / m.area().max(1) as f64;
            let n_out = m.data.len() - m.area();
            let outside: f64 = m.data.iter().zip(&h.data).filter(|(b, _)| !**b).map(|(_, &v)| v).sum::<f64>()
                / n_out.max(1) as f64;
            assert!(inside > outside, "seed {}: {} <= {}", seed, inside, outside);
        }
    }

    #[test]
    fn split_counts_match_fractions() {
        let p = GenParams {
            n: 100,
            split_fractions: [0.1, 0.4, 0.5],
            ..Default::default()
        };
        assert_eq!(p.split_counts(), (10, 40, 50));
    }

    #[test]
    fn validation_rejects_bad_fractions() {
        let p = GenParams {
            split_fractions: [0.5, 0.4, 0.2],
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
