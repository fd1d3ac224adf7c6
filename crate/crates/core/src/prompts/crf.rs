//! Exact dense-pairwise CRF mean-field refinement for two-class maps.
//!
//! Every pixel pair interacts through an appearance kernel (spatial +
//! intensity Gaussian) and a smoothness kernel (spatial Gaussian). No
//! lattice approximation: pairwise sums are exact, which caps the usable
//! image size but makes each update independently checkable.

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::grid::{Image, ProbMap};

/// Largest side accepted by the exact dense pass.
pub const DENSE_LIMIT: usize = 96;

/// Unary floor: foreground probability is clamped to [EPS, 1-EPS].
pub const UNARY_EPS: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CrfParams {
    pub iterations: usize,
    pub unary_scale: f64,
    /// w_app and its spatial / intensity bandwidths.
    pub appearance_weight: f64,
    pub appearance_sigma_spatial: f64,
    pub appearance_sigma_intensity: f64,
    /// w_smooth and its spatial bandwidth.
    pub smoothness_weight: f64,
    pub smoothness_sigma: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            iterations: 5,
            unary_scale: 1.0,
            appearance_weight: 0.05,
            appearance_sigma_spatial: 5.0,
            appearance_sigma_intensity: 0.1,
            smoothness_weight: 0.02,
            smoothness_sigma: 2.0,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::InvalidArgument { what: "CrfParams", detail };
        if self.iterations < 1 {
            return Err(bad("iterations must be >= 1".into()));
        }
        for (name, v) in [
            ("appearance_sigma_spatial", self.appearance_sigma_spatial),
            ("appearance_sigma_intensity", self.appearance_sigma_intensity),
            ("smoothness_sigma", self.smoothness_sigma),
        ] {
            if v <= 0.0 {
                return Err(bad(format!("{} must be > 0, got {}", name, v)));
            }
        }
        for (name, v) in [
            ("appearance_weight", self.appearance_weight),
            ("smoothness_weight", self.smoothness_weight),
            ("unary_scale", self.unary_scale),
        ] {
            if v < 0.0 {
                return Err(bad(format!("{} must be >= 0, got {}", name, v)));
            }
        }
        Ok(())
    }
}

/// Pairwise kernel stored as the strict upper triangle (i < j), plus per-row
/// sums. Symmetric by construction; the diagonal is excluded.
struct Kernel {
    tri: Vec<f32>,
    rowsum: Vec<f64>,
    n: usize,
}

impl Kernel {
    /// m[i] = sum_{j != i} K(i,j) q[j]
    fn message(&self, q: &[f64], m: &mut [f64]) {
        m.iter_mut().for_each(|v| *v = 0.0);
        let mut idx = 0usize;
        for i in 0..self.n {
            let qi = q[i];
            let mut mi = 0.0;
            for j in i + 1..self.n {
                let k = self.tri[idx] as f64;
                idx += 1;
                mi += k * q[j];
                m[j] += k * qi;
            }
            m[i] += mi;
        }
    }
}

/// Image values that all lie exactly on the 8-bit grid k/255 admit an exact
/// lookup-table kernel; anything else takes the per-pair path.
fn as_byte_grid(image: &Image) -> Option<Vec<u8>> {
    let mut bytes = Vec::with_capacity(image.data.len());
    for &v in &image.data {
        let k = (v * 255.0).round();
        if !(0.0..=255.0).contains(&k) || k / 255.0 != v {
            return None;
        }
        bytes.push(k as u8);
    }
    Some(bytes)
}

fn spatial_table(h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut t = vec![0.0; h * w];
    for dr in 0..h {
        for dc in 0..w {
            t[dr * w + dc] = (-((dr * dr + dc * dc) as f64) * inv).exp();
        }
    }
    t
}

fn build_kernel(image: &Image, p: &CrfParams) -> Kernel {
    let (h, w) = (image.h, image.w);
    let n = h * w;
    let app_sp = spatial_table(h, w, p.appearance_sigma_spatial);
    let smooth_sp = spatial_table(h, w, p.smoothness_sigma);
    let (wa, ws) = (p.appearance_weight, p.smoothness_weight);
    let mut tri = vec![0.0f32; n * (n - 1) / 2];
    let mut rowsum = vec![0.0f64; n];

    let inv_int = 1.0 / (2.0 * p.appearance_sigma_intensity * p.appearance_sigma_intensity);
    let byte_grid = as_byte_grid(image);
    let int_lut: Option<Vec<f64>> = byte_grid.as_ref().map(|_| {
        (0..=255u32)
            .map(|d| {
                let di = d as f64 / 255.0;
                (-di * di * inv_int).exp()
            })
            .collect()
    });

    let mut idx = 0usize;
    for i in 0..n {
        let (ri, ci) = (i / w, i % w);
        for j in i + 1..n {
            let (rj, cj) = (j / w, j % w);
            let dr = ri.abs_diff(rj);
            let dc = ci.abs_diff(cj);
            let intensity = match (&byte_grid, &int_lut) {
                (Some(bytes), Some(lut)) => lut[bytes[i].abs_diff(bytes[j]) as usize],
                _ => {
                    let di = image.data[i] - image.data[j];
                    (-di * di * inv_int).exp()
                }
            };
            let k = wa * app_sp[dr * w + dc] * intensity + ws * smooth_sp[dr * w + dc];
            tri[idx] = k as f32;
            idx += 1;
            rowsum[i] += k as f32 as f64;
            rowsum[j] += k as f32 as f64;
        }
    }
    Kernel { tri, rowsum, n }
}

/// Mean-field refinement of `heatmap` (foreground probability) guided by
/// `image`. Returns the per-pixel foreground marginal after
/// `params.iterations` synchronous updates.
pub fn crf_refine(heatmap: &Image, image: &Image, params: &CrfParams) -> Result<ProbMap> {
    params.validate()?;
    if heatmap.h != image.h || heatmap.w != image.w {
        return Err(Error::ShapeMismatch {
            op: "crf_refine",
            detail: format!(
                "heatmap {}x{} vs image {}x{}",
                heatmap.h, heatmap.w, image.h, image.w
            ),
        });
    }
    if heatmap.h > DENSE_LIMIT || heatmap.w > DENSE_LIMIT {
        return Err(Error::CrfImageTooLarge {
            h: heatmap.h,
            w: heatmap.w,
            limit: DENSE_LIMIT,
        });
    }
    if let Some(v) = heatmap.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument {
            what: "crf_refine",
            detail: format!("heatmap value {} outside [0, 1]", v),
        });
    }

    let n = heatmap.h * heatmap.w;
    let s = params.unary_scale;
    // two-class unary from the probability reading of the heatmap
    let mut logit_unary = vec![0.0; n]; // s * (ln p - ln(1-p)) = u_bg - u_fg
    let mut q: Vec<f64> = vec![0.0; n];
    for i in 0..n {
        let p = heatmap.data[i].clamp(UNARY_EPS, 1.0 - UNARY_EPS);
        logit_unary[i] = s * (p.ln() - (1.0 - p).ln());
        q[i] = sigmoid(logit_unary[i]);
    }

    let pairwise_on = params.appearance_weight > 0.0 || params.smoothness_weight > 0.0;
    if pairwise_on {
        let kernel = build_kernel(image, params);
        let mut m = vec![0.0; n];
        let mut q_next = vec![0.0; n];
        for _ in 0..params.iterations {
            kernel.message(&q, &mut m);
            for i in 0..n {
                // fg energy: u_fg + m_bg; bg energy: u_bg + m_fg; with
                // m_bg = rowsum - m_fg the fg marginal is a single logistic.
                q_next[i] = sigmoid(logit_unary[i] + 2.0 * m[i] - kernel.rowsum[i]);
            }
            std::mem::swap(&mut q, &mut q_next);
        }
    }
    ProbMap::new(heatmap.h, heatmap.w, q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(h: usize, w: usize, v: f64) -> Image {
        Image { h, w, data: vec![v; h * w] }
    }

    #[test]
    fn uniform_half_heatmap_is_a_fixed_point() {
        let heat = flat(6, 6, 0.5);
        let img = Image {
            h: 6,
            w: 6,
            data: (0..36).map(|i| (i % 7) as f64 / 7.0).collect(),
        };
        let out = crf_refine(&heat, &img, &CrfParams::default()).unwrap();
        for &v in &out.data {
            assert!((v - 0.5).abs() < 1e-12, "{}", v);
        }
    }

    #[test]
    fn zero_pairwise_weights_reproduce_the_unary() {
        let heat = Image {
            h: 4,
            w: 4,
            data: (0..16).map(|i| 0.05 + 0.9 * (i as f64) / 15.0).collect(),
        };
        let img = flat(4, 4, 0.3);
        let params = CrfParams {
            appearance_weight: 0.0,
            smoothness_weight: 0.0,
            iterations: 3,
            ..Default::default()
        };
        let out = crf_refine(&heat, &img, &params).unwrap();
        for (o, h) in out.data.iter().zip(&heat.data) {
            let expect = h.clamp(UNARY_EPS, 1.0 - UNARY_EPS);
            assert!((o - expect).abs() < 1e-9, "{} vs {}", o, expect);
        }
    }

    #[test]
    fn two_pixel_single_step_matches_hand_computation() {
        let heat = Image { h: 1, w: 2, data: vec![0.8, 0.3] };
        let img = Image { h: 1, w: 2, data: vec![0.7, 0.4] };
        let params = CrfParams {
            iterations: 1,
            unary_scale: 1.0,
            appearance_weight: 2.0,
            appearance_sigma_spatial: 1.0,
            appearance_sigma_intensity: 0.5,
            smoothness_weight: 1.0,
            smoothness_sigma: 2.0,
        };
        let out = crf_refine(&heat, &img, &params).unwrap();

        // independent scalar evaluation of one synchronous update
        let k = 2.0 * (-1.0f64 / 2.0).exp() * (-(0.3f64 * 0.3) / (2.0 * 0.25)).exp()
            + 1.0 * (-1.0f64 / 8.0).exp();
        let k = k as f32 as f64; // kernel matrix is stored in f32
        let q0: [f64; 2] = [0.8, 0.3];
        for i in 0..2 {
            let p = q0[i];
            let logit = p.ln() - (1.0 - p).ln();
            let m_fg = k * q0[1 - i];
            let expect = 1.0 / (1.0 + (-(logit + 2.0 * m_fg - k)).exp());
            assert!((out.data[i] - expect).abs() < 1e-12, "{} vs {}", out.data[i], expect);
        }
    }

    #[test]
    fn oversize_image_is_rejected_with_guidance() {
        let heat = flat(100, 100, 0.5);
        let img = flat(100, 100, 0.5);
        let err = crf_refine(&heat, &img, &CrfParams::default()).unwrap_err();
        assert!(matches!(err, Error::CrfImageTooLarge { .. }));
        assert!(err.to_string().contains("downscale"));
    }

    #[test]
    fn marginals_stay_in_unit_interval() {
        let heat = Image {
            h: 8,
            w: 8,
            data: (0..64).map(|i| ((i * 37) % 100) as f64 / 100.0).collect(),
        };
        let img = Image {
            h: 8,
            w: 8,
            data: (0..64).map(|i| ((i * 53) % 256) as f64 / 255.0).collect(),
        };
        let out = crf_refine(&heat, &img, &CrfParams::default()).unwrap();
        for &v in &out.data {
            assert!((0.0..=1.0).contains(&v) && v.is_finite());
        }
    }

    #[test]
    fn byte_grid_and_general_paths_agree() {
        // identical image expressed on the 8-bit grid vs slightly perturbed off it
        let heat = Image {
            h: 5,
            w: 5,
            data: (0..25).map(|i| 0.1 + 0.03 * i as f64).collect(),
        };
        let on_grid = Image {
            h: 5,
            w: 5,
            data: (0..25).map(|i| ((i * 9) % 256) as f64 / 255.0).collect(),
        };
        assert!(as_byte_grid(&on_grid).is_some());
        let off_grid = Image {
            h: 5,
            w: 5,
            data: on_grid.data.iter().map(|v| v + 1e-13).collect(),
        };
        assert!(as_byte_grid(&off_grid).is_none());
        let a = crf_refine(&heat, &on_grid, &CrfParams::default()).unwrap();
        let b = crf_refine(&heat, &off_grid, &CrfParams::default()).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
