//! Connected-component labeling and geometric prompt extraction.

use rand::seq::index::sample as index_sample;

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Axis-aligned box with inclusive pixel corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl BoundingBox {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.r0 && r <= self.r1 && c >= self.c0 && c <= self.c1
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter_r0 = self.r0.max(other.r0);
        let inter_c0 = self.c0.max(other.c0);
        let inter_r1 = self.r1.min(other.r1);
        let inter_c1 = self.c1.min(other.c1);
        let inter = if inter_r0 <= inter_r1 && inter_c0 <= inter_c1 {
            (inter_r1 - inter_r0 + 1) * (inter_c1 - inter_c0 + 1)
        } else {
            0
        };
        let a = (self.r1 - self.r0 + 1) * (self.c1 - self.c0 + 1);
        let b = (other.r1 - other.r0 + 1) * (other.c1 - other.c0 + 1);
        inter as f64 / (a + b - inter) as f64
    }
}

/// Positive point prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointPrompt {
    pub row: usize,
    pub col: usize,
    pub label: bool,
}

/// Geometric plus textual conditioning for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub boxes: Vec<BoundingBox>,
    pub points: Vec<PointPrompt>,
    pub text_stub: Vec<f64>,
}

/// One foreground component; pixels are kept in row-major order.
#[derive(Debug, Clone)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn top_left(&self) -> (usize, usize) {
        self.pixels[0]
    }
}

/// Foreground components, sorted by area descending and then by smallest
/// top-left pixel. An empty mask yields an empty list.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> Vec<Component> {
    let (h, w) = (mask.h, mask.w);
    let mut visited = vec![false; h * w];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || visited[start] {
            continue;
        }
        let mut pixels = Vec::new();
        visited[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (r, c) = (idx / w, idx % w);
            pixels.push((r, c));
            let mut push = |rr: isize, cc: isize| {
                if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
                    return;
                }
                let j = rr as usize * w + cc as usize;
                if mask.data[j] && !visited[j] {
                    visited[j] = true;
                    stack.push(j);
                }
            };
            let (ri, ci) = (r as isize, c as isize);
            push(ri - 1, ci);
            push(ri + 1, ci);
            push(ri, ci - 1);
            push(ri, ci + 1);
            if connectivity == Connectivity::Eight {
                push(ri - 1, ci - 1);
                push(ri - 1, ci + 1);
                push(ri + 1, ci - 1);
                push(ri + 1, ci + 1);
            }
        }
        pixels.sort_unstable();
        comps.push(Component { pixels });
    }
    comps.sort_by(|a, b| {
        b.area()
            .cmp(&a.area())
            .then_with(|| a.top_left().cmp(&b.top_left()))
    });
    comps
}

/// Keep up to `max_k` largest components with area >= min_area_fraction * H*W.
/// Zero survivors is an empty-prompt error: the sample cannot be prompted.
pub fn select_components(
    components: &[Component],
    max_k: usize,
    min_area_fraction: f64,
    grid_pixels: usize,
) -> Result<Vec<Component>> {
    if !(1..=2).contains(&max_k) {
        return Err(Error::InvalidArgument {
            what: "select_components",
            detail: format!("max_k must be 1 or 2, got {}", max_k),
        });
    }
    if !(0.0..0.5).contains(&min_area_fraction) {
        return Err(Error::InvalidArgument {
            what: "select_components",
            detail: format!("min_area_fraction must be in [0, 0.5), got {}", min_area_fraction),
        });
    }
    let floor = min_area_fraction * grid_pixels as f64;
    let kept: Vec<Component> = components
        .iter()
        .filter(|c| c.area() as f64 >= floor)
        .take(max_k)
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyPrompt {
            reason: format!(
                "{} components, none with area >= {:.1} px",
                components.len(),
                floor
            ),
        });
    }
    Ok(kept)
}

/// Tight axis-aligned bounding box of a component.
pub fn extract_box(component: &Component) -> Result<BoundingBox> {
    if component.pixels.is_empty() {
        return Err(Error::InvalidArgument {
            what: "extract_box",
            detail: "empty component".into(),
        });
    }
    let mut bb = BoundingBox {
        r0: usize::MAX,
        c0: usize::MAX,
        r1: 0,
        c1: 0,
    };
    for &(r, c) in &component.pixels {
        bb.r0 = bb.r0.min(r);
        bb.c0 = bb.c0.min(c);
        bb.r1 = bb.r1.max(r);
        bb.c1 = bb.c1.max(c);
    }
    Ok(bb)
}

/// Sample k positive points uniformly without replacement (k clamped to the
/// component size). Deterministic under seed.
pub fn sample_points(component: &Component, k: usize, seed: u64) -> Vec<PointPrompt> {
    let n = component.pixels.len();
    let take = k.min(n);
    let mut rng = rng_for(seed, "point-prompts", &[]);
    index_sample(&mut rng, n, take)
        .into_iter()
        .map(|i| {
            let (row, col) = component.pixels[i];
            PointPrompt { row, col, label: true }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::empty(h, w);
        for &(r, c) in on {
            m.set(r, c, true);
        }
        m
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let m = mask_from(3, 3, &[(0, 0), (1, 1)]);
        assert_eq!(connected_components(&m, Connectivity::Eight).len(), 1);
        assert_eq!(connected_components(&m, Connectivity::Four).len(), 2);
    }

    #[test]
    fn full_mask_is_one_component() {
        let m = Mask {
            h: 4,
            w: 5,
            data: vec![true; 20],
        };
        let comps = connected_components(&m, Connectivity::Four);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].area(), 20);
    }

    #[test]
    fn empty_mask_yields_empty_list() {
        let m = Mask::empty(4, 4);
        assert!(connected_components(&m, Connectivity::Eight).is_empty());
    }

    #[test]
    fn ordering_is_area_then_top_left() {
        // two 2-pixel components and one 3-pixel component
        let m = mask_from(6, 6, &[(5, 0), (5, 1), (0, 4), (0, 5), (3, 0), (3, 1), (3, 2)]);
        let comps = connected_components(&m, Connectivity::Four);
        assert_eq!(comps[0].area(), 3);
        assert_eq!(comps[1].top_left(), (0, 4));
        assert_eq!(comps[2].top_left(), (5, 0));
    }

    #[test]
    fn select_keeps_top_two_over_floor() {
        let comps = vec![
            Component { pixels: (0..100).map(|i| (i / 10, i % 10)).collect() },
            Component { pixels: (0..80).map(|i| (20 + i / 10, i % 10)).collect() },
            Component { pixels: vec![(31, 0), (31, 1), (31, 2)] },
        ];
        let kept = select_components(&comps, 2, 0.001, 64 * 64).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].area(), 100);
        assert_eq!(kept[1].area(), 80);
    }

    #[test]
    fn select_single_component() {
        let comps = vec![Component { pixels: vec![(0, 0)] }];
        let kept = select_components(&comps, 1, 0.0, 16).unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn select_all_below_floor_is_empty_prompt() {
        let comps = vec![Component { pixels: vec![(0, 0), (0, 1)] }];
        let err = select_components(&comps, 2, 0.4, 100).unwrap_err();
        assert!(matches!(err, Error::EmptyPrompt { .. }));
    }

    #[test]
    fn extract_box_min_max() {
        let c = Component { pixels: vec![(1, 1), (2, 3)] };
        let bb = extract_box(&c).unwrap();
        assert_eq!((bb.r0, bb.c0, bb.r1, bb.c1), (1, 1, 2, 3));
        let single = Component { pixels: vec![(5, 5)] };
        let bb = extract_box(&single).unwrap();
        assert_eq!((bb.r0, bb.c0, bb.r1, bb.c1), (5, 5, 5, 5));
    }

    #[test]
    fn sample_points_exhausts_small_components() {
        let c = Component { pixels: vec![(0, 0), (1, 1), (2, 2)] };
        let mut pts: Vec<(usize, usize)> = sample_points(&c, 3, 9).iter().map(|p| (p.row, p.col)).collect();
        pts.sort_unstable();
        assert_eq!(pts, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(sample_points(&c, 10, 9).len(), 3);
    }

    #[test]
    fn sample_points_deterministic_under_seed() {
        let c = Component { pixels: (0..50).map(|i| (i / 10, i % 10)).collect() };
        assert_eq!(sample_points(&c, 5, 42), sample_points(&c, 5, 42));
        assert!(sample_points(&c, 5, 42).iter().all(|p| p.label));
    }
}
