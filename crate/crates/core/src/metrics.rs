//! Segmentation quality metrics: IoU, Dice, Surface Dice, aggregation.

use crate::error::{Error, Result};
use crate::grid::Mask;

fn check_shapes(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{}x{} vs {}x{}", a.h, a.w, b.h, b.w),
        });
    }
    Ok(())
}

/// |a ∩ b| / |a ∪ b|. Two empty masks score 1.0.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    check_shapes("iou", a, b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// 2|a ∩ b| / (|a| + |b|). Two empty masks score 1.0.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    check_shapes("dice", a, b)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Foreground pixels with at least one background 4-neighbor; the image
/// border counts as background.
pub fn boundary_pixels(m: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..m.h {
        for c in 0..m.w {
            if !m.at(r, c) {
                continue;
            }
            let edge = r == 0
                || r == m.h - 1
                || c == 0
                || c == m.w - 1
                || !m.at(r - 1, c)
                || !m.at(r + 1, c)
                || !m.at(r, c - 1)
                || !m.at(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// Symmetric fraction of boundary pixels lying within Euclidean distance
/// `tolerance_px` of the other mask's boundary. Both masks empty scores
/// 1.0; exactly one empty scores 0.0.
pub fn surface_dice(a: &Mask, b: &Mask, tolerance_px: f64) -> Result<f64> {
    check_shapes("surface_dice", a, b)?;
    if tolerance_px < 0.0 {
        return Err(Error::InvalidArgument {
            what: "surface_dice",
            detail: format!("tolerance must be >= 0, got {}", tolerance_px),
        });
    }
    let ea = a.area() == 0;
    let eb = b.area() == 0;
    if ea && eb {
        return Ok(1.0);
    }
    if ea != eb {
        return Ok(0.0);
    }
    let ba = boundary_pixels(a);
    let bb = boundary_pixels(b);

    // Disk of integer offsets with squared distance <= tol^2, probed against
    // an occupancy grid of the other boundary.
    let rad = tolerance_px.floor() as isize;
    let tol2 = tolerance_px * tolerance_px;
    let mut offsets = Vec::new();
    for dr in -rad..=rad {
        for dc in -rad..=rad {
            if (dr * dr + dc * dc) as f64 <= tol2 {
                offsets.push((dr, dc));
            }
        }
    }
    let occupancy = |pixels: &[(usize, usize)]| {
        let mut g = vec![false; a.h * a.w];
        for &(r, c) in pixels {
            g[r * a.w + c] = true;
        }
        g
    };
    let ga = occupancy(&ba);
    let gb = occupancy(&bb);
    let near = |pixels: &[(usize, usize)], other: &[bool]| -> usize {
        pixels
            .iter()
            .filter(|&&(r, c)| {
                offsets.iter().any(|&(dr, dc)| {
                    let rr = r as isize + dr;
                    let cc = c as isize + dc;
                    rr >= 0
                        && rr < a.h as isize
                        && cc >= 0
                        && cc < a.w as isize
                        && other[rr as usize * a.w + cc as usize]
                })
            })
            .count()
    };
    let hits = near(&ba, &gb) + near(&bb, &ga);
    Ok(hits as f64 / (ba.len() + bb.len()) as f64)
}

/// One evaluated sample.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub id: u64,
    pub class_id: usize,
    pub dice: f64,
    pub iou: f64,
    pub sdc: f64,
}

#[derive(Debug, Clone)]
pub struct ClassAggregate {
    pub class_id: usize,
    pub count: usize,
    pub dice: f64,
    pub iou: f64,
    pub sdc: f64,
}

/// Per-sample rows plus per-class and overall arithmetic means.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub per_class: Vec<ClassAggregate>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_sdc: f64,
    pub sdc_tolerance_px: f64,
}

pub fn aggregate(rows: Vec<MetricRow>, sdc_tolerance_px: f64) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument {
            what: "aggregate",
            detail: "no rows".into(),
        });
    }
    let mut classes: Vec<usize> = rows.iter().map(|r| r.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let per_class = classes
        .iter()
        .map(|&cid| {
            let members: Vec<&MetricRow> = rows.iter().filter(|r| r.class_id == cid).collect();
            let n = members.len() as f64;
            ClassAggregate {
                class_id: cid,
                count: members.len(),
                dice: members.iter().map(|r| r.dice).sum::<f64>() / n,
                iou: members.iter().map(|r| r.iou).sum::<f64>() / n,
                sdc: members.iter().map(|r| r.sdc).sum::<f64>() / n,
            }
        })
        .collect();
    let n = rows.len() as f64;
    Ok(MetricReport {
        mean_dice: rows.iter().map(|r| r.dice).sum::<f64>() / n,
        mean_iou: rows.iter().map(|r| r.iou).sum::<f64>() / n,
        mean_sdc: rows.iter().map(|r| r.sdc).sum::<f64>() / n,
        per_class,
        rows,
        sdc_tolerance_px,
    })
}

impl MetricReport {
    /// Stable CSV rendering: one row per sample, one per class, one overall.
    pub fn to_csv(&self, header_comment: &str) -> String {
        let mut s = String::new();
        if !header_comment.is_empty() {
            for line in header_comment.lines() {
                s.push_str("# ");
                s.push_str(line);
                s.push('\n');
            }
        }
        s.push_str(&format!("# sdc_tolerance_px={}\n", self.sdc_tolerance_px));
        s.push_str("kind,id,class,count,dice,iou,sdc\n");
        for r in &self.rows {
            s.push_str(&format!(
                "sample,{},{},1,{},{},{}\n",
                r.id, r.class_id, r.dice, r.iou, r.sdc
            ));
        }
        for c in &self.per_class {
            s.push_str(&format!(
                "class-mean,,{},{},{},{},{}\n",
                c.class_id, c.count, c.dice, c.iou, c.sdc
            ));
        }
        s.push_str(&format!(
            "overall-mean,,,{},{},{},{}\n",
            self.rows.len(),
            self.mean_dice,
            self.mean_iou,
            self.mean_sdc
        ));
        s
    }
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
    fn iou_identical_and_disjoint() {
        let a = mask_from(4, 4, &[(0, 0), (1, 1)]);
        let b = mask_from(4, 4, &[(2, 2), (3, 3)]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_partial_overlap() {
        // |a|=|b|=4, |a∩b|=2 -> 2/6
        let a = mask_from(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let b = mask_from(4, 4, &[(0, 2), (0, 3), (1, 0), (1, 1)]);
        assert!((iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        assert!((dice(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_conventions() {
        let e = Mask::empty(4, 4);
        let a = mask_from(4, 4, &[(1, 1)]);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(surface_dice(&e, &e, 1.0).unwrap(), 1.0);
        assert_eq!(surface_dice(&a, &e, 1.0).unwrap(), 0.0);
        assert_eq!(dice(&a, &e).unwrap(), 0.0);
    }

    #[test]
    fn dice_iou_identity() {
        let a = mask_from(8, 8, &[(0, 0), (0, 1), (1, 0), (2, 2), (2, 3)]);
        let b = mask_from(8, 8, &[(0, 1), (1, 0), (1, 1), (2, 3), (5, 5)]);
        let i = iou(&a, &b).unwrap();
        let d = dice(&a, &b).unwrap();
        assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
    }

    #[test]
    fn surface_dice_identical_is_one() {
        let a = mask_from(8, 8, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
        assert_eq!(surface_dice(&a, &a, 0.0).unwrap(), 1.0);
        assert_eq!(surface_dice(&a, &a, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn surface_dice_one_pixel_shift_within_tolerance() {
        let mut a = Mask::empty(10, 10);
        let mut b = Mask::empty(10, 10);
        for r in 2..6 {
            for c in 2..6 {
                a.set(r, c, true);
                b.set(r, c + 1, true);
            }
        }
        assert_eq!(surface_dice(&a, &b, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn surface_dice_far_blobs_is_zero() {
        let a = mask_from(16, 16, &[(1, 1)]);
        let b = mask_from(16, 16, &[(14, 14)]);
        assert_eq!(surface_dice(&a, &b, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn aggregate_single_row_equals_row() {
        let rows = vec![MetricRow { id: 0, class_id: 2, dice: 0.7, iou: 0.6, sdc: 0.8 }];
        let rep = aggregate(rows, 1.0).unwrap();
        assert_eq!(rep.mean_dice, 0.7);
        assert_eq!(rep.per_class.len(), 1);
        assert_eq!(rep.per_class[0].dice, 0.7);
    }

    #[test]
    fn aggregate_means() {
        let rows = vec![
            MetricRow { id: 0, class_id: 0, dice: 0.4, iou: 0.3, sdc: 0.2 },
            MetricRow { id: 1, class_id: 1, dice: 0.6, iou: 0.5, sdc: 0.4 },
        ];
        let rep = aggregate(rows, 1.0).unwrap();
        assert!((rep.mean_dice - 0.5).abs() < 1e-12);
        assert!((rep.mean_iou - 0.4).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rejects_empty() {
        assert!(aggregate(vec![], 1.0).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Mask::empty(4, 4);
        let b = Mask::empty(4, 5);
        assert!(iou(&a, &b).is_err());
        assert!(dice(&a, &b).is_err());
        assert!(surface_dice(&a, &b, 1.0).is_err());
    }
}
