//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seeding::rng_for;

/// One named block of scalar parameters.
#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub name: String,
    pub values: Vec<f64>,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        ParamBlock {
            name: name.into(),
            values,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdSettings {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per block (seeded choice);
    /// `None` checks every coordinate.
    pub max_coords_per_block: Option<usize>,
    pub coord_seed: u64,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords_per_block: None,
            coord_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdBlockReport {
    pub name: String,
    pub checked: usize,
    pub max_err: f64,
    pub worst_coord: Option<usize>,
    /// Coordinates whose perturbed evaluation produced a non-finite value.
    pub non_finite: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub blocks: Vec<FdBlockReport>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn all_pass(&self) -> bool {
        self.blocks.iter().all(|b| b.pass)
    }

    pub fn max_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_err).fold(0.0, f64::max)
    }
}

// Near-zero gradients are compared absolutely: central differences of a
// flat function bottom out at roundoff, not at a meaningful ratio.
const ZERO_FLOOR: f64 = 1e-6;
const ZERO_ABS_TOL: f64 = 1e-8;

fn coord_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let denom = analytic.abs().max(numeric.abs());
    if denom < ZERO_FLOOR {
        if diff <= ZERO_ABS_TOL {
            0.0
        } else {
            diff / ZERO_FLOOR
        }
    } else {
        diff / denom
    }
}

/// Compare `analytic` gradients against central differences of `f`.
///
/// `f` is evaluated twice per checked coordinate on a perturbed copy of the
/// blocks. A non-finite evaluation marks that coordinate failed instead of
/// aborting the whole check.
pub fn finite_difference_check<F>(
    blocks: &[ParamBlock],
    analytic: &[Vec<f64>],
    mut f: F,
    settings: &FdSettings,
) -> Result<FdReport>
where
    F: FnMut(&[ParamBlock]) -> f64,
{
    if settings.step <= 0.0 {
        return Err(Error::InvalidArgument {
            what: "finite_difference_check",
            detail: format!("step must be > 0, got {}", settings.step),
        });
    }
    if blocks.len() != analytic.len() {
        return Err(Error::InvalidArgument {
            what: "finite_difference_check",
            detail: format!("{} blocks vs {} gradient blocks", blocks.len(), analytic.len()),
        });
    }
    let mut work: Vec<ParamBlock> = blocks.to_vec();
    let mut out = Vec::with_capacity(blocks.len());
    let h = settings.step;

    for (bi, block) in blocks.iter().enumerate() {
        if analytic[bi].len() != block.values.len() {
            return Err(Error::InvalidArgument {
                what: "finite_difference_check",
                detail: format!(
                    "block '{}': {} params vs {} analytic grads",
                    block.name,
                    block.values.len(),
                    analytic[bi].len()
                ),
            });
        }
        let coords: Vec<usize> = match settings.max_coords_per_block {
            Some(k) if k < block.values.len() => {
                let mut idx: Vec<usize> = (0..block.values.len()).collect();
                let mut rng = rng_for(settings.coord_seed, "fd-coords", &[bi as u64]);
                idx.shuffle(&mut rng);
                let mut chosen = idx[..k].to_vec();
                chosen.sort_unstable();
                chosen
            }
            _ => (0..block.values.len()).collect(),
        };

        let mut max_err = 0.0f64;
        let mut worst = None;
        let mut non_finite = 0usize;
        for &ci in &coords {
            let orig = work[bi].values[ci];
            work[bi].values[ci] = orig + h;
            let fp = f(&work);
            work[bi].values[ci] = orig - h;
            let fm = f(&work);
            work[bi].values[ci] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                non_finite += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = coord_error(analytic[bi][ci], numeric);
            if err > max_err {
                max_err = err;
                worst = Some(ci);
            }
        }
        let pass = non_finite == 0 && max_err < settings.tolerance;
        out.push(FdBlockReport {
            name: block.name.clone(),
            checked: coords.len(),
            max_err,
            worst_coord: worst,
            non_finite,
            pass,
        });
    }
    Ok(FdReport {
        blocks: out,
        tolerance: settings.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        // f(x) = x*x at x = 3: analytic gradient 6.
        let blocks = vec![ParamBlock::new("x", vec![3.0])];
        let analytic = vec![vec![6.0]];
        let report = finite_difference_check(
            &blocks,
            &analytic,
            |b| b[0].values[0] * b[0].values[0],
            &FdSettings { step: 1e-5, tolerance: 1e-6, ..Default::default() },
        )
        .unwrap();
        assert!(report.all_pass(), "{:?}", report);
    }

    #[test]
    fn constant_function_passes_at_zero() {
        let blocks = vec![ParamBlock::new("x", vec![1.0, -2.0, 0.3])];
        let analytic = vec![vec![0.0; 3]];
        let report = finite_difference_check(&blocks, &analytic, |_| 42.0, &FdSettings::default())
            .unwrap();
        assert!(report.all_pass());
        assert_eq!(report.max_err(), 0.0);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let blocks = vec![ParamBlock::new("x", vec![3.0])];
        let analytic = vec![vec![5.0]]; // true gradient is 6
        let report = finite_difference_check(
            &blocks,
            &analytic,
            |b| b[0].values[0] * b[0].values[0],
            &FdSettings::default(),
        )
        .unwrap();
        assert!(!report.all_pass());
    }

    #[test]
    fn non_finite_eval_is_reported_not_fatal() {
        let blocks = vec![ParamBlock::new("x", vec![0.0])];
        let analytic = vec![vec![0.0]];
        let report =
            finite_difference_check(&blocks, &analytic, |b| b[0].values[0].ln(), &FdSettings::default())
                .unwrap();
        assert!(!report.all_pass());
        assert_eq!(report.blocks[0].non_finite, 1);
    }
}
