//! Virtual annotator: thresholds a probability map into candidate masks,
//! scores them against ground truth (rating signal only, never gradients),
//! and optionally perturbs the ratings with adjacent-pair flip noise.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{Mask, ProbMap};
use crate::metrics::iou;
use crate::seeding::rng_for;

/// Candidate thresholds used throughout training.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.3, 0.4, 0.5, 0.6];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringStrategy {
    /// Supervise only on the top-ranked candidate (pseudo-label training).
    BestCandidateOnly,
    /// Order candidates by binned rating; ties fall back to lower threshold.
    Rating,
    /// Order candidates by raw overlap.
    Ranking,
}

impl ScoringStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoringStrategy::BestCandidateOnly => "best-candidate",
            ScoringStrategy::Rating => "rating",
            ScoringStrategy::Ranking => "ranking",
        }
    }

    pub fn parse(s: &str) -> Option<ScoringStrategy> {
        match s {
            "best-candidate" | "best-candidate-only" | "best" => {
                Some(ScoringStrategy::BestCandidateOnly)
            }
            "rating" => Some(ScoringStrategy::Rating),
            "ranking" => Some(ScoringStrategy::Ranking),
            _ => None,
        }
    }
}

impl std::fmt::Display for ScoringStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Four thresholded candidates with their scores. `order[0]` is the best
/// candidate's index into the parallel arrays.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub candidates: Vec<Mask>,
    pub thresholds: Vec<f64>,
    pub iou: Vec<f64>,
    pub rating: Vec<u8>,
    pub order: [usize; 4],
    pub flipped: bool,
}

impl CandidateSet {
    /// Candidate indices best to worst.
    pub fn ordered(&self) -> impl Iterator<Item = usize> + '_ {
        self.order.iter().copied()
    }

    pub fn best(&self) -> usize {
        self.order[0]
    }

    /// CSV audit row: thresholds, overlaps, ratings, order, flip marker.
    pub fn audit_row(&self, sample_id: u64) -> String {
        let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(" ");
        format!(
            "{},{},{},{},{},{}",
            sample_id,
            join(&mut self.thresholds.iter().map(|v| format!("{}", v))),
            join(&mut self.iou.iter().map(|v| format!("{:.6}", v))),
            join(&mut self.rating.iter().map(|v| format!("{}", v))),
            join(&mut self.order.iter().map(|v| format!("{}", v))),
            self.flipped as u8
        )
    }
}

fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.len() != 4 {
        return Err(Error::InvalidArgument {
            what: "generate_candidates",
            detail: format!("exactly 4 thresholds required, got {}", thresholds.len()),
        });
    }
    let increasing = thresholds.windows(2).all(|w| w[0] < w[1]);
    let in_range = thresholds.iter().all(|&t| t > 0.0 && t < 1.0);
    if !increasing || !in_range {
        return Err(Error::InvalidArgument {
            what: "generate_candidates",
            detail: format!("thresholds must be strictly increasing in (0,1): {:?}", thresholds),
        });
    }
    Ok(())
}

/// Threshold the probability map at each level; masks are nested (higher
/// threshold is a subset of lower).
pub fn generate_candidates(prob_map: &ProbMap, thresholds: &[f64]) -> Result<Vec<Mask>> {
    validate_thresholds(thresholds)?;
    Ok(thresholds.iter().map(|&t| prob_map.threshold(t)).collect())
}

/// Overlap-to-rating bins; left-closed, 0.7 maps to the top rating.
pub fn rate(iou_value: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&iou_value) {
        return Err(Error::InvalidArgument {
            what: "rate",
            detail: format!("overlap must be in [0, 1], got {}", iou_value),
        });
    }
    Ok(if iou_value < 0.4 {
        1
    } else if iou_value < 0.55 {
        2
    } else if iou_value < 0.7 {
        3
    } else {
        4
    })
}

/// Score candidates against ground truth and order them best to worst under
/// the chosen strategy. Ties always break toward the lower threshold.
/// The seed is reserved for stochastic raters; the current strategies are
/// deterministic and ignore it.
pub fn score_candidates(
    candidates: &[Mask],
    thresholds: &[f64],
    gt_mask: &Mask,
    strategy: ScoringStrategy,
    _seed: u64,
) -> Result<CandidateSet> {
    validate_thresholds(thresholds)?;
    if candidates.len() != 4 {
        return Err(Error::InvalidArgument {
            what: "score_candidates",
            detail: format!("exactly 4 candidates required, got {}", candidates.len()),
        });
    }
    let ious: Vec<f64> = candidates
        .iter()
        .map(|c| iou(c, gt_mask))
        .collect::<Result<_>>()?;
    let ratings: Vec<u8> = ious.iter().map(|&v| rate(v)).collect::<Result<_>>()?;

    let mut order = [0usize, 1, 2, 3];
    match strategy {
        ScoringStrategy::Rating => {
            // rating desc; equal ratings keep ascending-threshold order
            order.sort_by(|&a, &b| ratings[b].cmp(&ratings[a]).then(a.cmp(&b)));
        }
        ScoringStrategy::Ranking | ScoringStrategy::BestCandidateOnly => {
            order.sort_by(|&a, &b| {
                ious[b].partial_cmp(&ious[a]).expect("finite overlaps").then(a.cmp(&b))
            });
        }
    }
    Ok(CandidateSet {
        candidates: candidates.to_vec(),
        thresholds: thresholds.to_vec(),
        iou: ious,
        rating: ratings,
        order,
        flipped: false,
    })
}

/// With probability `flip_fraction`, transpose one adjacent pair of the
/// best-to-worst order (chosen uniformly among the three) and swap the two
/// candidates' ratings with it. Deterministic under seed.
pub fn flip_noise(set: &CandidateSet, flip_fraction: f64, seed: u64) -> Result<CandidateSet> {
    if !(0.0..=1.0).contains(&flip_fraction) {
        return Err(Error::InvalidArgument {
            what: "flip_noise",
            detail: format!("flip_fraction must be in [0, 1], got {}", flip_fraction),
        });
    }
    let mut out = set.clone();
    if flip_fraction == 0.0 {
        return Ok(out);
    }
    let mut rng = rng_for(seed, "rating-flip", &[]);
    if !rng.random_bool(flip_fraction) {
        return Ok(out);
    }
    // pair j swaps order positions (2-j, 3-j): j=0 perturbs the two worst
    // candidates, j=2 the two best
    let j = rng.random_range(0..3usize);
    let (hi, lo) = (2 - j, 3 - j);
    let (a, b) = (out.order[hi], out.order[lo]);
    out.order.swap(hi, lo);
    out.rating.swap(a, b);
    out.flipped = true;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use rand::Rng;

    fn prob(h: usize, w: usize, data: Vec<f64>) -> ProbMap {
        ProbMap::new(h, w, data).unwrap()
    }

    fn row_mask(w: usize, on: std::ops::Range<usize>) -> Mask {
        let mut m = Mask::empty(1, w);
        for c in on {
            m.set(0, c, true);
        }
        m
    }

    #[test]
    fn constant_map_thresholds_cleanly() {
        let pm = prob(2, 2, vec![0.45; 4]);
        let cands = generate_candidates(&pm, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(cands[0].area(), 4);
        assert_eq!(cands[1].area(), 4);
        assert_eq!(cands[2].area(), 0);
        assert_eq!(cands[3].area(), 0);
    }

    #[test]
    fn binary_map_gives_identical_candidates() {
        let pm = prob(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let cands = generate_candidates(&pm, &DEFAULT_THRESHOLDS).unwrap();
        for c in &cands {
            assert_eq!(c.data, vec![true, false, false, true]);
        }
    }

    #[test]
    fn candidates_are_nested() {
        for seed in 0..100u64 {
            let mut rng = rng_for(seed, "nest", &[]);
            let pm = prob(8, 8, (0..64).map(|_| rng.random_range(0.0..1.0)).collect());
            let cands = generate_candidates(&pm, &DEFAULT_THRESHOLDS).unwrap();
            for k in 1..4 {
                let subset = cands[k]
                    .data
                    .iter()
                    .zip(&cands[k - 1].data)
                    .all(|(&hi, &lo)| !hi || lo);
                assert!(subset, "seed {}: level {} not nested", seed, k);
            }
        }
    }

    #[test]
    fn invalid_thresholds_rejected() {
        let pm = prob(1, 1, vec![0.5]);
        assert!(generate_candidates(&pm, &[0.3, 0.3, 0.5, 0.6]).is_err());
        assert!(generate_candidates(&pm, &[0.0, 0.3, 0.5, 0.6]).is_err());
        assert!(generate_candidates(&pm, &[0.3, 0.5, 0.6]).is_err());
    }

    #[test]
    fn rating_bins() {
        assert_eq!(rate(0.2).unwrap(), 1);
        assert_eq!(rate(0.6).unwrap(), 3);
        assert_eq!(rate(0.7).unwrap(), 4);
        let grid = [0.0, 0.399, 0.4, 0.549, 0.55, 0.699, 0.7, 1.0];
        let expect = [1, 1, 2, 2, 3, 3, 4, 4];
        for (v, e) in grid.iter().zip(expect) {
            assert_eq!(rate(*v).unwrap(), e, "at {}", v);
        }
        assert!(rate(-0.1).is_err());
        assert!(rate(1.1).is_err());
    }

    #[test]
    fn rate_is_monotone() {
        let mut prev = 0;
        for i in 0..=100 {
            let r = rate(i as f64 / 100.0).unwrap();
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn scoring_orders_by_strategy() {
        // overlaps 0.8, 0.6, 0.45, 0.1 against a 10-pixel ground truth
        let gt = row_mask(40, 0..10);
        let cands = vec![
            row_mask(40, 0..8),  // 8/10 = 0.8
            row_mask(40, 0..6),  // 6/10 = 0.6
            row_mask(40, 1..20), // 9/20 = 0.45
            row_mask(40, 0..1),  // 1/10 = 0.1
        ];
        let set = score_candidates(&cands, &DEFAULT_THRESHOLDS, &gt, ScoringStrategy::Rating, 0)
            .unwrap();
        assert_eq!(set.rating, vec![4, 3, 2, 1]);
        assert_eq!(set.order, [0, 1, 2, 3]);
        let set2 = score_candidates(&cands, &DEFAULT_THRESHOLDS, &gt, ScoringStrategy::Ranking, 0)
            .unwrap();
        assert_eq!(set2.order, [0, 1, 2, 3]);
    }

    #[test]
    fn identical_candidates_fall_back_to_threshold_order() {
        let gt = row_mask(16, 2..8);
        let cands = vec![gt.clone(), gt.clone(), gt.clone(), gt.clone()];
        for strat in [ScoringStrategy::Rating, ScoringStrategy::Ranking] {
            let set = score_candidates(&cands, &DEFAULT_THRESHOLDS, &gt, strat, 0).unwrap();
            assert_eq!(set.order, [0, 1, 2, 3]);
        }
    }

    #[test]
    fn ranking_distinguishes_within_a_rating_bin() {
        // overlaps 0.41 and 0.54 both bin to rating 2
        let gt = row_mask(200, 0..100);
        let c_54 = row_mask(200, 0..54); // 54/100
        let c_41 = row_mask(200, 0..41); // 41/100
        let cands = vec![c_41.clone(), c_54.clone(), c_41.clone(), c_41.clone()];
        let rating_set =
            score_candidates(&cands, &DEFAULT_THRESHOLDS, &gt, ScoringStrategy::Rating, 0).unwrap();
        // all rating 2: pure threshold order
        assert_eq!(rating_set.rating, vec![2, 2, 2, 2]);
        assert_eq!(rating_set.order, [0, 1, 2, 3]);
        let ranking_set =
            score_candidates(&cands, &DEFAULT_THRESHOLDS, &gt, ScoringStrategy::Ranking, 0).unwrap();
        assert_eq!(ranking_set.order[0], 1, "highest raw overlap first");
    }

    #[test]
    fn flip_zero_is_identity_and_one_forces_a_transposition() {
        let gt = row_mask(40, 0..10);
        let cands = vec![
            row_mask(40, 0..8),
            row_mask(40, 0..6),
            row_mask(40, 1..20),
            row_mask(40, 0..1),
        ];
        let set = score_candidates(&cands, &DEFAULT_THRESHOLDS, &gt, ScoringStrategy::Ranking, 0)
            .unwrap();
        let same = flip_noise(&set, 0.0, 5).unwrap();
        assert_eq!(same.order, set.order);
        assert_eq!(same.rating, set.rating);
        assert!(!same.flipped);

        for seed in 0..20u64 {
            let flipped = flip_noise(&set, 1.0, seed).unwrap();
            assert!(flipped.flipped);
            // exactly one adjacent transposition of the order
            let mismatches: Vec<usize> =
                (0..4).filter(|&i| flipped.order[i] != set.order[i]).collect();
            assert_eq!(mismatches.len(), 2, "seed {}", seed);
            assert_eq!(mismatches[1], mismatches[0] + 1);
            // rating multiset unchanged
            let mut a = set.rating.clone();
            let mut b = flipped.rating.clone();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn flips_are_deterministic_under_seed() {
        let gt = row_mask(40, 0..10);
        let cands = vec![
            row_mask(40, 0..8),
            row_mask(40, 0..6),
            row_mask(40, 1..20),
            row_mask(40, 0..1),
        ];
        let set = score_candidates(&cands, &DEFAULT_THRESHOLDS, &gt, ScoringStrategy::Ranking, 0)
            .unwrap();
        let a = flip_noise(&set, 0.3, 77).unwrap();
        let b = flip_noise(&set, 0.3, 77).unwrap();
        assert_eq!(a.order, b.order);
        assert_eq!(a.rating, b.rating);
        assert_eq!(a.flipped, b.flipped);
    }
}
