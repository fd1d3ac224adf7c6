//! Training objectives: supervised focal+dice combination and the
//! preference family (Bradley-Terry probability, reward MLE, pairwise and
//! four-candidate weighted preference losses).
//!
//! Every loss has a differentiable tape form; scalar `_value` helpers serve
//! scoring and logging. Sigmoid losses are computed as softplus of the
//! negated argument, so large gaps cannot overflow.

use crate::autodiff::{sigmoid, softplus, Tape, ValueId};
use crate::error::{Error, Result};
use crate::grid::Mask;

/// Likelihood clamp used inside focal and log-likelihood terms.
pub const LOSS_EPS: f64 = 1e-6;

/// Which reference likelihood anchors the best candidate's log-ratio in the
/// four-candidate loss. `Matched` pairs each candidate with its own
/// reference likelihood; `SecondCandidate` reproduces the alternative
/// pairing of the best candidate against the runner-up's reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FirstTermRef {
    #[default]
    Matched,
    SecondCandidate,
}

#[derive(Debug, Clone)]
pub struct DpoConfig {
    /// Pairwise loss weight.
    pub beta: f64,
    /// Outer candidate weight (best and worst).
    pub beta1: f64,
    /// Inner candidate weight (second and third).
    pub beta2: f64,
    pub epsilon: f64,
    pub first_term_ref: FirstTermRef,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 1.0,
            beta1: 1.0,
            beta2: 0.5,
            epsilon: LOSS_EPS,
            first_term_ref: FirstTermRef::Matched,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 || self.beta1 <= 0.0 || self.beta2 <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "beta weights must be > 0 (beta={}, beta1={}, beta2={})",
                self.beta, self.beta1, self.beta2
            )));
        }
        if self.beta1 < self.beta2 {
            return Err(Error::InvalidConfig(format!(
                "beta1 ({}) must be >= beta2 ({})",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }
}

/// Candidate log-likelihoods ordered best to worst. Reference values are
/// constants: the reference policy is frozen and carries no gradient.
#[derive(Debug, Clone, Copy)]
pub struct CandidateLogProbs {
    pub lp_policy: [f64; 4],
    pub lp_reference: [f64; 4],
}

#[derive(Debug, Clone, Copy)]
pub struct ComboConfig {
    pub focal_weight: f64,
    pub dice_weight: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub dice_smooth: f64,
}

impl Default for ComboConfig {
    fn default() -> Self {
        ComboConfig {
            focal_weight: 20.0,
            dice_weight: 1.0,
            gamma: 2.0,
            alpha: 1.0,
            dice_smooth: 1.0,
        }
    }
}

fn mask_constants(tape: &mut Tape, prob_shape: &[usize], mask: &Mask) -> Result<(ValueId, ValueId)> {
    let y: Vec<f64> = mask.data.iter().map(|&b| b as u8 as f64).collect();
    if prob_shape.iter().product::<usize>() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            detail: format!("prob shape {:?} vs mask {}x{}", prob_shape, mask.h, mask.w),
        });
    }
    let y_inv: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let yid = tape.constant(prob_shape, &y)?;
    let yinv = tape.constant(prob_shape, &y_inv)?;
    Ok((yid, yinv))
}

/// Mean over pixels of -alpha * (1 - p_t)^gamma * ln(p_t), where p_t is the
/// probability assigned to the true class, clamped to [eps, 1-eps].
pub fn focal_loss(
    tape: &mut Tape,
    prob: ValueId,
    mask: &Mask,
    gamma: f64,
    alpha: f64,
) -> Result<ValueId> {
    if gamma < 0.0 {
        return Err(Error::InvalidArgument {
            what: "focal_loss",
            detail: format!("gamma must be >= 0, got {}", gamma),
        });
    }
    if !(0.0..=1.0).contains(&alpha) || alpha == 0.0 {
        return Err(Error::InvalidArgument {
            what: "focal_loss",
            detail: format!("alpha must be in (0, 1], got {}", alpha),
        });
    }
    let shape = tape.shape(prob).to_vec();
    let (y, y_inv) = mask_constants(tape, &shape, mask)?;
    let py = tape.mul(prob, y)?;
    let p_neg = tape.neg(prob)?;
    let one_minus_p = tape.add_scalar(p_neg, 1.0)?;
    let pny = tape.mul(one_minus_p, y_inv)?;
    let p_t = tape.add(py, pny)?;
    let p_t = tape.clamp(p_t, LOSS_EPS, 1.0 - LOSS_EPS)?;
    let neg_pt = tape.neg(p_t)?;
    let one_minus_pt = tape.add_scalar(neg_pt, 1.0)?;
    let focus = tape.pow_const(one_minus_pt, gamma)?;
    let log_pt = tape.log(p_t)?;
    let px = tape.mul(focus, log_pt)?;
    let px = tape.scale(px, -alpha)?;
    tape.mean(px)
}

/// 1 - (2*sum(p*y) + smooth) / (sum(p) + sum(y) + smooth).
pub fn dice_loss(tape: &mut Tape, prob: ValueId, mask: &Mask, smooth: f64) -> Result<ValueId> {
    if smooth <= 0.0 {
        return Err(Error::InvalidArgument {
            what: "dice_loss",
            detail: format!("smooth must be > 0, got {}", smooth),
        });
    }
    let shape = tape.shape(prob).to_vec();
    let (y, _) = mask_constants(tape, &shape, mask)?;
    let py = tape.mul(prob, y)?;
    let inter = tape.sum(py)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, smooth)?;
    let sp = tape.sum(prob)?;
    let sy = tape.sum(y)?;
    let den = tape.add(sp, sy)?;
    let den = tape.add_scalar(den, smooth)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.neg(ratio)?;
    tape.add_scalar(neg, 1.0)
}

/// Weighted sum of focal and dice terms; defaults to the 20:1 combination.
pub fn combo_loss(tape: &mut Tape, prob: ValueId, mask: &Mask, cfg: &ComboConfig) -> Result<ValueId> {
    if cfg.focal_weight <= 0.0 || cfg.dice_weight <= 0.0 {
        return Err(Error::InvalidArgument {
            what: "combo_loss",
            detail: "weights must be > 0".into(),
        });
    }
    let f = focal_loss(tape, prob, mask, cfg.gamma, cfg.alpha)?;
    let d = dice_loss(tape, prob, mask, cfg.dice_smooth)?;
    let fw = tape.scale(f, cfg.focal_weight)?;
    let dw = tape.scale(d, cfg.dice_weight)?;
    tape.add(fw, dw)
}

/// P(first beats second) under exponentiated-score pairing, computed in the
/// shift-stable logistic form.
pub fn bt_preference_prob(reward_m: f64, reward_l: f64) -> f64 {
    sigmoid(reward_m - reward_l)
}

/// -mean ln sigmoid(r_m - r_l) over reward pairs.
pub fn reward_mle_loss(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument {
            what: "reward_mle_loss",
            detail: "empty pair list".into(),
        });
    }
    let total: f64 = pairs.iter().map(|&(m, l)| softplus(-(m - l))).sum();
    Ok(total / pairs.len() as f64)
}

/// Differentiable form of [`reward_mle_loss`] over tape-resident rewards.
pub fn reward_mle_loss_tape(tape: &mut Tape, pairs: &[(ValueId, ValueId)]) -> Result<ValueId> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument {
            what: "reward_mle_loss",
            detail: "empty pair list".into(),
        });
    }
    let mut acc: Option<ValueId> = None;
    for &(m, l) in pairs {
        let gap = tape.sub(m, l)?;
        let neg = tape.neg(gap)?;
        let term = tape.softplus(neg)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    tape.scale(acc.expect("non-empty"), 1.0 / pairs.len() as f64)
}

/// -ln sigmoid(beta * ((lp_m - ref_m) - (lp_l - ref_l))). Reference terms
/// are constants; gradient flows through the policy log-probs only.
pub fn dpo_pair_loss(
    tape: &mut Tape,
    lp_policy_m: ValueId,
    lp_policy_l: ValueId,
    lp_ref_m: f64,
    lp_ref_l: f64,
    beta: f64,
) -> Result<ValueId> {
    if beta <= 0.0 {
        return Err(Error::InvalidArgument {
            what: "dpo_pair_loss",
            detail: format!("beta must be > 0, got {}", beta),
        });
    }
    let dm = tape.add_scalar(lp_policy_m, -lp_ref_m)?;
    let dl = tape.add_scalar(lp_policy_l, -lp_ref_l)?;
    let gap = tape.sub(dm, dl)?;
    let z = tape.scale(gap, beta)?;
    let neg = tape.neg(z)?;
    tape.softplus(neg)
}

pub fn dpo_pair_loss_value(
    lp_policy_m: f64,
    lp_policy_l: f64,
    lp_ref_m: f64,
    lp_ref_l: f64,
    beta: f64,
) -> f64 {
    softplus(-beta * ((lp_policy_m - lp_ref_m) - (lp_policy_l - lp_ref_l)))
}

fn quad_reference(clp_ref: &[f64; 4], cfg: &DpoConfig) -> [f64; 4] {
    let first = match cfg.first_term_ref {
        FirstTermRef::Matched => clp_ref[0],
        FirstTermRef::SecondCandidate => clp_ref[1],
    };
    [first, clp_ref[1], clp_ref[2], clp_ref[3]]
}

/// Four-candidate preference loss over log-ratios ordered best to worst:
/// -ln sigmoid(b1*D1 + b2*D2 - b2*D3 - b1*D4), D_i = lp_policy_i - lp_ref_i.
pub fn dpo_quad_loss(
    tape: &mut Tape,
    lp_policy: [ValueId; 4],
    lp_reference: [f64; 4],
    cfg: &DpoConfig,
) -> Result<ValueId> {
    cfg.validate()?;
    let refs = quad_reference(&lp_reference, cfg);
    let signs = [cfg.beta1, cfg.beta2, -cfg.beta2, -cfg.beta1];
    let mut inner: Option<ValueId> = None;
    for i in 0..4 {
        let delta = tape.add_scalar(lp_policy[i], -refs[i])?;
        let term = tape.scale(delta, signs[i])?;
        inner = Some(match inner {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let neg = tape.neg(inner.expect("four terms"))?;
    tape.softplus(neg)
}

pub fn dpo_quad_loss_value(clp: &CandidateLogProbs, cfg: &DpoConfig) -> f64 {
    let refs = quad_reference(&clp.lp_reference, cfg);
    let deltas: Vec<f64> = (0..4).map(|i| clp.lp_policy[i] - refs[i]).collect();
    let inner = cfg.beta1 * deltas[0] + cfg.beta2 * deltas[1]
        - cfg.beta2 * deltas[2]
        - cfg.beta1 * deltas[3];
    softplus(-inner)
}
