//! Adaptive-moment optimizer with bias-corrected estimates, plus state
//! persistence for resumable runs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::segmenter::{GradStore, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators per parameter block.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl OptimizerState {
    pub fn new(policy: &PolicyParams) -> Self {
        let zeros: Vec<Vec<f64>> = policy.blocks().iter().map(|t| vec![0.0; t.numel()]).collect();
        OptimizerState { m: zeros.clone(), v: zeros, step: 0, hyper: AdamHyper::default() }
    }
}

/// One update over every block that received a gradient. Frozen policies
/// are rejected; a non-finite gradient aborts before any mutation.
pub fn optimizer_step(
    params: &mut PolicyParams,
    grads: &GradStore,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.frozen {
        return Err(Error::FrozenPolicy);
    }
    if lr <= 0.0 {
        return Err(Error::InvalidArgument {
            what: "optimizer_step",
            detail: format!("lr must be > 0, got {}", lr),
        });
    }
    let descs = params.descs();
    if grads.grads.len() != descs.len() {
        return Err(Error::InvalidArgument {
            what: "optimizer_step",
            detail: format!("{} grad blocks vs {} params", grads.grads.len(), descs.len()),
        });
    }
    for (bi, g) in grads.grads.iter().enumerate() {
        if let Some(g) = g {
            if g.len() != params.block(bi).numel() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    detail: format!("block '{}': grad len {}", descs[bi].name, g.len()),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { block: descs[bi].name.to_string() });
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for (bi, g) in grads.grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let m = &mut state.m[bi];
        let v = &mut state.v[bi];
        let p = params.block_mut(bi).data_mut();
        for k in 0..g.len() {
            m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
            v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    Ok(())
}

const MAGIC: &[u8; 8] = b"PSEGOPT1";

pub fn save_optimizer_state(state: &OptimizerState, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&state.step.to_le_bytes());
    for v in [state.hyper.beta1, state.hyper.beta2, state.hyper.eps] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(state.m.len() as u32).to_le_bytes());
    for (m, v) in state.m.iter().zip(&state.v) {
        buf.extend_from_slice(&(m.len() as u64).to_le_bytes());
        for &x in m {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for &x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_optimizer_state(path: &Path) -> Result<OptimizerState> {
    let raw = match fs::read(path) {
        Ok(r) => r,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile { path: path.to_path_buf() })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    struct R<'a> {
        buf: &'a [u8],
        pos: usize,
        path: &'a Path,
    }
    impl<'a> R<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.pos + n > self.buf.len() {
                return Err(Error::BadCheckpoint {
                    path: self.path.to_path_buf(),
                    detail: format!("truncated at {}", self.pos),
                });
            }
            let s = &self.buf[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }
        fn f64(&mut self) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        }
    }
    let mut r = R { buf: &raw, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::BadCheckpoint { path: path.to_path_buf(), detail: "bad magic".into() });
    }
    let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let eps = r.f64()?;
    let blocks = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
    let read_vec = |bytes: &[u8]| -> Vec<f64> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    let mut m = Vec::with_capacity(blocks);
    let mut v = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        m.push(read_vec(r.take(len * 8)?));
        v.push(read_vec(r.take(len * 8)?));
    }
    Ok(OptimizerState { m, v, step, hyper: AdamHyper { beta1, beta2, eps } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::SegmenterConfig;

    fn tiny_policy() -> PolicyParams {
        PolicyParams::init(
            SegmenterConfig { embed_dim: 4, mid_dim: 2, text_dim: 4, ..Default::default() },
            1,
        )
        .unwrap()
    }

    fn grads_like(policy: &PolicyParams, fill: f64) -> GradStore {
        GradStore {
            grads: policy.blocks().iter().map(|t| Some(vec![fill; t.numel()])).collect(),
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = tiny_policy();
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        let g = grads_like(&p, 0.0);
        optimizer_step(&mut p, &g, &mut st, 1e-3).unwrap();
        for i in 0..p.blocks().len() {
            assert_eq!(p.block(i).data(), before.block(i).data());
        }
        assert!(st.m.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = tiny_policy();
        let before = p.block(0).data().to_vec();
        let mut st = OptimizerState::new(&p);
        let lr = 1e-3;
        let g = grads_like(&p, 0.25);
        optimizer_step(&mut p, &g, &mut st, lr).unwrap();
        for (a, b) in p.block(0).data().iter().zip(&before) {
            // bias-corrected first step: m_hat/sqrt(v_hat) = g/|g| = 1
            let moved = b - a;
            assert!((moved - lr).abs() < 1e-6, "moved {}", moved);
        }
    }

    #[test]
    fn frozen_policy_rejects_updates() {
        let mut p = tiny_policy().frozen_copy();
        let g = grads_like(&p, 0.1);
        let mut st = OptimizerState::new(&p);
        assert!(matches!(optimizer_step(&mut p, &g, &mut st, 1e-3), Err(Error::FrozenPolicy)));
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut p = tiny_policy();
        let before = p.clone();
        let mut g = grads_like(&p, 0.1);
        g.grads[2].as_mut().unwrap()[0] = f64::NAN;
        let mut st = OptimizerState::new(&p);
        let err = optimizer_step(&mut p, &g, &mut st, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }));
        for i in 0..p.blocks().len() {
            assert_eq!(p.block(i).data(), before.block(i).data());
        }
        assert_eq!(st.step, 0);
    }

    #[test]
    fn untouched_blocks_stay_bit_identical() {
        let mut p = tiny_policy();
        let before = p.clone();
        let mut g = grads_like(&p, 0.1);
        // only decoder-ish tail blocks get gradients
        for gi in g.grads.iter_mut().take(6) {
            *gi = None;
        }
        let mut st = OptimizerState::new(&p);
        optimizer_step(&mut p, &g, &mut st, 1e-3).unwrap();
        for i in 0..6 {
            assert_eq!(p.block(i).data(), before.block(i).data());
        }
        assert_ne!(p.block(6).data(), before.block(6).data());
    }

    #[test]
    fn state_round_trips() {
        let p = tiny_policy();
        let mut st = OptimizerState::new(&p);
        let mut pp = p.clone();
        optimizer_step(&mut pp, &grads_like(&p, 0.3), &mut st, 1e-3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.bin");
        save_optimizer_state(&st, &path).unwrap();
        let back = load_optimizer_state(&path).unwrap();
        assert_eq!(back.step, st.step);
        assert_eq!(back.m, st.m);
        assert_eq!(back.v, st.v);
        assert_eq!(back.hyper, st.hyper);
    }

    #[test]
    fn two_identical_runs_identical_trajectories() {
        let run = || {
            let mut p = tiny_policy();
            let mut st = OptimizerState::new(&p);
            for step in 1..=5 {
                let g = grads_like(&p, 0.1 * step as f64);
                optimizer_step(&mut p, &g, &mut st, 1e-3).unwrap();
            }
            p.block(0).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
