//! Forward passes of the prompt-conditioned segmenter.
//!
//! The encoder downsamples the image 4x into a d-channel feature map. The
//! prompt encoder turns boxes, points, and the text stub into a single
//! d-vector via sinusoidal positional encodings, learned projections and
//! per-type embeddings, mean-pooled over prompt elements. The decoder
//! broadcast-adds the prompt vector onto the features, optionally fuses a
//! downsampled previous mask, and upsamples back to a sigmoid probability
//! map.

use crate::autodiff::{Tape, Tensor, ValueId};
use crate::error::{Error, Result};
use crate::grid::{Image, Mask, ProbMap};
use crate::losses::LOSS_EPS;
use crate::prompts::PromptSet;
use crate::segmenter::params::{idx, ParamGroup, PolicyParams};

/// Which parameter groups receive gradients in a given pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainableGroups {
    pub encoder: bool,
    pub prompt: bool,
    pub decoder: bool,
}

impl TrainableGroups {
    pub const ALL: TrainableGroups = TrainableGroups { encoder: true, prompt: true, decoder: true };
    pub const DECODER_ONLY: TrainableGroups =
        TrainableGroups { encoder: false, prompt: false, decoder: true };
    pub const NONE: TrainableGroups =
        TrainableGroups { encoder: false, prompt: false, decoder: false };

    pub fn contains(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Prompt => self.prompt,
            ParamGroup::Decoder => self.decoder,
        }
    }
}

/// Tape-resident leaves for every parameter block of one policy.
pub struct PolicyBinding {
    pub ids: Vec<ValueId>,
    pub trainable: Vec<bool>,
}

/// Per-block gradients collected after a backward pass; `None` marks blocks
/// that were bound as constants.
pub struct GradStore {
    pub grads: Vec<Option<Vec<f64>>>,
}

impl PolicyParams {
    /// Register every block on the tape. Frozen policies always bind as
    /// constants regardless of the requested groups.
    pub fn bind(&self, tape: &mut Tape, groups: TrainableGroups) -> PolicyBinding {
        let descs = self.descs();
        let mut ids = Vec::with_capacity(descs.len());
        let mut trainable = Vec::with_capacity(descs.len());
        for (i, desc) in descs.iter().enumerate() {
            let t = !self.frozen && groups.contains(desc.group);
            let tensor = self.block(i);
            let id = if t {
                let mut leaf = tensor.clone();
                leaf.requires_grad = true;
                tape.leaf(&leaf)
            } else {
                tape.constant(tensor.shape(), tensor.data()).expect("block shape consistent")
            };
            ids.push(id);
            trainable.push(t);
        }
        PolicyBinding { ids, trainable }
    }

    pub fn collect_grads(&self, tape: &Tape, binding: &PolicyBinding) -> GradStore {
        let grads = binding
            .ids
            .iter()
            .zip(&binding.trainable)
            .map(|(&id, &t)| t.then(|| tape.grad(id).to_vec()))
            .collect();
        GradStore { grads }
    }

    /// Encoder: image [H, W] -> features [1, d, H/4, W/4]. H and W must be
    /// divisible by 4.
    pub fn encode_image(
        &self,
        tape: &mut Tape,
        binding: &PolicyBinding,
        image: &Image,
    ) -> Result<ValueId> {
        if image.h % 4 != 0 || image.w % 4 != 0 {
            return Err(Error::ShapeMismatch {
                op: "encode_image",
                detail: format!("{}x{} not divisible by 4", image.h, image.w),
            });
        }
        let x = tape.constant(&[1, 1, image.h, image.w], &image.data)?;
        let b = &binding.ids;
        let h1 = tape.conv2d(x, b[idx::ENC1_W], b[idx::ENC1_B], 2)?;
        let h1 = tape.gelu(h1)?;
        let h2 = tape.conv2d(h1, b[idx::ENC2_W], b[idx::ENC2_B], 2)?;
        let h2 = tape.gelu(h2)?;
        let h3 = tape.conv2d(h2, b[idx::ENC3_W], b[idx::ENC3_B], 1)?;
        tape.gelu(h3)
    }

    /// Prompt encoder: boxes, points, and text stub -> embedding [d].
    /// Elements are canonically ordered before pooling, so the embedding is
    /// exactly invariant to input permutations.
    pub fn encode_prompts(
        &self,
        tape: &mut Tape,
        binding: &PolicyBinding,
        prompts: &PromptSet,
        image_size: (usize, usize),
    ) -> Result<ValueId> {
        if prompts.boxes.is_empty() && prompts.points.is_empty() {
            return Err(Error::InvalidArgument {
                what: "encode_prompts",
                detail: "prompt set has no boxes and no points".into(),
            });
        }
        if prompts.text_stub.len() != self.cfg.text_dim {
            return Err(Error::ShapeMismatch {
                op: "encode_prompts",
                detail: format!(
                    "text stub len {} vs text_dim {}",
                    prompts.text_stub.len(),
                    self.cfg.text_dim
                ),
            });
        }
        let d = self.cfg.embed_dim;
        let (h, w) = image_size;
        let b = &binding.ids;

        let mut boxes = prompts.boxes.clone();
        boxes.sort_by_key(|bb| (bb.r0, bb.c0, bb.r1, bb.c1));
        let mut points = prompts.points.clone();
        points.sort_by_key(|p| (p.row, p.col));

        let mut elements: Vec<ValueId> = Vec::new();
        for bb in &boxes {
            let mut pe = positional_encoding(d, bb.r0, bb.c0, h, w);
            pe.extend(positional_encoding(d, bb.r1, bb.c1, h, w));
            let pe_id = tape.constant(&[2 * d], &pe)?;
            let proj = tape.linear(pe_id, b[idx::BOX_W], b[idx::BOX_B])?;
            elements.push(tape.add(proj, b[idx::TYPE_BOX])?);
        }
        for p in &points {
            let pe = positional_encoding(d, p.row, p.col, h, w);
            let pe_id = tape.constant(&[d], &pe)?;
            let proj = tape.linear(pe_id, b[idx::POINT_W], b[idx::POINT_B])?;
            elements.push(tape.add(proj, b[idx::TYPE_POINT])?);
        }
        let text_id = tape.constant(&[self.cfg.text_dim], &prompts.text_stub)?;
        elements.push(tape.linear(text_id, b[idx::TEXT_W], b[idx::TEXT_B])?);

        let count = elements.len();
        let mut pooled = elements[0];
        for &e in &elements[1..] {
            pooled = tape.add(pooled, e)?;
        }
        tape.scale(pooled, 1.0 / count as f64)
    }

    /// Decoder: features + prompt embedding (+ optional previous mask) ->
    /// probability map [H, W].
    pub fn decode_mask(
        &self,
        tape: &mut Tape,
        binding: &PolicyBinding,
        features: ValueId,
        prompt_embedding: ValueId,
        prev_mask: Option<&ProbMap>,
    ) -> Result<ValueId> {
        let fs = tape.shape(features).to_vec();
        let [n, c, h4, w4] = fs[..] else {
            return Err(Error::ShapeMismatch {
                op: "decode_mask",
                detail: format!("features must be [1,d,h,w], got {:?}", fs),
            });
        };
        if n != 1 || c != self.cfg.embed_dim {
            return Err(Error::ShapeMismatch {
                op: "decode_mask",
                detail: format!("features {:?} vs embed_dim {}", fs, self.cfg.embed_dim),
            });
        }
        let b = &binding.ids;
        let mut fused = tape.channel_bias(features, prompt_embedding)?;
        if let Some(prev) = prev_mask {
            if prev.h != 4 * h4 || prev.w != 4 * w4 {
                return Err(Error::ShapeMismatch {
                    op: "decode_mask",
                    detail: format!("prev_mask {}x{} vs features {}x{}", prev.h, prev.w, h4, w4),
                });
            }
            let m = tape.constant(&[1, 1, prev.h, prev.w], &prev.data)?;
            let f1 = tape.conv2d(m, b[idx::FB1_W], b[idx::FB1_B], 2)?;
            let f1 = tape.gelu(f1)?;
            let f2 = tape.conv2d(f1, b[idx::FB2_W], b[idx::FB2_B], 2)?;
            fused = tape.add(fused, f2)?;
        }
        let y = tape.conv2d(fused, b[idx::DEC1_W], b[idx::DEC1_B], 1)?;
        let y = tape.gelu(y)?;
        let y = tape.upsample2x(y)?;
        let y = tape.conv2d(y, b[idx::DEC2_W], b[idx::DEC2_B], 1)?;
        let y = tape.gelu(y)?;
        let y = tape.upsample2x(y)?;
        let y = tape.conv2d(y, b[idx::DEC3_W], b[idx::DEC3_B], 1)?;
        let y = tape.sigmoid(y)?;
        tape.reshape(y, &[4 * h4, 4 * w4])
    }

    /// Full no-grad forward returning the probability map values.
    pub fn predict(&self, image: &Image, prompts: &PromptSet) -> Result<ProbMap> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, TrainableGroups::NONE);
        let feat = self.encode_image(&mut tape, &binding, image)?;
        let pe = self.encode_prompts(&mut tape, &binding, prompts, (image.h, image.w))?;
        let pm = self.decode_mask(&mut tape, &binding, feat, pe, None)?;
        ProbMap::new(image.h, image.w, tape.value(pm).to_vec())
    }

    /// Encoder output as plain values, for caching when the encoder is frozen.
    pub fn feature_values(&self, image: &Image) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, TrainableGroups::NONE);
        let feat = self.encode_image(&mut tape, &binding, image)?;
        Ok((tape.shape(feat).to_vec(), tape.value(feat).to_vec()))
    }

    /// Prompt embedding as plain values.
    pub fn prompt_embedding_values(
        &self,
        prompts: &PromptSet,
        image_size: (usize, usize),
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, TrainableGroups::NONE);
        let pe = self.encode_prompts(&mut tape, &binding, prompts, image_size)?;
        Ok(tape.value(pe).to_vec())
    }

    /// No-grad decode from cached feature/embedding values.
    pub fn decode_values(
        &self,
        feat_shape: &[usize],
        feat: &[f64],
        prompt_embedding: &[f64],
    ) -> Result<ProbMap> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, TrainableGroups::NONE);
        let f = tape.constant(feat_shape, feat)?;
        let e = tape.constant(&[prompt_embedding.len()], prompt_embedding)?;
        let pm = self.decode_mask(&mut tape, &binding, f, e, None)?;
        let shape = tape.shape(pm).to_vec();
        ProbMap::new(shape[0], shape[1], tape.value(pm).to_vec())
    }
}

/// Sinusoidal 2-d positional encoding of a pixel coordinate, length d.
/// Frequencies double per bank; coordinates are normalized to [0, 1].
pub fn positional_encoding(d: usize, row: usize, col: usize, h: usize, w: usize) -> Vec<f64> {
    debug_assert_eq!(d % 4, 0);
    let nf = d / 4;
    let rn = if h > 1 { row as f64 / (h - 1) as f64 } else { 0.0 };
    let cn = if w > 1 { col as f64 / (w - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(d);
    for &coord in &[rn, cn] {
        for k in 0..nf {
            let omega = std::f64::consts::PI * (1 << k) as f64;
            out.push((omega * coord).sin());
            out.push((omega * coord).cos());
        }
    }
    out
}

/// Mean per-pixel Bernoulli log-likelihood of a binary mask under a
/// probability map, with probabilities clamped to [eps, 1-eps]. The mean
/// (not the sum) keeps log-ratios O(1) at any resolution.
pub fn log_likelihood(tape: &mut Tape, prob: ValueId, mask: &Mask) -> Result<ValueId> {
    let shape = tape.shape(prob).to_vec();
    if shape.iter().product::<usize>() != mask.data.len() {
        return Err(Error::ShapeMismatch {
            op: "log_likelihood",
            detail: format!("prob {:?} vs mask {}x{}", shape, mask.h, mask.w),
        });
    }
    let y: Vec<f64> = mask.data.iter().map(|&b| b as u8 as f64).collect();
    let y_inv: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let yid = tape.constant(&shape, &y)?;
    let yinv = tape.constant(&shape, &y_inv)?;
    let p = tape.clamp(prob, LOSS_EPS, 1.0 - LOSS_EPS)?;
    let lp = tape.log(p)?;
    let t1 = tape.mul(yid, lp)?;
    let pneg = tape.neg(p)?;
    let one_m = tape.add_scalar(pneg, 1.0)?;
    let l1m = tape.log(one_m)?;
    let t2 = tape.mul(yinv, l1m)?;
    let s = tape.add(t1, t2)?;
    tape.mean(s)
}

/// Scalar form of [`log_likelihood`] for frozen-policy probability maps.
pub fn log_likelihood_value(prob: &[f64], mask: &Mask) -> f64 {
    debug_assert_eq!(prob.len(), mask.data.len());
    let mut acc = 0.0;
    for (&p, &y) in prob.iter().zip(&mask.data) {
        let p = p.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
        acc += if y { p.ln() } else { (1.0 - p).ln() };
    }
    acc / prob.len() as f64
}

/// Tensor wrapper for an image constant; used by tests driving the raw ops.
pub fn image_tensor(image: &Image) -> Tensor {
    Tensor::new(vec![1, 1, image.h, image.w], image.data.clone()).expect("image consistent")
}
