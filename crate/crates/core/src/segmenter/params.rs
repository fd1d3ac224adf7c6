//! Policy parameters: encoder conv stack, prompt projections, decoder.

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seeding::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterConfig {
    /// Embedding width d; must be divisible by 4 (positional encoding banks).
    pub embed_dim: usize,
    /// Intermediate channel count of encoder/decoder stacks.
    pub mid_dim: usize,
    pub text_dim: usize,
    /// Feed the previous probability map back through strided convolutions.
    /// Off by default; the recurrence is exercised by tests but not training.
    pub use_prev_mask: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            embed_dim: 32,
            mid_dim: 16,
            text_dim: 16,
            use_prev_mask: false,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim must be a positive multiple of 4, got {}",
                self.embed_dim
            )));
        }
        if self.mid_dim == 0 || self.text_dim == 0 {
            return Err(Error::InvalidConfig("mid_dim and text_dim must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Prompt,
    Decoder,
}

#[derive(Debug, Clone)]
pub struct BlockDesc {
    pub name: &'static str,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    /// Fan-in for the init scale; 0 marks zero-initialized blocks (biases).
    fan_in: usize,
}

// Fixed block order; checkpoints and optimizer state rely on it.
pub mod idx {
    pub const ENC1_W: usize = 0;
    pub const ENC1_B: usize = 1;
    pub const ENC2_W: usize = 2;
    pub const ENC2_B: usize = 3;
    pub const ENC3_W: usize = 4;
    pub const ENC3_B: usize = 5;
    pub const BOX_W: usize = 6;
    pub const BOX_B: usize = 7;
    pub const POINT_W: usize = 8;
    pub const POINT_B: usize = 9;
    pub const TEXT_W: usize = 10;
    pub const TEXT_B: usize = 11;
    pub const TYPE_BOX: usize = 12;
    pub const TYPE_POINT: usize = 13;
    pub const DEC1_W: usize = 14;
    pub const DEC1_B: usize = 15;
    pub const DEC2_W: usize = 16;
    pub const DEC2_B: usize = 17;
    pub const DEC3_W: usize = 18;
    pub const DEC3_B: usize = 19;
    pub const FB1_W: usize = 20;
    pub const FB1_B: usize = 21;
    pub const FB2_W: usize = 22;
    pub const FB2_B: usize = 23;
    pub const COUNT: usize = 24;
}

pub fn block_descs(cfg: &SegmenterConfig) -> Vec<BlockDesc> {
    use ParamGroup::*;
    let d = cfg.embed_dim;
    let m = cfg.mid_dim;
    let t = cfg.text_dim;
    let conv = |name, group, cout: usize, cin: usize| BlockDesc {
        name,
        group,
        shape: vec![cout, cin, 3, 3],
        fan_in: cin * 9,
    };
    let bias = |name, group, n: usize| BlockDesc { name, group, shape: vec![n], fan_in: 0 };
    let lin = |name, group, out: usize, inp: usize| BlockDesc {
        name,
        group,
        shape: vec![out, inp],
        fan_in: inp,
    };
    let vec_d = |name, group| BlockDesc { name, group, shape: vec![d], fan_in: d };
    vec![
        conv("enc1.w", Encoder, m, 1),
        bias("enc1.b", Encoder, m),
        conv("enc2.w", Encoder, d, m),
        bias("enc2.b", Encoder, d),
        conv("enc3.w", Encoder, d, d),
        bias("enc3.b", Encoder, d),
        lin("prompt.box.w", Prompt, d, 2 * d),
        bias("prompt.box.b", Prompt, d),
        lin("prompt.point.w", Prompt, d, d),
        bias("prompt.point.b", Prompt, d),
        lin("prompt.text.w", Prompt, d, t),
        bias("prompt.text.b", Prompt, d),
        vec_d("prompt.type_box", Prompt),
        vec_d("prompt.type_point", Prompt),
        conv("dec1.w", Decoder, d, d),
        bias("dec1.b", Decoder, d),
        conv("dec2.w", Decoder, m, d),
        bias("dec2.b", Decoder, m),
        conv("dec3.w", Decoder, 1, m),
        bias("dec3.b", Decoder, 1),
        conv("fb1.w", Decoder, m, 1),
        bias("fb1.b", Decoder, m),
        conv("fb2.w", Decoder, d, m),
        bias("fb2.b", Decoder, d),
    ]
}

/// A full set of segmenter parameters. Instances play both the frozen
/// reference role and the trainable policy role.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub cfg: SegmenterConfig,
    blocks: Vec<Tensor>,
    pub frozen: bool,
}

impl PolicyParams {
    /// Seeded init: weights centered-uniform scaled by fan-in, biases zero.
    pub fn init(cfg: SegmenterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let blocks = block_descs(&cfg)
            .iter()
            .map(|desc| {
                let numel: usize = desc.shape.iter().product();
                let data = if desc.fan_in == 0 {
                    vec![0.0; numel]
                } else {
                    let a = (1.0 / desc.fan_in as f64).sqrt();
                    let mut rng = rng_for(seed, "param-init", &[fnv_name(desc.name)]);
                    (0..numel).map(|_| rng.random_range(-a..a)).collect()
                };
                Tensor::new(desc.shape.clone(), data).expect("desc shape consistent")
            })
            .collect();
        Ok(PolicyParams { cfg, blocks, frozen: false })
    }

    pub fn from_blocks(cfg: SegmenterConfig, blocks: Vec<Tensor>, frozen: bool) -> Result<Self> {
        cfg.validate()?;
        let descs = block_descs(&cfg);
        if blocks.len() != descs.len() {
            return Err(Error::InvalidConfig(format!(
                "{} parameter blocks, expected {}",
                blocks.len(),
                descs.len()
            )));
        }
        for (t, desc) in blocks.iter().zip(&descs) {
            if t.shape() != desc.shape.as_slice() {
                return Err(Error::InvalidConfig(format!(
                    "block '{}': shape {:?}, expected {:?}",
                    desc.name,
                    t.shape(),
                    desc.shape
                )));
            }
        }
        Ok(PolicyParams { cfg, blocks, frozen })
    }

    pub fn descs(&self) -> Vec<BlockDesc> {
        block_descs(&self.cfg)
    }

    pub fn blocks(&self) -> &[Tensor] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &Tensor {
        &self.blocks[i]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.blocks[i]
    }

    pub fn frozen_copy(&self) -> PolicyParams {
        let mut c = self.clone();
        c.frozen = true;
        c
    }

    pub fn trainable_copy(&self) -> PolicyParams {
        let mut c = self.clone();
        c.frozen = false;
        c
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(Tensor::is_finite)
    }

    /// Bitwise equality of one parameter group between two policies.
    pub fn group_bits_equal(&self, other: &PolicyParams, group: ParamGroup) -> bool {
        let descs = self.descs();
        descs.iter().enumerate().all(|(i, d)| {
            d.group != group
                || self.blocks[i]
                    .data()
                    .iter()
                    .zip(other.blocks[i].data())
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }
}

fn fnv_name(name: &str) -> u64 {
    crate::seeding::derive_seed(0, name, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_indices_line_up() {
        let descs = block_descs(&SegmenterConfig::default());
        assert_eq!(descs.len(), idx::COUNT);
        assert_eq!(descs[idx::ENC1_W].name, "enc1.w");
        assert_eq!(descs[idx::TYPE_POINT].name, "prompt.type_point");
        assert_eq!(descs[idx::DEC3_W].name, "dec3.w");
        assert_eq!(descs[idx::FB2_B].name, "fb2.b");
    }

    #[test]
    fn init_is_seeded_and_deterministic() {
        let a = PolicyParams::init(SegmenterConfig::default(), 3).unwrap();
        let b = PolicyParams::init(SegmenterConfig::default(), 3).unwrap();
        let c = PolicyParams::init(SegmenterConfig::default(), 4).unwrap();
        for i in 0..idx::COUNT {
            assert_eq!(a.block(i).data(), b.block(i).data());
        }
        assert_ne!(a.block(idx::ENC1_W).data(), c.block(idx::ENC1_W).data());
        // biases start at zero
        assert!(a.block(idx::ENC1_B).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_embed_dim() {
        let cfg = SegmenterConfig { embed_dim: 30, ..Default::default() };
        assert!(PolicyParams::init(cfg, 0).is_err());
    }
}
