//! Versioned binary checkpoint for policy parameters. Little-endian f64
//! payload; save -> load round-trips bit-exactly.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::segmenter::params::{PolicyParams, SegmenterConfig};

const MAGIC: &[u8; 8] = b"PSEGCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(policy: &PolicyParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(policy.frozen as u8);
    buf.push(policy.cfg.use_prev_mask as u8);
    buf.extend_from_slice(&(policy.cfg.embed_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(policy.cfg.mid_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(policy.cfg.text_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(policy.blocks().len() as u32).to_le_bytes());
    for (tensor, desc) in policy.blocks().iter().zip(policy.descs()) {
        let name = desc.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::BadCheckpoint {
                path: self.path.to_path_buf(),
                detail: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let raw = match fs::read(path) {
        Ok(r) => r,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile { path: path.to_path_buf() })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let bad = |detail: String| Error::BadCheckpoint { path: path.to_path_buf(), detail };
    let mut r = Reader { buf: &raw, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {}", version)));
    }
    let frozen = r.u8()? != 0;
    let use_prev_mask = r.u8()? != 0;
    let cfg = SegmenterConfig {
        embed_dim: r.u32()? as usize,
        mid_dim: r.u32()? as usize,
        text_dim: r.u32()? as usize,
        use_prev_mask,
    };
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let _name = r.take(name_len)?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blocks.push(Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?);
    }
    PolicyParams::from_blocks(cfg, blocks, frozen)
        .map_err(|e| bad(format!("block validation: {}", e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.bin");
        let policy = PolicyParams::init(SegmenterConfig::default(), 11).unwrap();
        save_checkpoint(&policy, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.cfg, policy.cfg);
        assert_eq!(back.frozen, policy.frozen);
        for (a, b) in policy.blocks().iter().zip(back.blocks()) {
            assert_eq!(a.shape(), b.shape());
            let bits_equal = a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(bits_equal);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.bin");
        let policy = PolicyParams::init(SegmenterConfig::default(), 11).unwrap();
        save_checkpoint(&policy, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::BadCheckpoint { .. })));
    }

    #[test]
    fn missing_file_is_distinct() {
        assert!(matches!(
            load_checkpoint(Path::new("/nope/ckpt.bin")),
            Err(Error::MissingFile { .. })
        ));
    }
}
