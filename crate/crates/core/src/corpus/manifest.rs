//! Plain-text manifest: key-value header, per-class stub vectors, and a
//! row table of sample files. Floats use Rust's shortest round-trip form,
//! so write → parse reproduces values bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::corpus::gen::record_from_bytes;
use crate::corpus::pgm::read_pgm;
use crate::corpus::{Dataset, Split};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";
const FORMAT_LINE: &str = "format prefseg-corpus v1";

#[derive(Debug, Clone)]
pub struct SampleFiles {
    pub image: String,
    pub mask: String,
    pub heatmap: String,
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: u64,
    pub class_id: usize,
    pub split: Split,
    pub files: SampleFiles,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub blur_radius: usize,
    pub noise_level: f64,
    pub stub_dim: usize,
    pub class_stubs: Vec<Vec<f64>>,
    pub entries: Vec<ManifestEntry>,
    /// Directory holding the manifest; file paths are relative to it.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_NAME)
    }

    pub fn split_count(&self, s: Split) -> usize {
        self.entries.iter().filter(|e| e.split == s).count()
    }
}

pub fn write_manifest(m: &DatasetManifest) -> Result<()> {
    let mut out = String::new();
    out.push_str(FORMAT_LINE);
    out.push('\n');
    let _ = writeln!(out, "seed {}", m.seed);
    let _ = writeln!(out, "n {}", m.n);
    let _ = writeln!(out, "height {}", m.height);
    let _ = writeln!(out, "width {}", m.width);
    let _ = writeln!(out, "classes {}", m.class_count);
    let _ = writeln!(out, "blur_radius {}", m.blur_radius);
    let _ = writeln!(out, "noise_level {}", m.noise_level);
    let _ = writeln!(out, "stub_dim {}", m.stub_dim);
    for s in Split::ALL {
        let _ = writeln!(out, "count {} {}", s, m.split_count(s));
    }
    for (k, stub) in m.class_stubs.iter().enumerate() {
        let _ = write!(out, "stub {}", k);
        for v in stub {
            let _ = write!(out, " {}", v);
        }
        out.push('\n');
    }
    out.push_str("samples\n");
    for e in &m.entries {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            e.id, e.split, e.class_id, e.files.image, e.files.mask, e.files.heatmap
        );
    }
    out.push_str("end\n");
    let path = m.manifest_path();
    fs::write(&path, out).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(manifest_path: &Path) -> Result<DatasetManifest> {
    let bad = |detail: String| Error::InvalidManifest {
        path: manifest_path.to_path_buf(),
        detail,
    };
    let text = match fs::read_to_string(manifest_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile { path: manifest_path.to_path_buf() })
        }
        Err(e) => return Err(Error::io(manifest_path, e)),
    };
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut lines = text.lines();
    if lines.next() != Some(FORMAT_LINE) {
        return Err(bad("unrecognized format line".into()));
    }
    let mut seed = None;
    let mut n = None;
    let mut height = None;
    let mut width = None;
    let mut classes = None;
    let mut blur_radius = 0usize;
    let mut noise_level = 0.0f64;
    let mut stub_dim = None;
    let mut class_stubs: Vec<Vec<f64>> = Vec::new();
    let mut entries = Vec::new();
    let mut in_samples = false;
    let mut saw_end = false;

    for line in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if !in_samples {
            let mut it = line.split_whitespace();
            let key = it.next().ok_or_else(|| bad("empty line token".into()))?;
            match key {
                "samples" => in_samples = true,
                "seed" => seed = Some(parse_field(&mut it, "seed", &bad)?),
                "n" => n = Some(parse_field(&mut it, "n", &bad)?),
                "height" => height = Some(parse_field(&mut it, "height", &bad)?),
                "width" => width = Some(parse_field(&mut it, "width", &bad)?),
                "classes" => classes = Some(parse_field(&mut it, "classes", &bad)?),
                "blur_radius" => blur_radius = parse_field(&mut it, "blur_radius", &bad)?,
                "noise_level" => noise_level = parse_field(&mut it, "noise_level", &bad)?,
                "stub_dim" => stub_dim = Some(parse_field(&mut it, "stub_dim", &bad)?),
                "count" => { /* informational; recomputed from rows */ }
                "stub" => {
                    let idx: usize = parse_field(&mut it, "stub index", &bad)?;
                    if idx != class_stubs.len() {
                        return Err(bad(format!("stub {} out of order", idx)));
                    }
                    let vals: std::result::Result<Vec<f64>, _> =
                        it.map(str::parse::<f64>).collect();
                    class_stubs.push(vals.map_err(|e| bad(format!("stub {}: {}", idx, e)))?);
                }
                other => return Err(bad(format!("unknown key '{}'", other))),
            }
        } else {
            if line == "end" {
                saw_end = true;
                break;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 6 {
                return Err(bad(format!("sample row needs 6 fields: '{}'", line)));
            }
            entries.push(ManifestEntry {
                id: parts[0].parse().map_err(|e| bad(format!("id: {}", e)))?,
                split: Split::parse(parts[1]).ok_or_else(|| bad(format!("split '{}'", parts[1])))?,
                class_id: parts[2].parse().map_err(|e| bad(format!("class: {}", e)))?,
                files: SampleFiles {
                    image: parts[3].to_string(),
                    mask: parts[4].to_string(),
                    heatmap: parts[5].to_string(),
                },
            });
        }
    }
    if !saw_end {
        return Err(bad("missing 'end' terminator".into()));
    }
    let m = DatasetManifest {
        seed: seed.ok_or_else(|| bad("missing seed".into()))?,
        n: n.ok_or_else(|| bad("missing n".into()))?,
        height: height.ok_or_else(|| bad("missing height".into()))?,
        width: width.ok_or_else(|| bad("missing width".into()))?,
        class_count: classes.ok_or_else(|| bad("missing classes".into()))?,
        blur_radius,
        noise_level,
        stub_dim: stub_dim.ok_or_else(|| bad("missing stub_dim".into()))?,
        class_stubs,
        entries,
        root,
    };
    if m.class_stubs.len() != m.class_count {
        return Err(bad(format!(
            "{} stub rows for {} classes",
            m.class_stubs.len(),
            m.class_count
        )));
    }
    if m.entries.len() != m.n {
        return Err(bad(format!("{} sample rows, n = {}", m.entries.len(), m.n)));
    }
    Ok(m)
}

fn parse_field<'a, T: std::str::FromStr>(
    it: &mut impl Iterator<Item = &'a str>,
    name: &str,
    bad: &impl Fn(String) -> Error,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    it.next()
        .ok_or_else(|| bad(format!("missing value for {}", name)))?
        .parse()
        .map_err(|e| bad(format!("{}: {}", name, e)))
}

/// Load every sample referenced by the manifest. Round-trips the arrays of
/// a generated corpus bit-exactly.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = load_manifest(manifest_path)?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        if entry.class_id >= manifest.class_count {
            return Err(Error::InvalidManifest {
                path: manifest_path.to_path_buf(),
                detail: format!("sample {} class {} out of range", entry.id, entry.class_id),
            });
        }
        let read_checked = |rel: &str| -> Result<Vec<u8>> {
            let path = manifest.root.join(rel);
            let pgm = read_pgm(&path)?;
            if pgm.h != manifest.height || pgm.w != manifest.width {
                return Err(Error::DimensionMismatch {
                    path,
                    expected: format!("{}x{}", manifest.height, manifest.width),
                    got: format!("{}x{}", pgm.h, pgm.w),
                });
            }
            Ok(pgm.bytes)
        };
        let image = read_checked(&entry.files.image)?;
        let mask = read_checked(&entry.files.mask)?;
        if let Some(b) = mask.iter().find(|&&b| b != 0 && b != 255) {
            return Err(Error::CorruptPayload {
                path: manifest.root.join(&entry.files.mask),
                detail: format!("mask byte {} is neither 0 nor 255", b),
            });
        }
        let heatmap = read_checked(&entry.files.heatmap)?;
        samples.push(record_from_bytes(&manifest, entry, image, mask, heatmap));
    }
    Ok(Dataset { manifest, samples })
}

/// SHA-256 over the manifest bytes and every referenced file, in manifest
/// order. Identical corpora hash identically byte-for-byte.
pub fn corpus_hash(manifest_path: &Path) -> Result<String> {
    let manifest = load_manifest(manifest_path)?;
    let mut hasher = Sha256::new();
    let manifest_bytes =
        fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    hasher.update(&manifest_bytes);
    for entry in &manifest.entries {
        for rel in [&entry.files.image, &entry.files.mask, &entry.files.heatmap] {
            let p = manifest.root.join(rel);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            hasher.update(&bytes);
        }
    }
    Ok(format!("{:x}", hasher.finalize()))
}
