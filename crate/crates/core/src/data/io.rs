use std::fs;
use std::path::{Path, PathBuf};

use super::{Sample, SampleMeta, Split, Splits, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_MAGIC: [u8; 4] = *b"FHSS";
pub const SAMPLE_VERSION: u32 = 1;

const HEADER: usize = 4 + 4 * 4;

/// Serializes `magic | version | H | W | classes` (u32 LE), the `3*H*W`
/// image as f64 LE, then the `H*W` mask bytes.
pub fn encode_sample(s: &Sample) -> Vec<u8> {
    let (h, w) = (s.height(), s.width());
    let mut buf = Vec::with_capacity(HEADER + 8 * s.image.numel() + s.mask.len());
    buf.extend_from_slice(&SAMPLE_MAGIC);
    for v in [SAMPLE_VERSION, h as u32, w as u32, NUM_CLASSES as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in s.image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&s.mask);
    buf
}

pub fn decode_sample(bytes: &[u8], what: &str) -> Result<Sample> {
    let bad = |m: String| Error::Data(format!("{what}: {m}"));
    if bytes.len() < HEADER {
        return Err(bad("truncated header".into()));
    }
    if bytes[..4] != SAMPLE_MAGIC {
        return Err(bad("not a sample file (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, h, w, classes) = (word(0), word(1) as usize, word(2) as usize, word(3));
    if version != SAMPLE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if classes as usize != NUM_CLASSES {
        return Err(bad(format!("expected {NUM_CLASSES} classes, header says {classes}")));
    }
    let n = h * w;
    if bytes.len() != HEADER + 8 * 3 * n + n {
        return Err(bad(format!("size {} does not match a {h}x{w} sample", bytes.len())));
    }
    let img: Vec<f64> = bytes[HEADER..HEADER + 24 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mask = bytes[HEADER + 24 * n..].to_vec();
    if let Some(b) = mask.iter().find(|&&m| m as usize >= NUM_CLASSES) {
        return Err(bad(format!("class id {b} out of range")));
    }
    Ok(Sample {
        image: Tensor::new([3, h, w], img)?,
        mask,
        meta: SampleMeta {
            seed: 0,
            variant: None,
            vessels: Vec::new(),
            hyaline: false,
            origin: (0, 0),
        },
    })
}

pub fn write_sample(path: &Path, s: &Sample) -> Result<()> {
    fs::write(path, encode_sample(s)).map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: &Path) -> Result<Sample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sample(&bytes, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory.
    pub file: String,
    pub seed: u64,
    pub split: Split,
}

/// One `file<TAB>seed<TAB>split` line per entry.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        s.push_str(&format!("{}\t{}\t{}\n", e.file, e.seed, e.split.name()));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |m: &str| Error::Data(format!("{}:{}: {m}", path.display(), i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad("expected file, seed and split separated by tabs"));
            }
            Ok(ManifestEntry {
                file: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad("seed is not an integer"))?,
                split: Split::parse(f[2]).map_err(|_| bad("unknown split"))?,
            })
        })
        .collect()
}

/// Writes `split<TAB>count<TAB>comma-separated indices` for each split.
pub fn write_split_file(path: &Path, splits: &Splits) -> Result<()> {
    let mut s = String::new();
    for sp in Split::ALL {
        let idx = splits.get(sp);
        let list: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
        s.push_str(&format!("{}\t{}\t{}\n", sp.name(), idx.len(), list.join(",")));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn resolve(manifest: &Path, file: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(file)
}

/// Reads every sample of `split` listed in the manifest, in manifest order.
pub fn load_split(manifest: &Path, split: Split) -> Result<Vec<Sample>> {
    let entries = read_manifest(manifest)?;
    let mut out = Vec::new();
    for e in entries.iter().filter(|e| e.split == split) {
        let mut s = read_sample(&resolve(manifest, &e.file))?;
        s.meta.seed = e.seed;
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "{} lists no {} samples",
            manifest.display(),
            split.name()
        )));
    }
    Ok(out)
}
