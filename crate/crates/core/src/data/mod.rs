//! Procedural vessel cross-sections standing in for the private slide data,
//! with flips and color jitter, grid patching and seeded splits.

mod augment;
mod io;
mod synth;

pub use augment::{augment, flip_horizontal, flip_vertical};
pub use io::{
    decode_sample, encode_sample, load_split, read_manifest, read_sample, write_manifest,
    write_sample, write_split_file,
    ManifestEntry, SAMPLE_MAGIC, SAMPLE_VERSION,
};
pub use synth::{generate_sample, GeneratorSpec, Ring, Variant, Vessel};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const LUMEN: u8 = 1;
pub const INTIMA: u8 = 2;
pub const MEDIA: u8 = 3;
pub const ARTERY: u8 = 4;
pub const ARTERY_WALL: u8 = 5;
pub const HYALINE: u8 = 6;
pub const NUM_CLASSES: usize = 7;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "lumen",
    "intima",
    "media",
    "artery",
    "artery_wall",
    "hyaline",
];

/// Provenance of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub seed: u64,
    /// Absent for samples read back from disk.
    pub variant: Option<Variant>,
    pub vessels: Vec<Vessel>,
    pub hyaline: bool,
    /// Top-left corner of this crop within the generated canvas.
    pub origin: (usize, usize),
}

/// RGB image in `[0,1]` with one class id per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`.
    pub image: Tensor,
    /// Row-major `H * W` class ids.
    pub mask: Vec<u8>,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn class_histogram(&self) -> [u64; NUM_CLASSES] {
        let mut h = [0u64; NUM_CLASSES];
        for &m in &self.mask {
            h[m as usize] += 1;
        }
        h
    }
}

/// Stacks samples of equal size into `[B,3,H,W]` images and a flat mask.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut mask = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.height() != h || s.width() != w {
            return Err(Error::dim(
                "stack",
                format!("{}x{} sample in a {h}x{w} batch", s.height(), s.width()),
            ));
        }
        data.extend_from_slice(s.image.data());
        mask.extend_from_slice(&s.mask);
    }
    Ok((Tensor::new([samples.len(), 3, h, w], data)?, mask))
}

/// Non-overlapping `patch x patch` crops in row-major grid order.
pub fn patchify(sample: &Sample, patch: usize) -> Result<Vec<Sample>> {
    let (h, w) = (sample.height(), sample.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(
            "patchify",
            format!("patch {patch} does not tile a {h}x{w} canvas"),
        ));
    }
    let mut out = Vec::with_capacity((h / patch) * (w / patch));
    for py in (0..h).step_by(patch) {
        for px in (0..w).step_by(patch) {
            let mut img = Vec::with_capacity(3 * patch * patch);
            for c in 0..3 {
                for y in py..py + patch {
                    let row = (c * h + y) * w;
                    img.extend_from_slice(&sample.image.data()[row + px..row + px + patch]);
                }
            }
            let mut mask = Vec::with_capacity(patch * patch);
            for y in py..py + patch {
                mask.extend_from_slice(&sample.mask[y * w + px..y * w + px + patch]);
            }
            let mut meta = sample.meta.clone();
            meta.origin = (sample.meta.origin.0 + py, sample.meta.origin.1 + px);
            out.push(Sample {
                image: Tensor::new([3, patch, patch], img)?,
                mask,
                meta,
            });
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`] for a `rows x cols` grid.
pub fn unpatchify(patches: &[Sample], rows: usize, cols: usize) -> Result<Sample> {
    if patches.len() != rows * cols || patches.is_empty() {
        return Err(Error::Contract(format!(
            "{} patches cannot fill a {rows}x{cols} grid",
            patches.len()
        )));
    }
    let p = patches[0].height();
    let (h, w) = (rows * p, cols * p);
    let mut img = vec![0.0; 3 * h * w];
    let mut mask = vec![0u8; h * w];
    for (i, s) in patches.iter().enumerate() {
        let (py, px) = ((i / cols) * p, (i % cols) * p);
        for y in 0..p {
            for x in 0..p {
                mask[(py + y) * w + px + x] = s.mask[y * p + x];
                for c in 0..3 {
                    img[(c * h + py + y) * w + px + x] = s.image.data()[(c * p + y) * p + x];
                }
            }
        }
    }
    let mut meta = patches[0].meta.clone();
    meta.origin = (0, 0);
    Ok(Sample {
        image: Tensor::new([3, h, w], img)?,
        mask,
        meta,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (train | val | test)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, s: Split) -> &[usize] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Split membership of each index `0..n`.
    pub fn assignment(&self) -> Vec<Split> {
        let n = self.train.len() + self.val.len() + self.test.len();
        let mut a = vec![Split::Train; n];
        for &i in &self.val {
            a[i] = Split::Val;
        }
        for &i in &self.test {
            a[i] = Split::Test;
        }
        a
    }
}

/// Seeded 60/20/20 partition of `0..n`; each part is sorted.
pub fn make_splits(n: usize, seed: u64) -> Result<Splits> {
    if n < 10 {
        return Err(Error::Config(format!("need at least 10 samples to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 3 / 5;
    let n_val = n / 5;
    let part = |r: std::ops::Range<usize>| {
        let mut v = idx[r].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Splits {
        train: part(0..n_train),
        val: part(n_train..n_train + n_val),
        test: part(n_train + n_val..n),
    })
}

/// Derives the seed of the `i`-th item from a base seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, i: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(i.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The first `n` patches of consecutively seeded canvases.
pub fn generate_patches(spec: &GeneratorSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(n);
    let mut k = 0u64;
    while out.len() < n {
        let s = generate_sample(spec, derive_seed(seed, k))?;
        k += 1;
        let ps = if spec.patch == spec.canvas {
            vec![s]
        } else {
            patchify(&s, spec.patch)?
        };
        out.extend(ps.into_iter().take(n - out.len()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let s = make_splits(100, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
        let s = make_splits(10, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        assert!(make_splits(9, 1).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
