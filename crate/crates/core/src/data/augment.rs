use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::tensor::Tensor;

fn remap(sample: &Sample, src: impl Fn(usize, usize) -> (usize, usize)) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let d = sample.image.data();
    let mut img = vec![0.0; d.len()];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            mask[y * w + x] = sample.mask[sy * w + sx];
            for c in 0..3 {
                img[(c * h + y) * w + x] = d[(c * h + sy) * w + sx];
            }
        }
    }
    Sample {
        image: Tensor::new([3, h, w], img).expect("same shape"),
        mask,
        meta: sample.meta.clone(),
    }
}

/// Mirrors columns of image and mask.
pub fn flip_horizontal(sample: &Sample) -> Sample {
    let w = sample.width();
    remap(sample, |y, x| (y, w - 1 - x))
}

/// Mirrors rows of image and mask.
pub fn flip_vertical(sample: &Sample) -> Sample {
    let h = sample.height();
    remap(sample, |y, x| (h - 1 - y, x))
}

/// Random flips (p = 0.5 each axis) on image and mask, then per-channel
/// color scale in `[0.9, 1.1]` and shift in `[-0.05, 0.05]` on the image only.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = if rng.random_bool(0.5) {
        flip_horizontal(sample)
    } else {
        sample.clone()
    };
    if rng.random_bool(0.5) {
        s = flip_vertical(&s);
    }
    let plane = s.height() * s.width();
    let jitter: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.9..=1.1), rng.random_range(-0.05..=0.05)))
        .collect();
    for (i, v) in s.image.data_mut().iter_mut().enumerate() {
        let (scale, shift) = jitter[i / plane];
        *v = (*v * scale + shift).clamp(0.0, 1.0);
    }
    s
}
