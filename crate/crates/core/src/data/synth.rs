use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    Sample, SampleMeta, ARTERY, ARTERY_WALL, BACKGROUND, HYALINE, INTIMA, LUMEN, MEDIA,
    NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which label granularity a sample is annotated with. Exactly one per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Lumen, intima and media labelled separately.
    Components,
    /// Lumen plus the combined intima and media ring as artery wall.
    Wall,
    /// The whole vessel as artery.
    Artery,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Components, Variant::Wall, Variant::Artery];

    /// Global color offset that makes the annotation variant visible in the image.
    fn tint(self) -> [f64; 3] {
        match self {
            Variant::Components => [0.0, 0.0, 0.0],
            Variant::Wall => [-0.18, 0.0, 0.06],
            Variant::Artery => [0.0, -0.18, 0.06],
        }
    }
}

/// Tissue ring a point falls into, before labelling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ring {
    Outside,
    Lumen,
    Intima,
    Media,
}

/// One vessel: three nested boundaries sharing an irregular star-shaped profile.
#[derive(Clone, Debug, PartialEq)]
pub struct Vessel {
    pub center: (f64, f64),
    /// Lumen, intima-outer and media-outer radii, strictly increasing.
    pub radii: [f64; 3],
    pub aspect: f64,
    pub angle: f64,
    /// `(amplitude, phase)` of the 2nd and 3rd angular harmonics.
    pub harmonics: [(f64, f64); 2],
}

impl Vessel {
    /// Normalized radial coordinate of `(y, x)`, in units of the profile.
    fn rho(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = (-s * dx + c * dy) / self.aspect;
        let theta = v.atan2(u);
        let profile = 1.0
            + self.harmonics[0].0 * (2.0 * theta + self.harmonics[0].1).cos()
            + self.harmonics[1].0 * (3.0 * theta + self.harmonics[1].1).cos();
        (u * u + v * v).sqrt() / profile
    }

    pub fn ring_at(&self, y: f64, x: f64) -> Ring {
        let r = self.rho(y, x);
        if r < self.radii[0] {
            Ring::Lumen
        } else if r < self.radii[1] {
            Ring::Intima
        } else if r < self.radii[2] {
            Ring::Media
        } else {
            Ring::Outside
        }
    }

    /// Upper bound of the vessel's extent from its center.
    pub fn extent(&self) -> f64 {
        let h = 1.0 + self.harmonics[0].0 + self.harmonics[1].0;
        self.radii[2] * h * self.aspect.max(1.0)
    }
}

/// Generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub canvas: usize,
    /// Crop size produced by the patching step.
    pub patch: usize,
    pub vessels_min: usize,
    pub vessels_max: usize,
    pub lumen_radius: (f64, f64),
    pub intima_thickness: (f64, f64),
    pub media_thickness: (f64, f64),
    pub hyaline_prob: f64,
    pub noise: f64,
    /// RGB per class id; the artery and wall classes reuse tissue colors.
    pub palette: [[f64; 3]; NUM_CLASSES],
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            canvas: 64,
            patch: 32,
            vessels_min: 1,
            vessels_max: 2,
            lumen_radius: (3.0, 7.0),
            intima_thickness: (2.0, 4.0),
            media_thickness: (3.0, 6.0),
            hyaline_prob: 0.25,
            noise: 0.04,
            palette: [
                [0.92, 0.84, 0.88],
                [0.97, 0.93, 0.95],
                [0.78, 0.50, 0.66],
                [0.58, 0.26, 0.46],
                [0.0, 0.0, 0.0],
                [0.0, 0.0, 0.0],
                [0.96, 0.66, 0.80],
            ],
        }
    }
}

impl GeneratorSpec {
    fn max_extent(&self) -> f64 {
        // harmonics are capped at 0.08 + 0.05, aspect at 1.25
        (self.lumen_radius.1 + self.intima_thickness.1 + self.media_thickness.1) * 1.13 * 1.25
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !range_ok(self.lumen_radius)
            || !range_ok(self.intima_thickness)
            || !range_ok(self.media_thickness)
        {
            return fail("radius ranges must satisfy 0 < lo <= hi".into());
        }
        if self.vessels_min == 0 || self.vessels_min > self.vessels_max {
            return fail(format!(
                "vessel count range {}..={} is invalid",
                self.vessels_min, self.vessels_max
            ));
        }
        if !(0.0..=1.0).contains(&self.hyaline_prob) {
            return fail(format!("hyaline_prob {} outside [0, 1]", self.hyaline_prob));
        }
        if !(self.noise >= 0.0) {
            return fail(format!("noise {} must be non-negative", self.noise));
        }
        if self.patch == 0 || self.canvas % self.patch != 0 {
            return fail(format!("patch {} does not tile canvas {}", self.patch, self.canvas));
        }
        let need = 2.0 * self.max_extent() + 2.0;
        if (self.canvas as f64) < need {
            return fail(format!(
                "canvas {} too small for the largest vessel (needs {})",
                self.canvas,
                need.ceil()
            ));
        }
        Ok(())
    }
}

fn draw_vessel(spec: &GeneratorSpec, rng: &mut ChaCha8Rng, placed: &[Vessel]) -> Option<Vessel> {
    let lumen = rng.random_range(spec.lumen_radius.0..=spec.lumen_radius.1);
    let intima = lumen + rng.random_range(spec.intima_thickness.0..=spec.intima_thickness.1);
    let media = intima + rng.random_range(spec.media_thickness.0..=spec.media_thickness.1);
    let mut v = Vessel {
        center: (0.0, 0.0),
        radii: [lumen, intima, media],
        aspect: rng.random_range(0.8..=1.25),
        angle: rng.random_range(0.0..PI),
        harmonics: [
            (rng.random_range(0.0..=0.08), rng.random_range(0.0..2.0 * PI)),
            (rng.random_range(0.0..=0.05), rng.random_range(0.0..2.0 * PI)),
        ],
    };
    let ext = v.extent();
    let span = spec.canvas as f64 - 1.0 - ext;
    for _ in 0..64 {
        let c = (rng.random_range(ext..=span), rng.random_range(ext..=span));
        let clear = placed.iter().all(|o| {
            let d = ((c.0 - o.center.0).powi(2) + (c.1 - o.center.1).powi(2)).sqrt();
            d > ext + o.extent() + 1.0
        });
        if clear {
            v.center = c;
            return Some(v);
        }
    }
    None
}

/// Draws one canvas-sized sample; a pure function of `(spec, seed)`.
pub fn generate_sample(spec: &GeneratorSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.canvas;
    let variant = Variant::ALL[rng.random_range(0..3)];
    let count = rng.random_range(spec.vessels_min..=spec.vessels_max);
    let mut vessels = Vec::with_capacity(count);
    for _ in 0..count {
        if let Some(v) = draw_vessel(spec, &mut rng, &vessels) {
            vessels.push(v);
        }
    }

    let mut rings = vec![(Ring::Outside, usize::MAX); n * n];
    for (vi, v) in vessels.iter().enumerate() {
        for y in 0..n {
            for x in 0..n {
                let r = v.ring_at(y as f64 + 0.5, x as f64 + 0.5);
                if r != Ring::Outside {
                    rings[y * n + x] = (r, vi);
                }
            }
        }
    }

    let mut mask: Vec<u8> = rings
        .iter()
        .map(|&(r, _)| match (r, variant) {
            (Ring::Outside, _) => BACKGROUND,
            (_, Variant::Artery) => ARTERY,
            (Ring::Lumen, _) => LUMEN,
            (_, Variant::Wall) => ARTERY_WALL,
            (Ring::Intima, _) => INTIMA,
            (Ring::Media, _) => MEDIA,
        })
        .collect();

    // Hyaline: a small blob centered in the wall of one vessel, clipped to the wall rings.
    let hyaline = !vessels.is_empty() && rng.random_bool(spec.hyaline_prob);
    let mut blob = vec![false; n * n];
    if hyaline {
        let vi = rng.random_range(0..vessels.len());
        let v = &vessels[vi];
        let theta: f64 = rng.random_range(0.0..2.0 * PI);
        let mid = 0.5 * (v.radii[0] + v.radii[2]);
        let (cy, cx) = (v.center.0 + mid * theta.sin(), v.center.1 + mid * theta.cos());
        let br = rng.random_range(1.5..=2.5);
        for y in 0..n {
            for x in 0..n {
                let (fy, fx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let (ring, owner) = rings[y * n + x];
                if fy * fy + fx * fx < br * br
                    && owner == vi
                    && matches!(ring, Ring::Intima | Ring::Media)
                {
                    blob[y * n + x] = true;
                    mask[y * n + x] = HYALINE;
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise.max(1e-12))
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    let tint = variant.tint();
    let mut img = vec![0.0; 3 * n * n];
    for p in 0..n * n {
        let (ring, _) = rings[p];
        let base = if blob[p] {
            spec.palette[HYALINE as usize]
        } else {
            match ring {
                Ring::Outside => spec.palette[BACKGROUND as usize],
                Ring::Lumen => spec.palette[LUMEN as usize],
                Ring::Intima => spec.palette[INTIMA as usize],
                Ring::Media => spec.palette[MEDIA as usize],
            }
        };
        for c in 0..3 {
            let e = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            img[c * n * n + p] = (base[c] + tint[c] + e).clamp(0.0, 1.0);
        }
    }

    Ok(Sample {
        image: Tensor::new([3, n, n], img)?,
        mask,
        meta: SampleMeta {
            seed,
            variant: Some(variant),
            vessels,
            hyaline: blob.iter().any(|&b| b),
            origin: (0, 0),
        },
    })
}
