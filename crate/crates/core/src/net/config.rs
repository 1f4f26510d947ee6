use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Decoder skip topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SkipMode {
    /// Symmetric U-Net skips: decoder level j sees encoder level j only.
    Plain,
    /// Full-scale skips restricted to the same encoder level and the adjacent
    /// decoder levels that exist under a single top-down pass.
    FullScaleNeighbor,
    /// Full-scale skips from every encoder level 1..=j and decoder level j+1..=M.
    FullScaleAll,
}

impl SkipMode {
    pub fn is_full_scale(self) -> bool {
        !matches!(self, SkipMode::Plain)
    }
}

impl fmt::Display for SkipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipMode::Plain => "plain",
            SkipMode::FullScaleNeighbor => "fullscale_neighbor",
            SkipMode::FullScaleAll => "fullscale_all",
        })
    }
}

impl FromStr for SkipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(SkipMode::Plain),
            "fullscale_neighbor" => Ok(SkipMode::FullScaleNeighbor),
            "fullscale_all" => Ok(SkipMode::FullScaleAll),
            other => Err(Error::Config(format!(
                "unknown skip mode {other:?} (plain | fullscale_neighbor | fullscale_all)"
            ))),
        }
    }
}

/// Which half of the network a skip source comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Encoder,
    Decoder,
}

/// How a skip source is brought to the target level before concatenation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    /// Passed through unchanged (plain-mode encoder skip).
    Identity,
    /// Same resolution, K x K conv.
    Conv,
    /// Bilinear upsampling by the factor, then conv.
    UpsampleConv(usize),
    /// Max-pool by the factor, then conv.
    DownsampleConv(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SkipSource {
    pub level: usize,
    pub origin: Origin,
    pub transform: Transform,
}

/// Inputs aggregated at one decoder level, in concatenation order:
/// encoder sources by ascending level, then decoder sources by descending level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkipSpec {
    pub target_level: usize,
    pub sources: Vec<SkipSource>,
}

/// Architecture hyper-parameters. Fully determines the parameter set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of encoder levels M.
    pub depth: usize,
    pub base_channels: usize,
    /// Kernel size used by encoder, skip-branch and fusion convs (odd).
    pub kernel_size: usize,
    pub skip_mode: SkipMode,
    pub gates: bool,
    /// Width every full-scale skip branch is projected to.
    pub skip_branch_channels: usize,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            base_channels: 32,
            kernel_size: 3,
            skip_mode: SkipMode::FullScaleNeighbor,
            gates: true,
            skip_branch_channels: 64,
            num_classes: 7,
            input_channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth < 2 {
            return fail(format!("depth must be >= 2, got {}", self.depth));
        }
        if self.depth > 16 {
            return fail(format!("depth {} is unreasonably large", self.depth));
        }
        if self.kernel_size % 2 == 0 {
            return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.base_channels == 0 || self.input_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return fail(format!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        if self.skip_branch_channels < 2 {
            return fail(format!(
                "skip_branch_channels must be >= 2, got {}",
                self.skip_branch_channels
            ));
        }
        Ok(())
    }

    /// Checks that an `h x w` input survives `depth - 1` halvings exactly.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << (self.depth - 1);
        if h < f || w < f {
            return Err(Error::Config(format!(
                "depth {} needs inputs of at least {f}x{f}; {h}x{w} would reach zero extent",
                self.depth
            )));
        }
        if h % f != 0 || w % f != 0 {
            return Err(Error::dim(
                "encode",
                format!("{h}x{w} input not divisible by 2^(depth-1) = {f}"),
            ));
        }
        Ok(())
    }

    /// Output channels of encoder level `i` (1-based): `base * 2^i`.
    pub fn encoder_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Output channels of decoder level `j`. The deepest level is the encoder bottleneck.
    pub fn decoder_channels(&self, level: usize) -> usize {
        if level == self.depth || self.skip_mode == SkipMode::Plain {
            self.encoder_channels(level)
        } else {
            self.skip_spec(level).sources.len() * self.skip_branch_channels
        }
    }

    /// Hidden width of every attention gate.
    pub fn gate_inter_channels(&self) -> usize {
        (self.skip_branch_channels / 2).max(1)
    }

    /// Sources feeding decoder level `j` (1 <= j < depth).
    pub fn skip_spec(&self, level: usize) -> SkipSpec {
        let m = self.depth;
        let enc = |l: usize, t| SkipSource {
            level: l,
            origin: Origin::Encoder,
            transform: t,
        };
        let dec = |l: usize| SkipSource {
            level: l,
            origin: Origin::Decoder,
            transform: Transform::UpsampleConv(1 << (l - level)),
        };
        let sources = match self.skip_mode {
            SkipMode::Plain => vec![enc(level, Transform::Identity), dec(level + 1)],
            // The j-1 decoder level is not available during a single
            // top-down pass, leaving the same-level encoder and the level above.
            SkipMode::FullScaleNeighbor => vec![enc(level, Transform::Conv), dec(level + 1)],
            SkipMode::FullScaleAll => (1..=level)
                .map(|l| {
                    let t = if l == level {
                        Transform::Conv
                    } else {
                        Transform::DownsampleConv(1 << (level - l))
                    };
                    enc(l, t)
                })
                .chain((level + 1..=m).rev().map(dec))
                .collect(),
        };
        SkipSpec {
            target_level: level,
            sources,
        }
    }
}
