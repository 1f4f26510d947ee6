use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Tensor, Var};

use super::config::{ModelConfig, Origin, SkipMode, SkipSpec, Transform};
use super::layers::{AttentionGate, BatchNorm, Conv, ConvBnRelu, Ctx, Resampler, BN_MOMENTUM};
use super::params::{Allocator, Bound, ParamStore, StatsId};

/// How the attention gates of a gated model are evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    /// Compute beta from the learned gate parameters.
    Learned,
    /// Replace every beta with a constant map.
    Forced(f64),
    /// Skip the multiplication altogether (the ungated network).
    Bypass,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub train: bool,
    pub gates: GateMode,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            train: true,
            gates: GateMode::Learned,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions {
            train: false,
            gates: GateMode::Learned,
        }
    }
}

/// Residual encoder block: `ReLU(BN(Conv(x)) + shortcut(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub level: usize,
    pub conv: Conv,
    pub bn: BatchNorm,
    /// 1x1 projection, present when input and output widths differ.
    pub projection: Option<Conv>,
}

/// How one skip source is turned into a branch at the target level.
#[derive(Clone, Debug)]
pub enum Branch {
    Identity,
    Conv(Conv),
    Up { factor: usize, conv: Conv },
    Down { factor: usize, conv: Conv },
}

impl Branch {
    pub fn conv(&self) -> Option<&Conv> {
        match self {
            Branch::Identity => None,
            Branch::Conv(c) | Branch::Up { conv: c, .. } | Branch::Down { conv: c, .. } => Some(c),
        }
    }
}

/// Gates of one decoder level: a shared resampler for the gating signal and
/// one gate per branch.
#[derive(Clone, Debug)]
pub struct StageGates {
    pub resampler: Resampler,
    pub gates: Vec<AttentionGate>,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub spec: SkipSpec,
    pub branches: Vec<Branch>,
    /// Aggregation: one ConvBnRelu for full-scale stages, two for plain ones.
    pub fuse: Vec<ConvBnRelu>,
    pub gates: Option<StageGates>,
}

/// Per-forward diagnostics.
#[derive(Clone, Debug)]
pub struct GateTrace {
    pub level: usize,
    pub branch: usize,
    pub beta: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// `Y_E^1..Y_E^M`.
    pub encoder: Vec<Var>,
    /// `Y_D^1..Y_D^M`; the last entry is the bottleneck.
    pub decoder: Vec<Var>,
    pub betas: Vec<GateTrace>,
    /// Pre-activation of the first aggregation conv at each decoder level, by level.
    pub fusion_preact: Vec<(usize, Var)>,
    pub batch_stats: Vec<(StatsId, BatchStats)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    pub encoder: Vec<EncoderBlock>,
    /// Indexed by level - 1 for levels 1..M-1.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv,
}

/// Builds a freshly initialized model.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(config, seed)
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let k = c.kernel_size;
        let mut a = Allocator::new(seed);

        let mut encoder = Vec::with_capacity(c.depth);
        for i in 1..=c.depth {
            let cin = if i == 1 {
                c.input_channels
            } else {
                c.encoder_channels(i - 1)
            };
            let cout = c.encoder_channels(i);
            let name = format!("enc{i}");
            let conv = Conv::new(&mut a, &format!("{name}.conv"), cin, cout, k, true)?;
            let bn = BatchNorm::new(&mut a, &format!("{name}.bn"), cout)?;
            let projection = if cin != cout {
                Some(Conv::new(&mut a, &format!("{name}.proj"), cin, cout, 1, false)?)
            } else {
                None
            };
            encoder.push(EncoderBlock {
                level: i,
                conv,
                bn,
                projection,
            });
        }

        let mut decoder: Vec<Option<DecoderStage>> = vec![None; c.depth - 1];
        for j in (1..c.depth).rev() {
            decoder[j - 1] = Some(Self::build_stage(c, &mut a, j)?);
        }

        let head = Conv::new(&mut a, "head", c.decoder_channels(1), c.num_classes, 1, true)?;
        Ok(Model {
            config: c.clone(),
            store: a.store,
            encoder,
            decoder: decoder.into_iter().map(|s| s.expect("every level built")).collect(),
            head,
        })
    }

    fn build_stage(c: &ModelConfig, a: &mut Allocator, j: usize) -> Result<DecoderStage> {
        let k = c.kernel_size;
        let spec = c.skip_spec(j);
        let cd = c.decoder_channels(j);
        let name = format!("dec{j}");
        let full = c.skip_mode.is_full_scale();
        let width = if full { c.skip_branch_channels } else { cd };

        let mut branches = Vec::with_capacity(spec.sources.len());
        for (b, s) in spec.sources.iter().enumerate() {
            let src_c = match s.origin {
                Origin::Encoder => c.encoder_channels(s.level),
                Origin::Decoder => c.decoder_channels(s.level),
            };
            let bname = format!("{name}.branch{b}");
            let branch = match s.transform {
                Transform::Identity => Branch::Identity,
                Transform::Conv => Branch::Conv(Conv::new(a, &bname, src_c, width, k, true)?),
                Transform::UpsampleConv(factor) => Branch::Up {
                    factor,
                    conv: Conv::new(a, &bname, src_c, width, k, true)?,
                },
                Transform::DownsampleConv(factor) => Branch::Down {
                    factor,
                    conv: Conv::new(a, &bname, src_c, width, k, true)?,
                },
            };
            branches.push(branch);
        }

        let concat_c: usize = if full {
            spec.sources.len() * width
        } else {
            c.encoder_channels(j) + cd
        };
        let mut fuse = vec![ConvBnRelu::new(a, &format!("{name}.fuse0"), concat_c, cd, k)?];
        if !full {
            fuse.push(ConvBnRelu::new(a, &format!("{name}.fuse1"), cd, cd, k)?);
        }

        let gates = if c.gates {
            let resampler = Resampler::new(
                a,
                &format!("{name}.resampler"),
                c.decoder_channels(j + 1),
                width,
            )?;
            let mut gs = Vec::with_capacity(branches.len());
            for b in 0..branches.len() {
                let y_c = if full { width } else if b == 0 { c.encoder_channels(j) } else { cd };
                gs.push(AttentionGate::new(
                    a,
                    &format!("{name}.gate{b}"),
                    y_c,
                    width,
                    c.gate_inter_channels(),
                )?);
            }
            Some(StageGates {
                resampler,
                gates: gs,
            })
        } else {
            None
        };

        Ok(DecoderStage {
            spec,
            branches,
            fuse,
            gates,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    /// Replaces all parameters and running statistics. The incoming store
    /// must have the same names, kinds and shapes in the same order.
    pub fn load_store(&mut self, store: ParamStore) -> Result<()> {
        let same = store.len() == self.store.len()
            && store.iter().zip(self.store.iter()).all(|(a, b)| {
                a.name == b.name && a.kind == b.kind && a.value.shape() == b.value.shape()
            })
            && store.running_stats().len() == self.store.running_stats().len()
            && store
                .running_stats()
                .iter()
                .zip(self.store.running_stats())
                .all(|((na, a), (nb, b))| na == nb && a.mean.len() == b.mean.len());
        if !same {
            return Err(Error::Contract(
                "parameter registry does not match the model layout".into(),
            ));
        }
        self.store = store;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.store.bind(g)
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn absorb_stats(&mut self, stats: &[(StatsId, BatchStats)]) {
        for (id, s) in stats {
            self.store.stats_mut(*id).absorb(s, BN_MOMENTUM);
        }
    }

    fn check_image(&self, g: &Graph, image: Var) -> Result<[usize; 4]> {
        let d = g.value(image).dims4("forward")?;
        if d[1] != self.config.input_channels {
            return Err(Error::dim(
                "forward",
                format!(
                    "model expects {} input channels, got {}",
                    self.config.input_channels, d[1]
                ),
            ));
        }
        self.config.check_input(d[2], d[3])?;
        Ok(d)
    }

    /// Encoder features `Y_E^1..Y_E^M`.
    pub fn encode(&self, g: &mut Graph, ctx: &mut Ctx, image: Var) -> Result<Vec<Var>> {
        self.check_image(g, image)?;
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut x = image;
        for block in &self.encoder {
            if block.level > 1 {
                x = g.downsample(x, 2)?;
            }
            let z = block.conv.apply(g, ctx, x)?;
            let n = block.bn.apply(g, ctx, z)?;
            let shortcut = match &block.projection {
                Some(p) => p.apply(g, ctx, x)?,
                None => x,
            };
            let s = g.add(n, shortcut)?;
            x = g.relu(s);
            feats.push(x);
        }
        Ok(feats)
    }

    /// Decoder feature at level `j` given encoder features and the decoder
    /// features already computed (`dec[l - 1]` for levels above `j`).
    pub fn decode_level(
        &self,
        g: &mut Graph,
        ctx: &mut Ctx,
        j: usize,
        enc: &[Var],
        dec: &[Option<Var>],
        gates: GateMode,
        trace: &mut Vec<GateTrace>,
        preact: &mut Vec<(usize, Var)>,
    ) -> Result<Var> {
        let m = self.config.depth;
        if j == 0 || j > m {
            return Err(Error::Contract(format!("decoder level {j} outside 1..={m}")));
        }
        if enc.len() != m {
            return Err(Error::Contract(format!(
                "expected {m} encoder features, got {}",
                enc.len()
            )));
        }
        if j == m {
            return Ok(enc[m - 1]);
        }
        let stage = &self.decoder[j - 1];
        let fetch = |origin: Origin, level: usize| -> Result<Var> {
            match origin {
                Origin::Encoder => Ok(enc[level - 1]),
                Origin::Decoder => dec.get(level - 1).copied().flatten().ok_or_else(|| {
                    Error::Contract(format!(
                        "decoder level {level} required by level {j} is not computed yet"
                    ))
                }),
            }
        };

        let mut parts = Vec::with_capacity(stage.branches.len());
        for (src, branch) in stage.spec.sources.iter().zip(&stage.branches) {
            let x = fetch(src.origin, src.level)?;
            let y = match branch {
                Branch::Identity => x,
                Branch::Conv(c) => c.apply(g, ctx, x)?,
                Branch::Up { factor, conv } => {
                    let u = g.upsample(x, *factor, crate::tensor::UpsampleMethod::Bilinear)?;
                    conv.apply(g, ctx, u)?
                }
                Branch::Down { factor, conv } => {
                    let d = g.downsample(x, *factor)?;
                    conv.apply(g, ctx, d)?
                }
            };
            parts.push(y);
        }

        if let (Some(sg), false) = (&stage.gates, gates == GateMode::Bypass) {
            let [b, _, h, w] = g.value(parts[0]).dims4("gated_decode")?;
            let gating = match gates {
                GateMode::Learned => {
                    let hsig = fetch(Origin::Decoder, j + 1)?;
                    Some(sg.resampler.apply(g, ctx, hsig, (h, w))?)
                }
                _ => None,
            };
            for (i, (part, gate)) in parts.iter_mut().zip(&sg.gates).enumerate() {
                let beta = match (gates, gating) {
                    (GateMode::Forced(v), _) => g.constant(Tensor::full([b, 1, h, w], v)),
                    (_, Some(hs)) => gate.beta(g, ctx, *part, hs)?,
                    _ => unreachable!("learned gates always have a gating signal"),
                };
                trace.push(GateTrace {
                    level: j,
                    branch: i,
                    beta,
                });
                *part = g.mul(*part, beta)?;
            }
        }

        let mut x = g.concat(&parts)?;
        for (i, f) in stage.fuse.iter().enumerate() {
            let (y, z) = f.apply_traced(g, ctx, x)?;
            if i == 0 {
                preact.push((j, z));
            }
            x = y;
        }
        Ok(x)
    }

    /// Full forward pass producing `[B, num_classes, H, W]` logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        image: Var,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let mut ctx = Ctx::new(&self.store, bound, opts.train);
        let enc = self.encode(g, &mut ctx, image)?;
        let m = self.config.depth;
        let mut dec: Vec<Option<Var>> = vec![None; m];
        let mut betas = Vec::new();
        let mut preact = Vec::new();
        for j in (1..=m).rev() {
            let y = self.decode_level(g, &mut ctx, j, &enc, &dec, opts.gates, &mut betas, &mut preact)?;
            dec[j - 1] = Some(y);
        }
        let top = dec[0].expect("level 1 decoded");
        let logits = self.head.apply(g, &ctx, top)?;
        Ok(ForwardOutput {
            logits,
            encoder: enc,
            decoder: dec.into_iter().map(|d| d.expect("decoded")).collect(),
            betas,
            fusion_preact: preact,
            batch_stats: ctx.batch_stats,
        })
    }

    /// Eval-mode logits for a batch, without gradient tracking.
    pub fn infer(&self, images: &Tensor, gates: GateMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.store.bind_frozen(&mut g);
        let x = g.constant(images.detached());
        let out = self.forward(
            &mut g,
            &bound,
            x,
            ForwardOptions {
                train: false,
                gates,
            },
        )?;
        Ok(g.value(out.logits).detached())
    }

    pub fn skip_mode(&self) -> SkipMode {
        self.config.skip_mode
    }
}
