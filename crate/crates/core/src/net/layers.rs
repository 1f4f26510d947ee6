use crate::error::{Error, Result};
use crate::tensor::{BatchStats, BnMode, Graph, UpsampleMethod, Var};

use super::params::{Allocator, Bound, ParamId, ParamKind, ParamStore, StatsId};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-forward state shared by all layers: train/eval switch and the
/// batch statistics collected for a later running-average update.
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub bound: &'a Bound,
    pub train: bool,
    pub batch_stats: Vec<(StatsId, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, bound: &'a Bound, train: bool) -> Self {
        Ctx {
            store,
            bound,
            train,
            batch_stats: Vec::new(),
        }
    }

    fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }
}

/// Stride-1, same-padding convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv {
    pub(crate) fn new(
        a: &mut Allocator,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = a.conv_weight(format!("{name}.weight"), cout, cin, k)?;
        let bias = if bias {
            Some(a.filled(format!("{name}.bias"), ParamKind::Bias, cout, 0.0)?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
        })
    }

    pub fn weight_count(&self) -> u64 {
        (self.out_channels * self.in_channels * self.kernel * self.kernel) as u64
    }

    pub fn apply(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            ctx.var(self.weight),
            self.bias.map(|b| ctx.var(b)),
            1,
            self.kernel / 2,
        )
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm {
    pub(crate) fn new(a: &mut Allocator, name: &str, c: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: a.filled(format!("{name}.gamma"), ParamKind::BnGamma, c, 1.0)?,
            beta: a.filled(format!("{name}.beta"), ParamKind::BnBeta, c, 0.0)?,
            stats: a.running_stats(name.to_string(), c),
        })
    }

    pub fn apply(&self, g: &mut Graph, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        if ctx.train {
            let (y, stats) = g.batch_norm(x, gamma, beta, BN_EPS, BnMode::Train)?;
            if let Some(s) = stats {
                ctx.batch_stats.push((self.stats, s));
            }
            Ok(y)
        } else {
            let rs = ctx.store.stats(self.stats);
            let (y, _) = g.batch_norm(x, gamma, beta, BN_EPS, rs.mode())?;
            Ok(y)
        }
    }
}

/// `ReLU(BN(Conv(x)))`, with the conv pre-activation exposed.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub(crate) fn new(a: &mut Allocator, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv::new(a, &format!("{name}.conv"), cin, cout, k, true)?,
            bn: BatchNorm::new(a, &format!("{name}.bn"), cout)?,
        })
    }

    /// Returns `(output, conv pre-activation)`.
    pub fn apply_traced(&self, g: &mut Graph, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let z = self.conv.apply(g, ctx, x)?;
        let n = self.bn.apply(g, ctx, z)?;
        Ok((g.relu(n), z))
    }

    pub fn apply(&self, g: &mut Graph, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.apply_traced(g, ctx, x).map(|(y, _)| y)
    }
}

/// Brings `x` to `(th, tw)` by bilinear upsampling or max pooling.
pub fn resample_spatial(g: &mut Graph, x: Var, target: (usize, usize)) -> Result<Var> {
    const OP: &str = "resample";
    let [_, _, h, w] = g.value(x).dims4(OP)?;
    let (th, tw) = target;
    let ratio = |src: usize, dst: usize| -> Result<(bool, usize)> {
        if dst >= src && src > 0 && dst % src == 0 {
            Ok((true, dst / src))
        } else if dst < src && dst > 0 && src % dst == 0 {
            Ok((false, src / dst))
        } else {
            Err(Error::dim(
                OP,
                format!("{h}x{w} to {th}x{tw} is not an integer scale"),
            ))
        }
    };
    let (up_h, fh) = ratio(h, th)?;
    let (up_w, fw) = ratio(w, tw)?;
    if fh != fw || (up_h != up_w && fh != 1) {
        return Err(Error::dim(
            OP,
            format!("{h}x{w} to {th}x{tw} needs an isotropic scale"),
        ));
    }
    match (fh, up_h) {
        (1, _) => Ok(x),
        (f, true) => g.upsample(x, f, UpsampleMethod::Bilinear),
        (f, false) => g.downsample(x, f),
    }
}

/// Spatial plus channel normalizer: resample to the target grid, then 1x1 conv.
#[derive(Clone, Debug)]
pub struct Resampler {
    pub conv: Conv,
}

impl Resampler {
    pub(crate) fn new(a: &mut Allocator, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Resampler {
            conv: Conv::new(a, &format!("{name}.conv"), cin, cout, 1, true)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, ctx: &Ctx, x: Var, target: (usize, usize)) -> Result<Var> {
        let s = resample_spatial(g, x, target)?;
        self.conv.apply(g, ctx, s)
    }
}

/// Soft attention gate: `beta = sigmoid(phi(ReLU(Mx y + My h + c_y)) + c_phi)`.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub mx: Conv,
    pub my: Conv,
    pub c_y: ParamId,
    pub phi: Conv,
    pub c_phi: ParamId,
    pub inter_channels: usize,
}

impl AttentionGate {
    pub(crate) fn new(
        a: &mut Allocator,
        name: &str,
        y_channels: usize,
        h_channels: usize,
        inter: usize,
    ) -> Result<Self> {
        let mx = Conv::new(a, &format!("{name}.mx"), y_channels, inter, 1, false)?;
        let my = Conv::new(a, &format!("{name}.my"), h_channels, inter, 1, false)?;
        let c_y = a.filled(format!("{name}.c_y"), ParamKind::Bias, inter, 0.0)?;
        let phi = Conv::new(a, &format!("{name}.phi"), inter, 1, 1, false)?;
        let c_phi = a.filled(format!("{name}.c_phi"), ParamKind::Bias, 1, 0.0)?;
        Ok(AttentionGate {
            mx,
            my,
            c_y,
            phi,
            c_phi,
            inter_channels: inter,
        })
    }

    pub fn weight_count(&self) -> u64 {
        self.mx.weight_count() + self.my.weight_count() + self.phi.weight_count()
    }

    /// Attention map `[B,1,H,W]` for skip feature `y` and an already resampled
    /// gating signal `h` at the same resolution.
    pub fn beta(&self, g: &mut Graph, ctx: &Ctx, y: Var, h: Var) -> Result<Var> {
        let (ys, hs) = (g.shape(y).to_vec(), g.shape(h).to_vec());
        if ys.len() != 4 || hs.len() != 4 || ys[0] != hs[0] || ys[2..] != hs[2..] {
            return Err(Error::dim(
                "hsa_gate",
                format!("skip feature {ys:?} and gating signal {hs:?} disagree"),
            ));
        }
        if hs[1] != self.my.in_channels || ys[1] != self.mx.in_channels {
            return Err(Error::dim(
                "hsa_gate",
                format!(
                    "gate expects {}/{} channels, got {}/{}",
                    self.mx.in_channels, self.my.in_channels, ys[1], hs[1]
                ),
            ));
        }
        let a = g.conv2d(y, ctx.var(self.mx.weight), None, 1, 0)?;
        let b = g.conv2d(h, ctx.var(self.my.weight), Some(ctx.var(self.c_y)), 1, 0)?;
        let s = g.add(a, b)?;
        let r = g.relu(s);
        let logit = g.conv2d(r, ctx.var(self.phi.weight), Some(ctx.var(self.c_phi)), 1, 0)?;
        Ok(g.sigmoid(logit))
    }
}
