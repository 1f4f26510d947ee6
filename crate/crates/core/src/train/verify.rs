//! Gradient verification of every differentiable op and of the full model loss.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::loss;
use crate::error::Result;
use crate::net::{build_model, ForwardOptions, Model, ModelConfig, ParamKind, SkipMode};
use crate::tensor::gradcheck::{check_op, grad_check_smooth, SmoothCheck};
use crate::tensor::{Graph, OpKind, Tensor};

/// Maximum relative error accepted by the suite.
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub name: String,
    pub max_rel_error: f64,
    /// Probed coordinates left out because their stencil crossed a ReLU or
    /// max-pool switch (model rows only).
    pub skipped: usize,
    pub checked: usize,
}

impl GradRow {
    fn new(name: &str) -> Self {
        GradRow {
            name: name.to_string(),
            max_rel_error: 0.0,
            skipped: 0,
            checked: 0,
        }
    }

    fn absorb(&mut self, c: SmoothCheck) {
        self.max_rel_error = self.max_rel_error.max(c.max_rel_error);
        self.skipped += c.skipped;
        self.checked += c.checked;
    }

    /// Below tolerance, with at most a tenth of the probes skipped.
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE && self.skipped * 10 <= self.skipped + self.checked
    }
}

/// Small gated full-scale model on 16x16 inputs used by the model-level checks.
pub fn verify_config() -> ModelConfig {
    ModelConfig {
        depth: 3,
        base_channels: 2,
        kernel_size: 3,
        skip_mode: SkipMode::FullScaleNeighbor,
        gates: true,
        skip_branch_channels: 4,
        num_classes: 7,
        input_channels: 3,
    }
}

/// How many coordinates of each tensor the model-level check probes.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub image_coords: usize,
    pub coords_per_param: usize,
}

impl Default for Probe {
    fn default() -> Self {
        Probe {
            image_coords: 64,
            coords_per_param: 3,
        }
    }
}

/// Checks of the loss gradient w.r.t. the image and w.r.t. every named
/// parameter, on a randomly initialized and perturbed model. Probes whose
/// difference stencil crosses an activation switch are counted, not scored.
pub fn model_grad_check(
    cfg: &ModelConfig,
    seed: u64,
    eps: f64,
    fault: Option<OpKind>,
    probe: Probe,
) -> Result<(SmoothCheck, SmoothCheck)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = build_model(cfg, seed)?;
    // move biases and BN affine terms off their initial constants
    for p in model.store_mut().params_mut() {
        if p.kind != ParamKind::ConvWeight {
            let base = if p.kind == ParamKind::BnGamma { 1.0 } else { 0.0 };
            for v in p.value.data_mut() {
                *v = base + rng.random_range(-0.3..0.3);
            }
        }
    }
    let hw = 16;
    let image = Tensor::from_fn([2, cfg.input_channels, hw, hw], |_| rng.random_range(0.0..1.0));
    let mask: Vec<u8> = (0..2 * hw * hw)
        .map(|_| rng.random_range(0..cfg.num_classes as u8))
        .collect();
    let prepare = move |mut g: Graph| {
        if let Some(k) = fault {
            g.inject_fault(k);
        }
        g
    };
    let pick = |rng: &mut ChaCha8Rng, n: usize, k: usize| -> Vec<usize> {
        let mut v = sample(rng, n, k.min(n)).into_vec();
        v.sort_unstable();
        v
    };
    let full_loss = |g: &mut Graph, m: &Model, bound: &crate::net::Bound, x| {
        let out = m.forward(g, bound, x, ForwardOptions::train())?;
        loss(g, out.logits, &mask)
    };

    let coords = pick(&mut rng, image.numel(), probe.image_coords);
    let image_check = grad_check_smooth(
        prepare,
        |g, x| {
            let bound = model.store().bind_frozen(g);
            full_loss(g, &model, &bound, x)
        },
        &image,
        eps,
        Some(&coords),
    )?;

    let mut params = SmoothCheck::default();
    let x_img = image.detached();
    for p in model.store().iter() {
        let id = model.store().id(&p.name).expect("registered");
        let coords = pick(&mut rng, p.value.numel(), probe.coords_per_param);
        let c = grad_check_smooth(
            prepare,
            |g, x| {
                let mut bound = model.store().bind_frozen(g);
                bound.replace(id, x);
                let img = g.constant(x_img.detached());
                full_loss(g, &model, &bound, img)
            },
            &p.value,
            eps,
            Some(&coords),
        )?;
        params.max_rel_error = params.max_rel_error.max(c.max_rel_error);
        params.checked += c.checked;
        params.skipped += c.skipped;
    }
    Ok((image_check, params))
}

/// One row per differentiable op plus the model-level rows, each the worst
/// error over `seeds`.
pub fn gradient_suite(seeds: &[u64], eps: f64, fault: Option<OpKind>) -> Result<Vec<GradRow>> {
    let mut rows: Vec<GradRow> = OpKind::DIFFERENTIABLE.iter().map(|op| GradRow::new(op.name())).collect();
    let mut image_row = GradRow::new("model_loss_wrt_image");
    let mut param_row = GradRow::new("model_loss_wrt_params");
    let cfg = verify_config();
    for &seed in seeds {
        for (row, &op) in rows.iter_mut().zip(OpKind::DIFFERENTIABLE.iter()) {
            row.max_rel_error = row.max_rel_error.max(check_op(op, seed, eps, fault)?);
        }
        let (ic, pc) = model_grad_check(&cfg, seed, eps, fault, Probe::default())?;
        image_row.absorb(ic);
        param_row.absorb(pc);
    }
    rows.push(image_row);
    rows.push(param_row);
    Ok(rows)
}

/// Plain-text table of suite rows.
pub fn render_rows(rows: &[GradRow]) -> String {
    let mut s = format!("{:<24} {:>14} {:>8}  status\n", "check", "max rel error", "skipped");
    for r in rows {
        s.push_str(&format!(
            "{:<24} {:>14.3e} {:>8}  {}\n",
            r.name,
            r.max_rel_error,
            r.skipped,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    s
}
