//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use fhseg::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// A single gated node `out = beta(y, h) * f(y; W)` with
/// `f = W y` (1x1) and `beta = sigmoid(phi relu(Mx y + My h + c_y) + c_phi)`.
pub struct GatedNode {
    pub b: usize,
    pub cy: usize,
    pub ch: usize,
    pub cf: usize,
    pub inter: usize,
    pub hw: usize,
    pub y: Tensor,
    pub h: Tensor,
    pub wf: Tensor,
    pub mx: Tensor,
    pub my: Tensor,
    pub c_y: Tensor,
    pub phi: Tensor,
    pub c_phi: Tensor,
}

impl GatedNode {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let (b, cy, ch, cf, inter, hw) = (2, 3, 2, 2, 4, 3);
        GatedNode {
            y: uniform(&mut r, &[b, cy, hw, hw], 1.0),
            h: uniform(&mut r, &[b, ch, hw, hw], 1.0),
            wf: uniform(&mut r, &[cf, cy, 1, 1], 1.0),
            mx: uniform(&mut r, &[inter, cy, 1, 1], 1.0),
            my: uniform(&mut r, &[inter, ch, 1, 1], 1.0),
            c_y: uniform(&mut r, &[inter], 0.5),
            phi: uniform(&mut r, &[1, inter, 1, 1], 1.0),
            c_phi: uniform(&mut r, &[1], 0.5),
            b,
            cy,
            ch,
            cf,
            inter,
            hw,
        }
    }

    /// Parameter tensors in a fixed order: y, W, Mx, My, c_y, phi, c_phi.
    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.y, &self.wf, &self.mx, &self.my, &self.c_y, &self.phi, &self.c_phi]
    }

    fn build(&self, g: &mut Graph) -> (Vec<Var>, Var) {
        let p: Vec<Var> = self.params().into_iter().map(|t| g.param(t.detached())).collect();
        let h = g.constant(self.h.detached());
        let f = g.conv2d(p[0], p[1], None, 1, 0).unwrap();
        let a = g.conv2d(p[0], p[2], None, 1, 0).unwrap();
        let bb = g.conv2d(h, p[3], Some(p[4]), 1, 0).unwrap();
        let s = g.add(a, bb).unwrap();
        let r = g.relu(s);
        let logit = g.conv2d(r, p[5], Some(p[6]), 1, 0).unwrap();
        let beta = g.sigmoid(logit);
        let out = g.mul(f, beta).unwrap();
        (p, out)
    }

    /// Jacobian rows `d out[o] / d params` from reverse mode, one backward per output.
    pub fn autodiff_jacobian(&self) -> Vec<Vec<Vec<f64>>> {
        let n_out = self.b * self.cf * self.hw * self.hw;
        (0..n_out)
            .map(|o| {
                let mut g = Graph::new();
                let (p, out) = self.build(&mut g);
                let mut w = vec![0.0; n_out];
                w[o] = 1.0;
                let l = g.weighted_sum(out, &w).unwrap();
                g.backward(l).unwrap();
                p.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect()
            })
            .collect()
    }

    /// Same Jacobian by the manual expansion `beta * df/dPsi + f * dbeta/dPsi`.
    pub fn manual_jacobian(&self) -> Vec<Vec<Vec<f64>>> {
        let (b_n, cy, ch, cf, ni, hw) = (self.b, self.cy, self.ch, self.cf, self.inter, self.hw);
        let np = hw * hw;
        let yv = |b: usize, k: usize, p: usize| self.y.data()[(b * cy + k) * np + p];
        let hv = |b: usize, l: usize, p: usize| self.h.data()[(b * ch + l) * np + p];
        let wf = |c: usize, k: usize| self.wf.data()[c * cy + k];
        let mx = |i: usize, k: usize| self.mx.data()[i * cy + k];
        let my = |i: usize, l: usize| self.my.data()[i * ch + l];
        let phi = |i: usize| self.phi.data()[i];

        let mut rows = Vec::new();
        for b in 0..b_n {
            for c in 0..cf {
                for p in 0..np {
                    let s: Vec<f64> = (0..ni)
                        .map(|i| {
                            (0..cy).map(|k| mx(i, k) * yv(b, k, p)).sum::<f64>()
                                + (0..ch).map(|l| my(i, l) * hv(b, l, p)).sum::<f64>()
                                + self.c_y.data()[i]
                        })
                        .collect();
                    let r: Vec<f64> = s.iter().map(|v| v.max(0.0)).collect();
                    let on: Vec<f64> = s.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                    let a = (0..ni).map(|i| phi(i) * r[i]).sum::<f64>() + self.c_phi.data()[0];
                    let beta = sigmoid(a);
                    let dbeta = beta * (1.0 - beta);
                    let f = (0..cy).map(|k| wf(c, k) * yv(b, k, p)).sum::<f64>();

                    let mut dy = vec![0.0; self.y.numel()];
                    for k in 0..cy {
                        let gate_path: f64 = (0..ni).map(|i| phi(i) * on[i] * mx(i, k)).sum();
                        dy[(b * cy + k) * np + p] = beta * wf(c, k) + f * dbeta * gate_path;
                    }
                    let mut dwf = vec![0.0; self.wf.numel()];
                    for k in 0..cy {
                        dwf[c * cy + k] = beta * yv(b, k, p);
                    }
                    let mut dmx = vec![0.0; self.mx.numel()];
                    let mut dmy = vec![0.0; self.my.numel()];
                    let mut dcy = vec![0.0; ni];
                    let mut dphi = vec![0.0; ni];
                    for i in 0..ni {
                        let common = f * dbeta * phi(i) * on[i];
                        for k in 0..cy {
                            dmx[i * cy + k] = common * yv(b, k, p);
                        }
                        for l in 0..ch {
                            dmy[i * ch + l] = common * hv(b, l, p);
                        }
                        dcy[i] = common;
                        dphi[i] = f * dbeta * r[i];
                    }
                    let dcphi = vec![f * dbeta];
                    rows.push(vec![dy, dwf, dmx, dmy, dcy, dphi, dcphi]);
                }
            }
        }
        rows
    }

    /// Largest elementwise disagreement between the two Jacobians.
    pub fn max_discrepancy(&self) -> f64 {
        let a = self.autodiff_jacobian();
        let m = self.manual_jacobian();
        let mut worst: f64 = 0.0;
        for (ra, rm) in a.iter().zip(&m) {
            for (ta, tm) in ra.iter().zip(rm) {
                assert_eq!(ta.len(), tm.len());
                for (x, y) in ta.iter().zip(tm) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        worst
    }
}

/// Per-pixel softmax cross-entropy plus soft Dice (smooth 1, mean over
/// classes, batch pooled), computed by plain loops.
pub fn loss_oracle(logits: &Tensor, mask: &[u8]) -> f64 {
    let [b, c, h, w] = logits.dims4("oracle").unwrap();
    let np = h * w;
    let z = logits.data();
    let mut probs = vec![0.0; z.len()];
    let mut ce = 0.0;
    for bi in 0..b {
        for p in 0..np {
            let at = |k: usize| z[(bi * c + k) * np + p];
            let mx = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..c).map(|k| (at(k) - mx).exp()).sum();
            for k in 0..c {
                probs[(bi * c + k) * np + p] = (at(k) - mx).exp() / denom;
            }
            let t = mask[bi * np + p] as usize;
            ce -= at(t) - mx - denom.ln();
        }
    }
    ce /= (b * np) as f64;
    let mut dice = 0.0;
    for k in 0..c {
        let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
        for bi in 0..b {
            for p in 0..np {
                let pr = probs[(bi * c + k) * np + p];
                let t = if mask[bi * np + p] as usize == k { 1.0 } else { 0.0 };
                inter += pr * t;
                ps += pr;
                ts += t;
            }
        }
        dice += 1.0 - (2.0 * inter + 1.0) / (ps + ts + 1.0);
    }
    ce + dice / c as f64
}

/// Confusion counts for one class over one mask pair.
pub fn counts(pred: &[u8], truth: &[u8], class: u8) -> (u64, u64, u64) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

/// Brute-force Dice from a full confusion matrix.
pub fn dice_oracle(pred: &[u8], truth: &[u8], class: u8, classes: usize) -> f64 {
    let mut cm = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        cm[t as usize][p as usize] += 1;
    }
    let k = class as usize;
    let tp = cm[k][k];
    let pred_k: u64 = (0..classes).map(|t| cm[t][k]).sum();
    let true_k: u64 = cm[k].iter().sum();
    if pred_k + true_k == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (pred_k + true_k) as f64
    }
}
