//! Central finite-difference verification of backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BnMode, Graph, OpKind, Tensor, UpsampleMethod, Var};
use crate::error::{Error, Result};

/// Scale-aware discrepancy `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Maximum [`relative_error`] over every coordinate of `input`.
///
/// `f` receives a fresh graph and the registered input, and must return a
/// scalar node. The analytic gradient comes from one backward pass; the
/// numeric one from `(f(x+eps) - f(x-eps)) / (2 eps)` per coordinate.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_coords(f, input, eps, None)
}

/// [`grad_check`] restricted to the given flat coordinates (all when `None`).
pub fn grad_check_coords<F>(f: F, input: &Tensor, eps: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_with(|g| g, f, input, eps, coords)
}

/// Like [`grad_check_coords`], with a hook to prepare each graph (fault injection).
pub(crate) fn grad_check_with<P, F>(
    prepare: P,
    f: F,
    input: &Tensor,
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<f64>
where
    P: Fn(Graph) -> Graph,
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    run_check(prepare, f, input, eps, coords, false).map(|r| r.max_rel_error)
}

/// Result of a check that skips coordinates whose difference stencil crosses
/// a ReLU or max-pool switch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SmoothCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Central differences restricted to coordinates where `x ± eps` and `x`
/// share one activation pattern, so both sides of the stencil lie on the same
/// smooth piece of a piecewise-smooth function.
pub(crate) fn grad_check_smooth<P, F>(
    prepare: P,
    f: F,
    input: &Tensor,
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<SmoothCheck>
where
    P: Fn(Graph) -> Graph,
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    run_check(prepare, f, input, eps, coords, true)
}

fn run_check<P, F>(
    prepare: P,
    f: F,
    input: &Tensor,
    eps: f64,
    coords: Option<&[usize]>,
    smooth_only: bool,
) -> Result<SmoothCheck>
where
    P: Fn(Graph) -> Graph,
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |t: Tensor| -> Result<(f64, u64)> {
        let mut g = prepare(Graph::new());
        let x = g.constant(t);
        let out = f(&mut g, x)?;
        Ok((scalar_of(&g, out)?, g.switch_pattern()))
    };

    let mut g = prepare(Graph::new());
    let x = g.param(input.detached());
    let out = f(&mut g, x)?;
    scalar_of(&g, out)?;
    let pattern = g.switch_pattern();
    g.backward(out)?;
    let zeros = vec![0.0; input.numel()];
    let analytic = g.grad(x).unwrap_or(&zeros).to_vec();

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..input.numel()).collect();
            &all
        }
    };
    let mut r = SmoothCheck::default();
    for &i in coords {
        let mut plus = input.detached();
        plus.data_mut()[i] += eps;
        let mut minus = input.detached();
        minus.data_mut()[i] -= eps;
        let (fp, pp) = eval(plus)?;
        let (fm, pm) = eval(minus)?;
        if smooth_only && (pp != pattern || pm != pattern) {
            r.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        r.max_rel_error = r.max_rel_error.max(relative_error(analytic[i], numeric));
        r.checked += 1;
    }
    Ok(r)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check function must return a scalar, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Result of checking one differentiable operation.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: OpKind,
    pub max_rel_error: f64,
}

/// Runs a finite-difference check of every op in [`OpKind::DIFFERENTIABLE`]
/// on small random inputs drawn from `seed`. Each op is checked against every
/// differentiable argument; the row reports the worst error.
pub fn op_suite(seed: u64, eps: f64, fault: Option<OpKind>) -> Result<Vec<OpCheck>> {
    OpKind::DIFFERENTIABLE
        .iter()
        .map(|&op| {
            Ok(OpCheck {
                op,
                max_rel_error: check_op(op, seed, eps, fault)?,
            })
        })
        .collect()
}

/// Finite-difference check of a single operation kind.
pub fn check_op(op: OpKind, seed: u64, eps: f64, fault: Option<OpKind>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (op as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let prepare = move |mut g: Graph| {
        if let Some(k) = fault {
            g.inject_fault(k);
        }
        g
    };
    // Fixed readout weights keep the scalar objective from being degenerate.
    let weights = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let mut worst: f64 = 0.0;
    let mut check = |f: &dyn Fn(&mut Graph, Var) -> Result<Var>, t: &Tensor| -> Result<()> {
        worst = worst.max(grad_check_with(prepare, f, t, eps, None)?);
        Ok(())
    };
    match op {
        OpKind::Conv2d => {
            for (shape, stride, pad) in [([2, 3, 5, 5], 1, 1), ([1, 2, 5, 5], 2, 1), ([1, 2, 4, 4], 1, 0)] {
                let cin = shape[1];
                let k = if pad == 0 { 1 } else { 3 };
                let x = random_tensor(&mut rng, &shape, 1.0);
                let kt = random_tensor(&mut rng, &[4, cin, k, k], 0.5);
                let bt = random_tensor(&mut rng, &[4], 0.5);
                let oh = (shape[2] + 2 * pad - k) / stride + 1;
                let ow = (shape[3] + 2 * pad - k) / stride + 1;
                let w = weights(shape[0] * 4 * oh * ow, &mut rng);
                check(
                    &|g, v| {
                        let (kv, bv) = (g.constant(kt.clone()), g.constant(bt.clone()));
                        let y = g.conv2d(v, kv, Some(bv), stride, pad)?;
                        g.weighted_sum(y, &w)
                    },
                    &x,
                )?;
                check(
                    &|g, v| {
                        let (xv, bv) = (g.constant(x.clone()), g.constant(bt.clone()));
                        let y = g.conv2d(xv, v, Some(bv), stride, pad)?;
                        g.weighted_sum(y, &w)
                    },
                    &kt,
                )?;
                check(
                    &|g, v| {
                        let (xv, kv) = (g.constant(x.clone()), g.constant(kt.clone()));
                        let y = g.conv2d(xv, kv, Some(v), stride, pad)?;
                        g.weighted_sum(y, &w)
                    },
                    &bt,
                )?;
            }
        }
        OpKind::BatchNorm => {
            let x = random_tensor(&mut rng, &[2, 3, 3, 3], 2.0);
            let gm = random_tensor(&mut rng, &[3], 1.5);
            let bt = random_tensor(&mut rng, &[3], 1.0);
            let w = weights(x.numel(), &mut rng);
            let rm = vec![0.1, -0.2, 0.3];
            let rv = vec![0.9, 1.2, 0.7];
            for train in [true, false] {
                let mode = |train: bool| if train { BnMode::Train } else { BnMode::Eval { mean: &rm, var: &rv } };
                check(
                    &|g, v| {
                        let (gv, bv) = (g.constant(gm.clone()), g.constant(bt.clone()));
                        let (y, _) = g.batch_norm(v, gv, bv, 1e-5, mode(train))?;
                        g.weighted_sum(y, &w)
                    },
                    &x,
                )?;
                check(
                    &|g, v| {
                        let (xv, bv) = (g.constant(x.clone()), g.constant(bt.clone()));
                        let (y, _) = g.batch_norm(xv, v, bv, 1e-5, mode(train))?;
                        g.weighted_sum(y, &w)
                    },
                    &gm,
                )?;
                check(
                    &|g, v| {
                        let (xv, gv) = (g.constant(x.clone()), g.constant(gm.clone()));
                        let (y, _) = g.batch_norm(xv, gv, v, 1e-5, mode(train))?;
                        g.weighted_sum(y, &w)
                    },
                    &bt,
                )?;
            }
        }
        OpKind::Relu | OpKind::Sigmoid => {
            let x = random_tensor(&mut rng, &[2, 2, 3, 3], 3.0);
            let w = weights(x.numel(), &mut rng);
            check(
                &|g, v| {
                    let y = if op == OpKind::Relu { g.relu(v) } else { g.sigmoid(v) };
                    g.weighted_sum(y, &w)
                },
                &x,
            )?;
        }
        OpKind::UpsampleBilinear | OpKind::UpsampleNearest => {
            let method = if op == OpKind::UpsampleBilinear {
                UpsampleMethod::Bilinear
            } else {
                UpsampleMethod::Nearest
            };
            for factor in [1, 2, 3] {
                let x = random_tensor(&mut rng, &[1, 2, 3, 4], 1.0);
                let w = weights(x.numel() * factor * factor, &mut rng);
                check(
                    &|g, v| {
                        let y = g.upsample(v, factor, method)?;
                        g.weighted_sum(y, &w)
                    },
                    &x,
                )?;
            }
        }
        OpKind::Downsample => {
            for factor in [2, 4] {
                let x = random_tensor(&mut rng, &[2, 2, 4, 8], 1.0);
                let w = weights(x.numel() / (factor * factor), &mut rng);
                check(
                    &|g, v| {
                        let y = g.downsample(v, factor)?;
                        g.weighted_sum(y, &w)
                    },
                    &x,
                )?;
            }
        }
        OpKind::Concat => {
            let a = random_tensor(&mut rng, &[2, 1, 3, 3], 1.0);
            let b = random_tensor(&mut rng, &[2, 3, 3, 3], 1.0);
            let w = weights(2 * 4 * 9, &mut rng);
            check(
                &|g, v| {
                    let bv = g.constant(b.clone());
                    let y = g.concat(&[v, bv])?;
                    g.weighted_sum(y, &w)
                },
                &a,
            )?;
            check(
                &|g, v| {
                    let av = g.constant(a.clone());
                    let y = g.concat(&[av, v])?;
                    g.weighted_sum(y, &w)
                },
                &b,
            )?;
        }
        OpKind::Mul => {
            let a = random_tensor(&mut rng, &[2, 3, 2, 2], 1.0);
            for b_shape in [[2, 3, 2, 2], [2, 1, 2, 2]] {
                let b = random_tensor(&mut rng, &b_shape, 1.0);
                let w = weights(a.numel(), &mut rng);
                check(
                    &|g, v| {
                        let bv = g.constant(b.clone());
                        let y = g.mul(v, bv)?;
                        g.weighted_sum(y, &w)
                    },
                    &a,
                )?;
                check(
                    &|g, v| {
                        let av = g.constant(a.clone());
                        let y = g.mul(av, v)?;
                        g.weighted_sum(y, &w)
                    },
                    &b,
                )?;
            }
        }
        OpKind::Add => {
            let a = random_tensor(&mut rng, &[1, 2, 3, 3], 1.0);
            let b = random_tensor(&mut rng, &[1, 2, 3, 3], 1.0);
            let w = weights(a.numel(), &mut rng);
            check(
                &|g, v| {
                    let bv = g.constant(b.clone());
                    // fan-out: v feeds both operands
                    let s = g.add(v, bv)?;
                    let y = g.add(s, v)?;
                    g.weighted_sum(y, &w)
                },
                &a,
            )?;
        }
        OpKind::Sum => {
            let x = random_tensor(&mut rng, &[2, 2, 2, 2], 1.0);
            let w = weights(x.numel(), &mut rng);
            check(&|g, v| Ok(g.sum(v)), &x)?;
            check(&|g, v| g.weighted_sum(v, &w), &x)?;
        }
        OpKind::CrossEntropy | OpKind::SoftDice => {
            let x = random_tensor(&mut rng, &[2, 4, 3, 3], 2.0);
            let target: Vec<u8> = (0..2 * 9).map(|_| rng.random_range(0..4u8)).collect();
            check(
                &|g, v| {
                    if op == OpKind::CrossEntropy {
                        g.cross_entropy(v, &target)
                    } else {
                        g.soft_dice(v, &target, 1.0)
                    }
                },
                &x,
            )?;
        }
        OpKind::Leaf => {}
    }
    Ok(worst)
}
