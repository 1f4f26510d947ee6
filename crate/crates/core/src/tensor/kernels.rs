//! Raw slice kernels behind the graph operations.

/// Row-major `c = a * b + beta * c` with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm: output too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1, stride-1, unpadded conv reads its input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input coordinate for output coordinate `o` and kernel tap `t`, if in bounds.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw_out = g.col_cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.oh {
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.src(oy, kh, g.h) {
                        None => out_row.fill(0.0),
                        Some(iy) => {
                            let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in out_row.iter_mut().enumerate() {
                                *v = g.src(ox, kw, g.w).map_or(0.0, |ix| src_row[ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw_out = g.col_cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, kh, g.h) else {
                        continue;
                    };
                    let in_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for (ox, v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        if let Some(ix) = g.src(ox, kw, g.w) {
                            in_row[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * hw;
    let mut out = vec![0.0; batch * out_sz];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * hw]
    };
    for b in 0..batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let col_src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        if let Some(bias) = bias {
            for (co, plane) in ob.chunks_exact_mut(hw).enumerate() {
                plane.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(g.cout, rows, hw, kernel, (rows, 1), col_src, (hw, 1), beta, ob);
    }
    out
}

/// Gradients of a convolution. Each output is only computed when requested.
pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    kernel: &[f64],
    gout: &[f64],
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> ConvGrads {
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * hw;
    let mut dx = want_input.then(|| vec![0.0; batch * in_sz]);
    let mut dk = want_kernel.then(|| vec![0.0; kernel.len()]);
    let mut db = want_bias.then(|| vec![0.0; g.cout]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * hw]
    };
    let mut dcols = if want_input && !g.is_pointwise() {
        vec![0.0; rows * hw]
    } else {
        Vec::new()
    };
    for b in 0..batch {
        let gb = &gout[b * out_sz..(b + 1) * out_sz];
        if let Some(db) = db.as_mut() {
            for (co, plane) in gb.chunks_exact(hw).enumerate() {
                db[co] += plane.iter().sum::<f64>();
            }
        }
        if let Some(dk) = dk.as_mut() {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let col_src: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dK[co, r] += sum_p gout[co, p] * cols[r, p]
            gemm(g.cout, hw, rows, gb, (hw, 1), col_src, (1, hw), 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                gemm(rows, g.cout, hw, kernel, (1, rows), gb, (hw, 1), 1.0, dxb);
            } else {
                // dcols[r, p] = sum_co K[co, r] * gout[co, p]
                gemm(rows, g.cout, hw, kernel, (1, rows), gb, (hw, 1), 0.0, &mut dcols);
                col2im(&dcols, g, dxb);
            }
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

/// Max-pool with window = stride = `f`. Returns the pooled values and, for
/// each output, the flat input index of the first maximum in row-major order.
pub(crate) fn maxpool_forward(x: &[f64], dims: [usize; 4], f: usize) -> (Vec<f64>, Vec<usize>) {
    let [b, c, h, w] = dims;
    let (oh, ow) = (h / f, w / f);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * f * w + ox * f;
                for dy in 0..f {
                    for dx in 0..f {
                        let idx = base + (oy * f + dy) * w + ox * f + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// One-dimensional interpolation taps for output coordinate positions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_hi: f64,
}

/// Bilinear taps with half-pixel centers (align-corners = false).
pub(crate) fn bilinear_taps(src: usize, factor: usize) -> Vec<Tap> {
    (0..src * factor)
        .map(|o| {
            let pos = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                w_hi: pos - lo as f64,
            }
        })
        .collect()
}

pub(crate) fn nearest_taps(src: usize, factor: usize) -> Vec<Tap> {
    (0..src * factor)
        .map(|o| Tap {
            lo: o / factor,
            hi: o / factor,
            w_hi: 0.0,
        })
        .collect()
}

pub(crate) fn resize_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    ty: &[Tap],
    tx: &[Tap],
) -> Vec<f64> {
    let (oh, ow) = (ty.len(), tx.len());
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let (r0, r1) = (&src[a.lo * w..(a.lo + 1) * w], &src[a.hi * w..(a.hi + 1) * w]);
            for (ox, bt) in tx.iter().enumerate() {
                let top = r0[bt.lo] * (1.0 - bt.w_hi) + r0[bt.hi] * bt.w_hi;
                let bot = r1[bt.lo] * (1.0 - bt.w_hi) + r1[bt.hi] * bt.w_hi;
                dst[oy * ow + ox] = top * (1.0 - a.w_hi) + bot * a.w_hi;
            }
        }
    }
    out
}

/// Transposed interpolation: scatters output gradients back onto the source grid.
pub(crate) fn resize_backward(
    gout: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    ty: &[Tap],
    tx: &[Tap],
) -> Vec<f64> {
    let (oh, ow) = (ty.len(), tx.len());
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &gout[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, bt) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let (top, bot) = (v * (1.0 - a.w_hi), v * a.w_hi);
                d[a.lo * w + bt.lo] += top * (1.0 - bt.w_hi);
                d[a.lo * w + bt.hi] += top * bt.w_hi;
                d[a.hi * w + bt.lo] += bot * (1.0 - bt.w_hi);
                d[a.hi * w + bt.hi] += bot * bt.w_hi;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, (k, 1), &b, (n, 1), 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            cin: 2,
            h: 5,
            w: 4,
            cout: 1,
            k: 3,
            stride: 1,
            pad: 1,
            oh: 5,
            ow: 4,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).sin())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bilinear_factor_one_is_identity_taps() {
        for t in bilinear_taps(5, 1).iter().enumerate() {
            assert_eq!(t.1.lo, t.0);
            assert_eq!(t.1.w_hi, 0.0);
        }
    }
}
