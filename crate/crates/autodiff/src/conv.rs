//! 1-D convolution as one trilinear form.
//!
//! With `T(x, w, g) = <g, conv(x, w)>`, the forward convolution, its input
//! adjoint (transposed convolution) and its weight adjoint (correlation) are
//! the three partial derivatives of `T`. Each one's backward rule is
//! therefore another member of the same family, which keeps every
//! convolution differentiable to any order.

use std::cell::RefCell;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ConvMode {
    /// `(x, w) -> y`
    Forward,
    /// `(g_y, w) -> x-shaped`
    InputAdjoint,
    /// `(x, g_y) -> w-shaped`
    WeightAdjoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Input length of the forward convolution.
    pub lx: usize,
    /// Output length of the forward convolution.
    pub ly: usize,
}

impl ConvGeom {
    /// Range of output positions `t` such that `t*stride + tap - pad` is a
    /// valid input index.
    #[inline]
    fn t_range(&self, tap: usize) -> (usize, usize) {
        let lo = if self.pad > tap {
            (self.pad - tap).div_ceil(self.stride)
        } else {
            0
        };
        let hi_num = self.lx as isize - 1 + self.pad as isize - tap as isize;
        if hi_num < 0 {
            return (1, 0);
        }
        let hi = ((hi_num as usize) / self.stride + 1).min(self.ly);
        (lo, hi)
    }
}

pub(crate) fn compute(mode: ConvMode, g: &ConvGeom, a: &Tensor, b: &Tensor) -> (Vec<usize>, Vec<f64>) {
    match mode {
        ConvMode::Forward => {
            let batch = a.shape()[0];
            (vec![batch, g.cout, g.ly], forward(g, batch, a.data(), b.data()))
        }
        ConvMode::InputAdjoint => {
            let batch = a.shape()[0];
            (vec![batch, g.cin, g.lx], input_adjoint(g, batch, a.data(), b.data()))
        }
        ConvMode::WeightAdjoint => {
            let batch = a.shape()[0];
            (vec![g.cout, g.cin, g.k], weight_adjoint(g, batch, a.data(), b.data()))
        }
    }
}

/// `c = a * b + beta * c` for `a: (m, k)` and `b: (k, n)` given by their
/// row/column strides; `c` is a dense row-major `(m, n)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
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
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above bound every index dgemm touches.
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

/// Unfolds `x: (B, Cin, Lx)` into `col: (Cin*K, B*Ly)` with
/// `col[c*K + tap][b*Ly + t] = x[b][c][t*stride + tap - pad]` (zero outside).
fn im2col(g: &ConvGeom, batch: usize, x: &[f64], col: &mut [f64]) {
    let ld = batch * g.ly;
    for b in 0..batch {
        for c in 0..g.cin {
            let xrow = &x[(b * g.cin + c) * g.lx..(b * g.cin + c + 1) * g.lx];
            for tap in 0..g.k {
                let at = (c * g.k + tap) * ld + b * g.ly;
                let row = &mut col[at..at + g.ly];
                let (lo, hi) = g.t_range(tap);
                if hi <= lo {
                    row.fill(0.0);
                    continue;
                }
                row[..lo].fill(0.0);
                row[hi..].fill(0.0);
                if g.stride == 1 {
                    let off = lo + tap - g.pad;
                    row[lo..hi].copy_from_slice(&xrow[off..off + hi - lo]);
                } else {
                    for t in lo..hi {
                        row[t] = xrow[t * g.stride + tap - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col` back into `x`.
fn col2im(g: &ConvGeom, batch: usize, col: &[f64], x: &mut [f64]) {
    let ld = batch * g.ly;
    for b in 0..batch {
        for c in 0..g.cin {
            let xrow = &mut x[(b * g.cin + c) * g.lx..(b * g.cin + c + 1) * g.lx];
            for tap in 0..g.k {
                let (lo, hi) = g.t_range(tap);
                if hi <= lo {
                    continue;
                }
                let at = (c * g.k + tap) * ld + b * g.ly;
                let row = &col[at..at + g.ly];
                if g.stride == 1 {
                    let off = lo + tap - g.pad;
                    for (xv, cv) in xrow[off..off + hi - lo].iter_mut().zip(&row[lo..hi]) {
                        *xv += cv;
                    }
                } else {
                    for t in lo..hi {
                        xrow[t * g.stride + tap - g.pad] += row[t];
                    }
                }
            }
        }
    }
}

/// `(B, C, L) <-> (C, B*L)`; `to_rows` picks the direction.
fn swap_batch(batch: usize, c: usize, l: usize, src: &[f64], dst: &mut [f64], to_rows: bool) {
    for b in 0..batch {
        for ch in 0..c {
            let (bi, ri) = ((b * c + ch) * l, ch * batch * l + b * l);
            if to_rows {
                dst[ri..ri + l].copy_from_slice(&src[bi..bi + l]);
            } else {
                dst[bi..bi + l].copy_from_slice(&src[ri..ri + l]);
            }
        }
    }
}

thread_local! {
    static SCRATCH: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

/// Runs `f` on two reusable buffers of the given lengths. Contents are stale;
/// callers must overwrite every element before reading.
fn with_scratch<R>(a: usize, b: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|s| {
        let (ref mut x, ref mut y) = *s.borrow_mut();
        if x.len() < a {
            x.resize(a, 0.0);
        }
        if y.len() < b {
            y.resize(b, 0.0);
        }
        f(&mut x[..a], &mut y[..b])
    })
}

fn forward(g: &ConvGeom, batch: usize, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (ck, n) = (g.cin * g.k, batch * g.ly);
    let mut y = vec![0.0; batch * g.cout * g.ly];
    with_scratch(ck * n, g.cout * n, |col, rows| {
        im2col(g, batch, x, col);
        gemm(g.cout, ck, n, w, (ck, 1), col, (n, 1), 0.0, rows);
        swap_batch(batch, g.cout, g.ly, rows, &mut y, false);
    });
    y
}

fn input_adjoint(g: &ConvGeom, batch: usize, gy: &[f64], w: &[f64]) -> Vec<f64> {
    let (ck, n) = (g.cin * g.k, batch * g.ly);
    let mut x = vec![0.0; batch * g.cin * g.lx];
    with_scratch(ck * n, g.cout * n, |col, rows| {
        swap_batch(batch, g.cout, g.ly, gy, rows, true);
        // W^T: (Cin*K, Cout) read through swapped strides.
        gemm(ck, g.cout, n, w, (1, ck), rows, (n, 1), 0.0, col);
        col2im(g, batch, col, &mut x);
    });
    x
}

fn weight_adjoint(g: &ConvGeom, batch: usize, x: &[f64], gy: &[f64]) -> Vec<f64> {
    let (ck, n) = (g.cin * g.k, batch * g.ly);
    let mut w = vec![0.0; g.cout * ck];
    with_scratch(ck * n, g.cout * n, |col, rows| {
        im2col(g, batch, x, col);
        swap_batch(batch, g.cout, g.ly, gy, rows, true);
        // col^T: (B*Ly, Cin*K).
        gemm(g.cout, n, ck, rows, (n, 1), col, (1, n), 0.0, &mut w);
    });
    w
}

pub(crate) fn backward(
    mode: ConvMode,
    geom: &ConvGeom,
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
) -> Vec<Option<Tensor>> {
    use ConvMode::*;
    let op = |x: &Tensor, y: &Tensor, m| Some(Tensor::conv_op(x, y, m, *geom));
    match mode {
        // a = x, b = w
        Forward => vec![op(g, b, InputAdjoint), op(a, g, WeightAdjoint)],
        // a = g_y, b = w
        InputAdjoint => vec![op(g, b, Forward), op(g, a, WeightAdjoint)],
        // a = x, b = g_y
        WeightAdjoint => vec![op(b, g, InputAdjoint), op(a, g, Forward)],
    }
}

/// Output length of a strided convolution.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output length of a transposed convolution:
/// `(len - 1) * stride + k - 2 * pad + output_padding`.
pub fn conv_transpose_out_len(
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Option<usize> {
    if len == 0 || stride == 0 || output_padding >= stride {
        return None;
    }
    ((len - 1) * stride + k + output_padding).checked_sub(2 * pad)
}

/// `x: (B, Cin, L)`, `w: (Cout, Cin, K)` -> `(B, Cout, L_out)`.
pub(crate) fn conv1d_raw(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Option<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
        return None;
    }
    let ly = conv_out_len(xs[2], ws[2], stride, pad)?;
    let geom = ConvGeom {
        cin: ws[1],
        cout: ws[0],
        k: ws[2],
        stride,
        pad,
        lx: xs[2],
        ly,
    };
    Some(Tensor::conv_op(x, w, ConvMode::Forward, geom))
}

/// `x: (B, Cin, L)`, `w: (Cin, Cout, K)` -> `(B, Cout, L_out)`.
pub(crate) fn conv_transpose1d_raw(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Option<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[0] {
        return None;
    }
    let lx = conv_transpose_out_len(xs[2], ws[2], stride, pad, output_padding)?;
    if conv_out_len(lx, ws[2], stride, pad)? != xs[2] {
        return None;
    }
    // The transposed layer's input plays the role of the forward output.
    let geom = ConvGeom {
        cin: ws[1],
        cout: ws[0],
        k: ws[2],
        stride,
        pad,
        lx,
        ly: xs[2],
    };
    Some(Tensor::conv_op(x, w, ConvMode::InputAdjoint, geom))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct index-by-index evaluation of the convolution sum.
    fn naive_conv(x: &[f64], w: &[f64], b: usize, g: &ConvGeom) -> Vec<f64> {
        let mut y = vec![0.0; b * g.cout * g.ly];
        for bi in 0..b {
            for o in 0..g.cout {
                for t in 0..g.ly {
                    let mut acc = 0.0;
                    for c in 0..g.cin {
                        for tap in 0..g.k {
                            let i = (t * g.stride + tap) as isize - g.pad as isize;
                            if i >= 0 && (i as usize) < g.lx {
                                acc += w[(o * g.cin + c) * g.k + tap]
                                    * x[(bi * g.cin + c) * g.lx + i as usize];
                            }
                        }
                    }
                    y[(bi * g.cout + o) * g.ly + t] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_naive_sum() {
        for &(stride, pad, k, lx) in &[(1, 0, 3, 10), (2, 1, 4, 11), (5, 2, 9, 27), (1, 4, 9, 9)] {
            let (cin, cout, b) = (2, 3, 2);
            let ly = conv_out_len(lx, k, stride, pad).unwrap();
            let g = ConvGeom { cin, cout, k, stride, pad, lx, ly };
            let x: Vec<f64> = (0..b * cin * lx).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
            let w: Vec<f64> = (0..cout * cin * k).map(|i| ((i * 5 % 11) as f64) * 0.1 - 0.5).collect();
            let fast = forward(&g, b, &x, &w);
            let slow = naive_conv(&x, &w, b, &g);
            for (a, c) in fast.iter().zip(&slow) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let (stride, pad, k, lx) = (2, 3, 8, 20);
        let (cin, cout, b) = (3, 2, 2);
        let ly = conv_out_len(lx, k, stride, pad).unwrap();
        let g = ConvGeom { cin, cout, k, stride, pad, lx, ly };
        let x: Vec<f64> = (0..b * cin * lx).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..cout * cin * k).map(|i| (i as f64 * 0.91).cos()).collect();
        let gy: Vec<f64> = (0..b * cout * ly).map(|i| (i as f64 * 0.53).sin()).collect();
        let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(p, q)| p * q).sum::<f64>();
        let t = dot(&gy, &forward(&g, b, &x, &w));
        assert!((t - dot(&x, &input_adjoint(&g, b, &gy, &w))).abs() < 1e-10);
        assert!((t - dot(&w, &weight_adjoint(&g, b, &x, &gy))).abs() < 1e-10);
    }

    #[test]
    fn transpose_length_formula() {
        assert_eq!(conv_transpose_out_len(125, 8, 2, 3, 0), Some(250));
        assert_eq!(conv_transpose_out_len(25, 9, 5, 2, 0), Some(125));
        assert_eq!(conv_transpose_out_len(125, 4, 2, 1, 0), Some(250));
        assert_eq!(conv_out_len(250, 8, 2, 3), Some(125));
        assert_eq!(conv_out_len(125, 9, 5, 2), Some(25));
    }
}
