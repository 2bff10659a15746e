//! Forward and backward kernels over raw NCHW slices.
//!
//! These carry no graph bookkeeping; [`Graph`](crate::Graph) validates
//! shapes and then dispatches here.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

/// Range of output columns `ox` whose input column `ox + kx - pad` lies
/// inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kx: usize, ow: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx);
    let hi = (g.w + g.pad).saturating_sub(kx).min(ow);
    (lo, hi.max(lo))
}

/// Unfolds one image `[C,H,W]` into `[C*k*k, H'*W']`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.in_ch {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx, ow);
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy + ky).wrapping_sub(g.pad);
                    if iy >= g.h {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let start = iy * g.w + lo + kx - g.pad;
                    line[lo..hi].copy_from_slice(&xc[start..start + (hi - lo)]);
                }
            }
        }
    }
}

/// Folds `[C*k*k, H'*W']` back onto `[C,H,W]`, accumulating overlaps.
fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx, ow);
                for oy in 0..oh {
                    let iy = (oy + ky).wrapping_sub(g.pad);
                    if iy >= g.h {
                        continue;
                    }
                    let start = iy * g.w + lo + kx - g.pad;
                    let dst = &mut dxc[start..start + (hi - lo)];
                    for (d, &s) in dst.iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: &[T],
    y: &mut [T],
) {
    let plane = g.out_h() * g.out_w();
    let rows = g.col_rows();
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * plane] };
    for b in 0..g.batch {
        let xb = &x[b * g.in_ch * g.h * g.w..(b + 1) * g.in_ch * g.h * g.w];
        let yb = &mut y[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        for (f, chunk) in yb.chunks_exact_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[f]);
        }
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        T::gemm(
            g.out_ch,
            rows,
            plane,
            T::one(),
            weight,
            (rows, 1),
            cols,
            (plane, 1),
            T::one(),
            yb,
            (plane, 1),
        );
    }
}

/// Accumulates gradients into whichever of `dx`, `dw`, `db` are present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let plane = g.out_h() * g.out_w();
    let rows = g.col_rows();
    let need_col = dw.is_some() && !g.is_pointwise();
    let mut col = if need_col { vec![T::zero(); rows * plane] } else { Vec::new() };
    let mut dcol = if dx.is_some() { vec![T::zero(); rows * plane] } else { Vec::new() };
    let in_sz = g.in_ch * g.h * g.w;
    for b in 0..g.batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let dyb = &dy[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        if let Some(db) = db.as_deref_mut() {
            for (f, chunk) in dyb.chunks_exact(plane).enumerate() {
                db[f] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let cols: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut col);
                &col
            };
            // dW[F, R] += dY[F, P] * col^T[P, R]
            T::gemm(
                g.out_ch,
                plane,
                rows,
                T::one(),
                dyb,
                (plane, 1),
                cols,
                (1, plane),
                T::one(),
                dw,
                (rows, 1),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                // dX[C, P] += W^T[C, F] * dY[F, P]
                T::gemm(
                    rows,
                    g.out_ch,
                    plane,
                    T::one(),
                    weight,
                    (1, rows),
                    dyb,
                    (plane, 1),
                    T::one(),
                    dxb,
                    (plane, 1),
                );
            } else {
                T::gemm(
                    rows,
                    g.out_ch,
                    plane,
                    T::one(),
                    weight,
                    (1, rows),
                    dyb,
                    (plane, 1),
                    T::zero(),
                    &mut dcol,
                    (plane, 1),
                );
                col2im_add(g, &dcol, dxb);
            }
        }
    }
}

/// 2x2 stride-2 max pooling. Returns the flat input index chosen for each
/// output cell; ties resolve to the first element in row-major order.
pub(crate) fn maxpool2_forward<T: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    x: &[T],
    y: &mut [T],
) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut argmax = vec![0usize; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                argmax[o] = best;
                y[o] = x[best];
            }
        }
    }
    argmax
}

pub(crate) fn upsample2_forward<T: Scalar>(planes: usize, h: usize, w: usize, x: &[T], y: &mut [T]) {
    let ow = 2 * w;
    for p in 0..planes {
        for iy in 0..h {
            for ix in 0..w {
                let v = x[(p * h + iy) * w + ix];
                let top = (p * 2 * h + 2 * iy) * ow + 2 * ix;
                y[top] = v;
                y[top + 1] = v;
                y[top + ow] = v;
                y[top + ow + 1] = v;
            }
        }
    }
}

pub(crate) fn upsample2_backward<T: Scalar>(planes: usize, h: usize, w: usize, dy: &[T], dx: &mut [T]) {
    let ow = 2 * w;
    for p in 0..planes {
        for iy in 0..h {
            for ix in 0..w {
                let top = (p * 2 * h + 2 * iy) * ow + 2 * ix;
                dx[(p * h + iy) * w + ix] += dy[top] + dy[top + 1] + dy[top + ow] + dy[top + ow + 1];
            }
        }
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
