//! Forward and backward kernels over flat buffers, one batch element at a time.

use super::{gemm, MatView, Scalar};

/// Geometry of a zero-padded square-stride convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Rows of the unfolded input (`in_c * kh * kw`).
    pub fn k(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    /// Output positions per channel.
    pub fn p(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1x1 stride-1 unpadded convolution is a plain matrix product.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output indices `o` with `o * stride + k - pad` inside `[0, len)`.
    fn valid_range(&self, k: usize, len: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        let hi = if len + self.pad > k {
            (len + self.pad - k).div_ceil(s)
        } else {
            0
        };
        (lo.min(out), hi.min(out).max(lo.min(out)))
    }
}

fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, col: &mut [S]) {
    let p = g.p();
    for ci in 0..g.in_c {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ky, g.in_h, g.out_h);
            for kx in 0..g.kw {
                let (xlo, xhi) = g.valid_range(kx, g.in_w, g.out_w);
                let row = &mut col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                row[..ylo * g.out_w].fill(S::zero());
                row[yhi * g.out_w..].fill(S::zero());
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    dst[..xlo].fill(S::zero());
                    dst[xhi..].fill(S::zero());
                    if g.stride == 1 {
                        let off = xlo + kx - g.pad;
                        dst[xlo..xhi].copy_from_slice(&src[off..off + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            dst[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(col: &[S], g: &ConvGeom, dx: &mut [S]) {
    let p = g.p();
    for ci in 0..g.in_c {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ky, g.in_h, g.out_h);
            for kx in 0..g.kw {
                let (xlo, xhi) = g.valid_range(kx, g.in_w, g.out_w);
                let row = &col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let src = &row[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let off = xlo + kx - g.pad;
                        for (d, s) in dst[off..off + (xhi - xlo)].iter_mut().zip(&src[xlo..xhi]) {
                            *d += *s;
                        }
                    } else {
                        for ox in xlo..xhi {
                            dst[ox * g.stride + kx - g.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out` (one batch element, `out_c * p`) = weight * unfold(x) + bias.
pub(crate) fn conv_forward<S: Scalar>(
    x: &[S],
    weight: &[S],
    bias: Option<&[S]>,
    g: &ConvGeom,
    scratch: &mut Vec<S>,
    out: &mut [S],
) {
    let (k, p) = (g.k(), g.p());
    let col: &[S] = if g.is_pointwise() {
        x
    } else {
        scratch.resize(k * p, S::zero());
        im2col(x, g, scratch);
        scratch
    };
    gemm(
        g.out_c,
        k,
        p,
        weight,
        MatView::row_major(k),
        col,
        MatView::row_major(p),
        S::zero(),
        out,
        MatView::row_major(p),
    );
    if let Some(b) = bias {
        for (o, &bo) in b.iter().enumerate() {
            for v in &mut out[o * p..(o + 1) * p] {
                *v += bo;
            }
        }
    }
}

/// Accumulates gradients of one batch element into `dx`, `dw`, `db`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<S: Scalar>(
    x: &[S],
    weight: &[S],
    gout: &[S],
    g: &ConvGeom,
    scratch: &mut Vec<S>,
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
    db: Option<&mut [S]>,
) {
    let (k, p) = (g.k(), g.p());
    if let Some(db) = db {
        for (o, d) in db.iter_mut().enumerate() {
            *d += gout[o * p..(o + 1) * p].iter().copied().sum::<S>();
        }
    }
    if let Some(dw) = dw {
        let col: &[S] = if g.is_pointwise() {
            x
        } else {
            scratch.resize(k * p, S::zero());
            im2col(x, g, scratch);
            scratch
        };
        // dw (out_c x k) += gout (out_c x p) * col^T (p x k)
        gemm(
            g.out_c,
            p,
            k,
            gout,
            MatView::row_major(p),
            col,
            MatView::col_major(p),
            S::one(),
            dw,
            MatView::row_major(k),
        );
    }
    if let Some(dx) = dx {
        // dcol (k x p) = weight^T (k x out_c) * gout (out_c x p)
        if g.is_pointwise() {
            gemm(
                k,
                g.out_c,
                p,
                weight,
                MatView::col_major(k),
                gout,
                MatView::row_major(p),
                S::one(),
                dx,
                MatView::row_major(p),
            );
        } else {
            scratch.resize(k * p, S::zero());
            gemm(
                k,
                g.out_c,
                p,
                weight,
                MatView::col_major(k),
                gout,
                MatView::row_major(p),
                S::zero(),
                scratch,
                MatView::row_major(p),
            );
            col2im_add(scratch, g, dx);
        }
    }
}

/// Half-open window `[floor(i*len/out), ceil((i+1)*len/out))` of adaptive pooling.
#[inline]
pub(crate) fn pool_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// One channel plane.
pub(crate) fn adaptive_pool_forward<S: Scalar>(
    x: &[S],
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    out: &mut [S],
) {
    for oy in 0..oh {
        let (y0, y1) = pool_window(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1) = pool_window(ox, w, ow);
            let mut acc = S::zero();
            for y in y0..y1 {
                acc += x[y * w + x0..y * w + x1].iter().copied().sum::<S>();
            }
            out[oy * ow + ox] = acc / S::lit(((y1 - y0) * (x1 - x0)) as f64);
        }
    }
}

pub(crate) fn adaptive_pool_backward<S: Scalar>(
    gout: &[S],
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [S],
) {
    for oy in 0..oh {
        let (y0, y1) = pool_window(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1) = pool_window(ox, w, ow);
            let share = gout[oy * ow + ox] / S::lit(((y1 - y0) * (x1 - x0)) as f64);
            for y in y0..y1 {
                for d in &mut dx[y * w + x0..y * w + x1] {
                    *d += share;
                }
            }
        }
    }
}

/// Per output coordinate: the two source taps and the weight of the second.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<S> {
    pub i0: usize,
    pub i1: usize,
    pub frac: S,
}

/// Half-pixel-center sampling: `src = (dst + 0.5) * in/out - 0.5`, clamped.
pub(crate) fn resize_taps<S: Scalar>(len_in: usize, len_out: usize) -> Vec<Tap<S>> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len_in - 1);
            Tap {
                i0,
                i1,
                frac: S::lit(src - i0 as f64),
            }
        })
        .collect()
}

pub(crate) fn resize_forward<S: Scalar>(x: &[S], w: usize, ty: &[Tap<S>], tx: &[Tap<S>], out: &mut [S]) {
    let ow = tx.len();
    for (oy, yt) in ty.iter().enumerate() {
        let r0 = &x[yt.i0 * w..(yt.i0 + 1) * w];
        let r1 = &x[yt.i1 * w..(yt.i1 + 1) * w];
        let (wy0, wy1) = (S::one() - yt.frac, yt.frac);
        for (ox, xt) in tx.iter().enumerate() {
            let (wx0, wx1) = (S::one() - xt.frac, xt.frac);
            let top = r0[xt.i0] * wx0 + r0[xt.i1] * wx1;
            let bot = r1[xt.i0] * wx0 + r1[xt.i1] * wx1;
            out[oy * ow + ox] = top * wy0 + bot * wy1;
        }
    }
}

pub(crate) fn resize_backward<S: Scalar>(gout: &[S], w: usize, ty: &[Tap<S>], tx: &[Tap<S>], dx: &mut [S]) {
    let ow = tx.len();
    for (oy, yt) in ty.iter().enumerate() {
        let (wy0, wy1) = (S::one() - yt.frac, yt.frac);
        for (ox, xt) in tx.iter().enumerate() {
            let g = gout[oy * ow + ox];
            let (wx0, wx1) = (S::one() - xt.frac, xt.frac);
            dx[yt.i0 * w + xt.i0] += g * wy0 * wx0;
            dx[yt.i0 * w + xt.i1] += g * wy0 * wx1;
            dx[yt.i1 * w + xt.i0] += g * wy1 * wx0;
            dx[yt.i1 * w + xt.i1] += g * wy1 * wx1;
        }
    }
}
