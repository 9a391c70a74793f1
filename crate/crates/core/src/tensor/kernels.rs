//! Image kernels shared by the forward and backward passes.

use super::matmul_raw;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Some(ConvGeom { c, h, w, kh, kw, stride, pad, ho, wo })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// `[C*kh*kw, ho*wo]` patch matrix of one image.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy as usize >= g.h {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix as usize >= g.w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds patch gradients into the image.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y[n] = W · cols(x[n]) + b` for a batch; `w` is `[O, C*kh*kw]`.
pub(crate) fn conv_forward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    o: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (in_len, hw, rows) = (g.c * g.h * g.w, g.ho * g.wo, g.col_rows());
    let mut y = vec![T::zero(); n * o * hw];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * hw] };
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let patches: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let yb = &mut y[b * o * hw..(b + 1) * o * hw];
        matmul_raw(w, (o, rows), false, patches, (rows, hw), false, yb, false);
        if let Some(bias) = bias {
            for (oc, &bv) in bias.iter().enumerate() {
                yb[oc * hw..(oc + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

/// Gradients of [`conv_forward`] w.r.t. input (if requested), weight and bias.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    o: usize,
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (in_len, hw, rows) = (g.c * g.h * g.w, g.ho * g.wo, g.col_rows());
    let mut dx = want_dx.then(|| vec![T::zero(); n * in_len]);
    let mut dw = vec![T::zero(); o * rows];
    let mut db = vec![T::zero(); o];
    let mut cols = vec![T::zero(); rows * hw];
    for b in 0..n {
        let dyb = &dy[b * o * hw..(b + 1) * o * hw];
        for (oc, d) in db.iter_mut().enumerate() {
            *d += dyb[oc * hw..(oc + 1) * hw].iter().copied().sum();
        }
        let xb = &x[b * in_len..(b + 1) * in_len];
        if want_dw {
            let patches: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            matmul_raw(dyb, (o, hw), false, patches, (rows, hw), true, &mut dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                matmul_raw(w, (o, rows), true, dyb, (o, hw), false, dxb, true);
            } else {
                matmul_raw(w, (o, rows), true, dyb, (o, hw), false, &mut cols, false);
                col2im(&cols, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// 2x2 stride-2 transposed convolution; `w` is `[C, O, 2, 2]`.
pub(crate) fn conv_t_forward<T: Real>(
    x: &[T],
    (n, c, h, wd): (usize, usize, usize, usize),
    w: &[T],
    o: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let hw = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut y = vec![T::zero(); n * o * oh * ow];
    let mut tmp = vec![T::zero(); o * 4 * hw];
    for b in 0..n {
        let xb = &x[b * c * hw..(b + 1) * c * hw];
        matmul_raw(w, (c, o * 4), true, xb, (c, hw), false, &mut tmp, false);
        let yb = &mut y[b * o * oh * ow..(b + 1) * o * oh * ow];
        for oc in 0..o {
            let bv = bias.map_or(T::zero(), |bs| bs[oc]);
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &tmp[(oc * 4 + a * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        for j in 0..wd {
                            yb[(oc * oh + 2 * i + a) * ow + 2 * j + bb] = row[i * wd + j] + bv;
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t_backward<T: Real>(
    x: &[T],
    (n, c, h, wd): (usize, usize, usize, usize),
    w: &[T],
    o: usize,
    dy: &[T],
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let hw = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut dx = want_dx.then(|| vec![T::zero(); n * c * hw]);
    let mut dw = vec![T::zero(); c * o * 4];
    let mut db = vec![T::zero(); o];
    let mut dtmp = vec![T::zero(); o * 4 * hw];
    for b in 0..n {
        let dyb = &dy[b * o * oh * ow..(b + 1) * o * oh * ow];
        for oc in 0..o {
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &mut dtmp[(oc * 4 + a * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        for j in 0..wd {
                            let g = dyb[(oc * oh + 2 * i + a) * ow + 2 * j + bb];
                            row[i * wd + j] = g;
                            db[oc] += g;
                        }
                    }
                }
            }
        }
        let xb = &x[b * c * hw..(b + 1) * c * hw];
        matmul_raw(xb, (c, hw), false, &dtmp, (o * 4, hw), true, &mut dw, true);
        if let Some(dx) = dx.as_mut() {
            matmul_raw(w, (c, o * 4), false, &dtmp, (o * 4, hw), false, &mut dx[b * c * hw..(b + 1) * c * hw], true);
        }
    }
    (dx, dw, db)
}

/// 2x2 stride-2 max pooling over `[N*C]` planes; returns values and flat argmax.
pub(crate) fn max_pool2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * i + di) * w + 2 * j + dj;
                    if x[k] > x[best] {
                        best = k;
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

pub(crate) fn upsample2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                y[(p * oh + i) * ow + j] = x[(p * h + i / 2) * w + j / 2];
            }
        }
    }
    y
}

pub(crate) fn upsample2_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                dx[(p * h + i / 2) * w + j / 2] += dy[(p * oh + i) * ow + j];
            }
        }
    }
    dx
}
