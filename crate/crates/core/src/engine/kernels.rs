//! Raw forward/backward kernels over flat NCHW buffers.
//!
//! The tape wraps these with shape validation and gradient bookkeeping.
//! Every kernel visits output pixels in a fixed order, so results are
//! reproducible bit-for-bit.

use crate::engine::scalar::{matmul_acc, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Range of output columns `ox` whose input column `ox*stride + kj - pad`
    /// falls inside `[0, w)`.
    fn valid_range(&self, k: usize, out: usize, len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // lo = ceil(-off / s) clamped at 0, hi = floor((len-1-off)/s) + 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = len as isize - 1 - off;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let lo = lo.clamp(0, out as isize) as usize;
        let hi = hi.clamp(0, out as isize) as usize;
        (lo, hi.max(lo))
    }
}

/// Unfold one sample into rows of `cols` with leading dimension `ld`,
/// starting at column `off`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, off: usize) {
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(ki, g.ho, g.h);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld + off..row * ld + off + g.out_pixels()];
                let (ox_lo, ox_hi) = g.valid_range(kj, g.wo, g.w);
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    line[..ox_lo].fill(T::zero());
                    line[ox_hi..].fill(T::zero());
                    if g.stride == 1 {
                        let ix0 = ox_lo + kj - g.pad;
                        line[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            line[ox] = src[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T], ld: usize, off: usize) {
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(ki, g.ho, g.h);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld + off..row * ld + off + g.out_pixels()];
                let (ox_lo, ox_hi) = g.valid_range(kj, g.wo, g.w);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kj - g.pad;
                        for (d, &v) in dst[ix0..ix0 + (ox_hi - ox_lo)].iter_mut().zip(&line[ox_lo..ox_hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox * g.stride + kj - g.pad] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Samples are processed in groups whose unfolded width is about this many
/// columns: wide enough for efficient GEMM on coarse maps, small enough to
/// stay cache resident on fine ones.
const GROUP_COLUMNS: usize = 1024;

fn group_size(g: &ConvGeom) -> usize {
    (GROUP_COLUMNS / g.out_pixels().max(1)).clamp(1, g.n.max(1))
}

/// Samples `s0..s0+gs` unfolded side by side into `[cin*kh*kw, gs*ho*wo]`
/// (for pointwise convolutions, the channel-major view of the input).
fn group_columns<T: Scalar>(x: &[T], g: &ConvGeom, s0: usize, gs: usize, cols: &mut Vec<T>) {
    let npix = g.out_pixels();
    let in_size = g.cin * g.h * g.w;
    let xs = &x[s0 * in_size..(s0 + gs) * in_size];
    cols.resize(g.col_rows() * gs * npix, T::zero());
    if g.is_pointwise() {
        to_channel_major(xs, gs, g.cin, npix, cols);
        return;
    }
    for s in 0..gs {
        im2col(&xs[s * in_size..(s + 1) * in_size], g, cols, gs * npix, s * npix);
    }
}

/// `[n, c, p]` to `[c, n*p]`.
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize, out: &mut [T]) {
    for s in 0..n {
        for ch in 0..c {
            out[ch * n * p + s * p..ch * n * p + (s + 1) * p].copy_from_slice(&x[(s * c + ch) * p..(s * c + ch + 1) * p]);
        }
    }
}

/// `[c, n*p]` to `[n, c, p]`.
fn to_sample_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize, out: &mut [T]) {
    for s in 0..n {
        for ch in 0..c {
            out[(s * c + ch) * p..(s * c + ch + 1) * p].copy_from_slice(&x[ch * n * p + s * p..ch * n * p + (s + 1) * p]);
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let npix = g.out_pixels();
    let mut out = vec![T::zero(); g.n * g.cout * npix];
    let (mut cols, mut acc) = (Vec::new(), Vec::new());
    let group = group_size(g);
    for s0 in (0..g.n).step_by(group) {
        let gs = group.min(g.n - s0);
        let ld = gs * npix;
        group_columns(x, g, s0, gs, &mut cols);
        acc.clear();
        acc.resize(g.cout * ld, T::zero());
        if let Some(b) = bias {
            for (co, chunk) in acc.chunks_mut(ld).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        matmul_acc(g.cout, g.col_rows(), ld, weight, false, &cols, false, &mut acc, beta);
        to_sample_major(&acc, gs, g.cout, npix, &mut out[s0 * g.cout * npix..(s0 + gs) * g.cout * npix]);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    gout: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let npix = g.out_pixels();
    let rows = g.col_rows();
    let in_size = g.cin * g.h * g.w;
    let mut dx = need.0.then(|| vec![T::zero(); g.n * in_size]);
    let mut dw = need.1.then(|| vec![T::zero(); g.cout * rows]);
    let mut db = need.2.then(|| vec![T::zero(); g.cout]);
    let (mut cols, mut dcols, mut gcm) = (Vec::new(), Vec::new(), Vec::new());
    let group = group_size(g);
    for s0 in (0..g.n).step_by(group) {
        let gs = group.min(g.n - s0);
        let ld = gs * npix;
        gcm.resize(g.cout * ld, T::zero());
        to_channel_major(&gout[s0 * g.cout * npix..(s0 + gs) * g.cout * npix], gs, g.cout, npix, &mut gcm);
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gcm.chunks(ld).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            group_columns(x, g, s0, gs, &mut cols);
            // dW[cout, rows] += gout[cout, gs*npix] * cols[rows, gs*npix]^T
            matmul_acc(g.cout, ld, rows, &gcm, false, &cols, true, dw, T::one());
        }
        if let Some(dx) = dx.as_mut() {
            dcols.resize(rows * ld, T::zero());
            matmul_acc(rows, g.cout, ld, weight, true, &gcm, false, &mut dcols, T::zero());
            let dxs = &mut dx[s0 * in_size..(s0 + gs) * in_size];
            if g.is_pointwise() {
                to_sample_major(&dcols, gs, g.cin, npix, dxs);
            } else {
                for s in 0..gs {
                    col2im(&dcols, g, &mut dxs[s * in_size..(s + 1) * in_size], ld, s * npix);
                }
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Max pooling without padding. Returns the pooled values and, per output
/// element, the flat input index of the first maximum in its window.
pub(crate) fn max_pool_forward<T: Scalar>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
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
    (out, arg, ho, wo)
}

/// Interpolation taps for doubling one axis with the half-pixel
/// (align-corners = false) convention: `(i0, i1, w0, w1)` per output index.
fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|d| {
            let src = ((d as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn upsample_nearest_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for oy in 0..h2 {
            let row = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            for ox in 0..w2 {
                dst[oy * w2 + ox] = row[ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..h2 {
            for ox in 0..w2 {
                dst[(oy / 2) * w + ox / 2] += src[oy * w2 + ox];
            }
        }
    }
    dx
}

pub(crate) fn upsample_bilinear_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(wx0), T::from_f64(wx1));
                let top = src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx1;
                let bot = src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx1;
                dst[oy * w2 + ox] = top * wy0 + bot * wy1;
            }
        }
    }
    out
}

pub(crate) fn upsample_bilinear_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64(wy0), T::from_f64(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64(wx0), T::from_f64(wx1));
                let gv = src[oy * w2 + ox];
                dst[y0 * w + x0] += gv * wy0 * wx0;
                dst[y0 * w + x1] += gv * wy0 * wx1;
                dst[y1 * w + x0] += gv * wy1 * wx0;
                dst[y1 * w + x1] += gv * wy1 * wx1;
            }
        }
    }
    dx
}

/// Per-pixel softmax over the channel axis with max subtraction.
pub(crate) fn softmax_channels<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        let base = s * c * hw;
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(x[base + ch * hw + p]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x[base + ch * hw + p] - m).exp();
                out[base + ch * hw + p] = e;
                z += e;
            }
            for ch in 0..c {
                out[base + ch * hw + p] /= z;
            }
        }
    }
    out
}

pub(crate) fn softmax_channels_backward<T: Scalar>(y: &[T], g: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for s in 0..n {
        let base = s * c * hw;
        for p in 0..hw {
            let mut dot = T::zero();
            for ch in 0..c {
                let i = base + ch * hw + p;
                dot += g[i] * y[i];
            }
            for ch in 0..c {
                let i = base + ch * hw + p;
                dx[i] = y[i] * (g[i] - dot);
            }
        }
    }
    dx
}

/// Displacements in output-channel order: `dy` outer, `dx` inner, each
/// running from `-max_disp` to `max_disp`.
pub(crate) fn displacements(max_disp: usize) -> impl Iterator<Item = (isize, isize)> {
    let d = max_disp as isize;
    (-d..=d).flat_map(move |dy| (-d..=d).map(move |dx| (dy, dx)))
}

/// Overlap of a shift by `d` along an axis of length `len`: the range of
/// positions `p` with `p + d` also inside `[0, len)`.
fn overlap(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo.min(len), hi.max(lo.min(len)))
}

pub(crate) fn correlation_forward<T: Scalar>(
    f1: &[T],
    f2: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    max_disp: usize,
) -> Vec<T> {
    let nd = (2 * max_disp + 1).pow(2);
    let hw = h * w;
    let inv_c = T::one() / T::from_f64(c.max(1) as f64);
    let mut out = vec![T::zero(); n * nd * hw];
    for s in 0..n {
        let a = &f1[s * c * hw..(s + 1) * c * hw];
        let b = &f2[s * c * hw..(s + 1) * c * hw];
        for (di, (dy, dx)) in displacements(max_disp).enumerate() {
            let dst = &mut out[(s * nd + di) * hw..(s * nd + di + 1) * hw];
            let (y_lo, y_hi) = overlap(h, dy);
            let (x_lo, x_hi) = overlap(w, dx);
            for ch in 0..c {
                let pa = &a[ch * hw..(ch + 1) * hw];
                let pb = &b[ch * hw..(ch + 1) * hw];
                for y in y_lo..y_hi {
                    let yb = (y as isize + dy) as usize;
                    for x in x_lo..x_hi {
                        let xb = (x as isize + dx) as usize;
                        dst[y * w + x] += pa[y * w + x] * pb[yb * w + xb];
                    }
                }
            }
            for v in dst.iter_mut() {
                *v *= inv_c;
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
pub(crate) fn correlation_backward<T: Scalar>(
    f1: &[T],
    f2: &[T],
    g: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    max_disp: usize,
    need: (bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let nd = (2 * max_disp + 1).pow(2);
    let hw = h * w;
    let inv_c = T::one() / T::from_f64(c.max(1) as f64);
    let mut d1 = need.0.then(|| vec![T::zero(); f1.len()]);
    let mut d2 = need.1.then(|| vec![T::zero(); f2.len()]);
    for s in 0..n {
        let a = &f1[s * c * hw..(s + 1) * c * hw];
        let b = &f2[s * c * hw..(s + 1) * c * hw];
        for (di, (dy, dx)) in displacements(max_disp).enumerate() {
            let gs = &g[(s * nd + di) * hw..(s * nd + di + 1) * hw];
            let (y_lo, y_hi) = overlap(h, dy);
            let (x_lo, x_hi) = overlap(w, dx);
            for ch in 0..c {
                let off = s * c * hw + ch * hw;
                for y in y_lo..y_hi {
                    let yb = (y as isize + dy) as usize;
                    for x in x_lo..x_hi {
                        let xb = (x as isize + dx) as usize;
                        let gv = gs[y * w + x] * inv_c;
                        if let Some(d1) = d1.as_mut() {
                            d1[off + y * w + x] += gv * b[ch * hw + yb * w + xb];
                        }
                        if let Some(d2) = d2.as_mut() {
                            d2[off + yb * w + xb] += gv * a[ch * hw + y * w + x];
                        }
                    }
                }
            }
        }
    }
    (d1, d2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for &(len, out, k, stride, pad) in &[(5, 3, 0, 2, 1), (5, 3, 2, 2, 1), (4, 4, 2, 1, 1), (7, 4, 1, 2, 1), (3, 1, 2, 3, 2)] {
            let g = ConvGeom {
                n: 1, cin: 1, h: len, w: len, cout: 1, kh: 3, kw: 3, stride, pad, ho: out, wo: out,
            };
            let (lo, hi) = g.valid_range(k, out, len);
            for o in 0..out {
                let i = (o * stride + k) as isize - pad as isize;
                let inside = i >= 0 && (i as usize) < len;
                assert_eq!(inside, o >= lo && o < hi, "len {len} k {k} o {o}");
            }
        }
    }

    #[test]
    fn bilinear_taps_half_pixel() {
        let taps = bilinear_taps(3);
        // d=0 -> src clamped to 0
        assert_eq!(taps[0], (0, 1, 1.0, 0.0));
        // d=1 -> src 0.25
        assert_eq!(taps[1], (0, 1, 0.75, 0.25));
        // d=5 -> src 2.25, both taps on the last row
        assert_eq!((taps[5].0, taps[5].1), (2, 2));
    }
}
