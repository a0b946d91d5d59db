//! Direct, loop-based reference implementations used as test oracles.
//! Nothing here calls into the engine's kernels or the synthesis code.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscd_core::engine::Tensor;
use sscd_core::synthesis::{MorphOp, SegSample};
use sscd_core::{ChangeMask, LabelMap};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Distinct values at least `gap` apart, randomly permuted; keeps max-pool
/// windows and relu inputs away from kinks.
pub fn separated_vec(rng: &mut impl Rng, len: usize, gap: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|i| (i as f64 - len as f64 / 2.0) * gap + gap / 2.0).collect();
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    v
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                    * wt[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

pub fn max_pool(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), k: usize, s: usize) -> Vec<f64> {
    let ho = (h - k) / s + 1;
    let wo = (w - k) / s + 1;
    let mut out = Vec::new();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        m = m.max(x[p * h * w + (oy * s + dy) * w + ox * s + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Bilinear 2x upsampling written straight from the half-pixel mapping
/// `src = (dst + 0.5) / 2 - 0.5`, clamped at the borders.
pub fn upsample_bilinear(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let sample = |p: usize, yy: usize, xx: usize| x[p * h * w + yy * w + xx];
    for p in 0..planes {
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let sy = ((oy as f64 + 0.5) / 2.0 - 0.5).max(0.0);
                let sx = ((ox as f64 + 0.5) / 2.0 - 0.5).max(0.0);
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fy = sy - y0 as f64;
                let fx = sx - x0 as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * sample(p, y0, x0) + fx * sample(p, y0, x1))
                    + fy * ((1.0 - fx) * sample(p, y1, x0) + fx * sample(p, y1, x1));
                out.push(v);
            }
        }
    }
    out
}

pub fn softmax(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for p in 0..hw {
            let z: f64 = (0..c).map(|k| x[(b * c + k) * hw + p].exp()).sum();
            for k in 0..c {
                out[(b * c + k) * hw + p] = x[(b * c + k) * hw + p].exp() / z;
            }
        }
    }
    out
}

/// Five nested loops: batch, displacement, channel, row, column.
pub fn correlation(f1: &[f64], f2: &[f64], (n, c, h, w): (usize, usize, usize, usize), d: usize) -> Vec<f64> {
    let di = d as isize;
    let nd = (2 * d + 1) * (2 * d + 1);
    let mut out = vec![0.0; n * nd * h * w];
    for b in 0..n {
        let mut k = 0;
        for dy in -di..=di {
            for dx in -di..=di {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let (y2, x2) = (y + dy, x + dx);
                        let mut acc = 0.0;
                        if y2 >= 0 && x2 >= 0 && y2 < h as isize && x2 < w as isize {
                            for ch in 0..c {
                                acc += f1[((b * c + ch) * h + y as usize) * w + x as usize]
                                    * f2[((b * c + ch) * h + y2 as usize) * w + x2 as usize];
                            }
                        }
                        out[((b * nd + k) * h + y as usize) * w + x as usize] = acc / c as f64;
                    }
                }
                k += 1;
            }
        }
    }
    out
}

/// Binary cross-entropy written directly from the per-pixel definition.
pub fn bce(logits: &[f64], masks: &[Vec<u8>], hw: usize) -> f64 {
    let mut loss = 0.0;
    for (b, m) in masks.iter().enumerate() {
        for p in 0..hw {
            let l0 = logits[b * 2 * hw + p];
            let l1 = logits[b * 2 * hw + hw + p];
            let pc = (l1.exp() / (l0.exp() + l1.exp())).clamp(1e-7, 1.0 - 1e-7);
            let t = m[p] as f64;
            loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
    }
    loss
}

/// Two-sided cross-entropy with 1-of-K targets, from the definition.
pub fn split_ce(logits: &[f64], k: usize, t1: &[Vec<u8>], t2: &[Vec<u8>], hw: usize) -> f64 {
    let mut loss = 0.0;
    for b in 0..t1.len() {
        for (half, t) in [&t1[b], &t2[b]].into_iter().enumerate() {
            for p in 0..hw {
                let z: f64 = (0..k).map(|c| logits[(b * 2 * k + half * k + c) * hw + p].exp()).sum();
                for c in 0..k {
                    let onehot = if t[p] as usize == c { 1.0 } else { 0.0 };
                    let pr = logits[(b * 2 * k + half * k + c) * hw + p].exp() / z;
                    loss -= onehot * pr.clamp(1e-7, 1.0 - 1e-7).ln();
                }
            }
        }
    }
    loss
}

/// Binary erosion and dilation from the set definitions with the square
/// element `B = [-(k-1)/2, k/2]^2`: erosion keeps `x` iff `x + B` lies in the
/// mask (outside the grid counts as 0), dilation is the Minkowski sum
/// `m + B` clipped to the grid.
pub fn morph_min_max(m: &[u8], w: usize, h: usize, k: usize, take_max: bool) -> Vec<u8> {
    let lo = -(((k - 1) / 2) as isize);
    let hi = (k / 2) as isize;
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize;
    let mut out = vec![0u8; w * h];
    if take_max {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if m[y as usize * w + x as usize] == 0 {
                    continue;
                }
                for by in lo..=hi {
                    for bx in lo..=hi {
                        if inside(y + by, x + bx) {
                            out[(y + by) as usize * w + (x + bx) as usize] = 1;
                        }
                    }
                }
            }
        }
    } else {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let fits = (lo..=hi).all(|by| {
                    (lo..=hi).all(|bx| inside(y + by, x + bx) && m[(y + by) as usize * w + (x + bx) as usize] == 1)
                });
                out[y as usize * w + x as usize] = u8::from(fits);
            }
        }
    }
    out
}

pub fn seg(labels: LabelMap, shade: f32) -> SegSample {
    let image = Tensor::full(&[3, labels.height(), labels.width()], shade);
    SegSample::new(image, labels).unwrap()
}

pub fn random_labels(rng: &mut impl Rng, w: usize, h: usize, classes: &[u8]) -> LabelMap {
    let data = (0..w * h).map(|_| classes[rng.random_range(0..classes.len())]).collect();
    LabelMap::new(w, h, data).unwrap()
}


/// The sampling procedure written out directly: sorted present classes,
/// `n` uniform in `1..=min(n_max, N-1)`, then a partial Fisher-Yates pick,
/// side 1 before side 2.
pub fn reference_synthesis(l1: &LabelMap, l2: &LabelMap, n_max: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let mut kept = Vec::new();
    for l in [l1, l2] {
        let present: BTreeSet<u8> = l.data().iter().copied().filter(|&c| c != 0 && c != 255).collect();
        let mut pool: Vec<u8> = present.into_iter().collect();
        let n = rng.random_range(1..=n_max.min(pool.len() - 1));
        for j in 0..n {
            let r = rng.random_range(j..pool.len());
            pool.swap(j, r);
        }
        pool.truncate(n);
        let mut out = Vec::new();
        for &v in l.data() {
            out.push(if pool.contains(&v) { v } else { 0 });
        }
        kept.push(out);
    }
    let mask = (0..kept[0].len()).map(|i| u8::from(kept[0][i] != 0 || kept[1][i] != 0)).collect();
    (kept.remove(0), kept.remove(0), mask)
}


pub fn random_mask(rng: &mut impl Rng, w: usize, h: usize, p: f64) -> ChangeMask {
    ChangeMask::new(w, h, (0..w * h).map(|_| u8::from(rng.random_bool(p))).collect()).unwrap()
}

pub fn morph_oracle(m: &ChangeMask, op: MorphOp, k: usize) -> Vec<u8> {
    let (w, h) = (m.width(), m.height());
    let er = |d: &[u8]| morph_min_max(d, w, h, k, false);
    let di = |d: &[u8]| morph_min_max(d, w, h, k, true);
    match op {
        MorphOp::Erosion => er(m.data()),
        MorphOp::Dilation => di(m.data()),
        MorphOp::Opening => di(&er(m.data())),
        MorphOp::Closing => er(&di(m.data())),
    }
}
