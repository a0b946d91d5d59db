use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::maps::ChangeMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MorphOp {
    Erosion,
    Dilation,
    /// `dilate(erode(m))`
    Opening,
    /// `erode(dilate(m))`
    Closing,
}

impl MorphOp {
    pub const ALL: [MorphOp; 4] = [MorphOp::Erosion, MorphOp::Dilation, MorphOp::Opening, MorphOp::Closing];

    pub fn as_str(self) -> &'static str {
        match self {
            MorphOp::Erosion => "erosion",
            MorphOp::Dilation => "dilation",
            MorphOp::Opening => "opening",
            MorphOp::Closing => "closing",
        }
    }
}

impl fmt::Display for MorphOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MorphOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MorphOp::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown morphological op `{s}`")))
    }
}

/// Inclusive-exclusive prefix sums over a binary grid, `(h + 1) x (w + 1)`.
struct Integral {
    w: usize,
    h: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(m: &ChangeMask) -> Self {
        let (w, h) = (m.width(), m.height());
        let mut sums = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += m.data()[y * w + x] as u32;
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Integral { w, h, sums }
    }

    /// Ones inside rows `y0..=y1`, columns `x0..=x1`, clipped to the grid.
    fn count(&self, y0: isize, y1: isize, x0: isize, x1: isize) -> u32 {
        let clip = |v: isize, n: usize| v.clamp(0, n as isize) as usize;
        let (ya, yb) = (clip(y0, self.h), clip(y1 + 1, self.h));
        let (xa, xb) = (clip(x0, self.w), clip(x1 + 1, self.w));
        if ya >= yb || xa >= xb {
            return 0;
        }
        let s = |y: usize, x: usize| self.sums[y * (self.w + 1) + x];
        s(yb, xb) + s(ya, xa) - s(ya, xb) - s(yb, xa)
    }
}

/// Square element offsets `lo..=hi` along each axis.
fn element(k: usize) -> (isize, isize) {
    (-(((k - 1) / 2) as isize), (k / 2) as isize)
}

fn erode(m: &ChangeMask, k: usize) -> ChangeMask {
    let (lo, hi) = element(k);
    let ii = Integral::new(m);
    let (w, h) = (m.width() as isize, m.height() as isize);
    let full = (k * k) as u32;
    ChangeMask::from_fn(m.width(), m.height(), |y, x| {
        let (y, x) = (y as isize, x as isize);
        y + lo >= 0 && x + lo >= 0 && y + hi < h && x + hi < w && ii.count(y + lo, y + hi, x + lo, x + hi) == full
    })
}

fn dilate(m: &ChangeMask, k: usize) -> ChangeMask {
    let (lo, hi) = element(k);
    let ii = Integral::new(m);
    ChangeMask::from_fn(m.width(), m.height(), |y, x| {
        let (y, x) = (y as isize, x as isize);
        ii.count(y - hi, y - lo, x - hi, x - lo) > 0
    })
}

/// Binary morphology with a filled `k x k` square. The element spans
/// offsets `-(k-1)/2 ..= k/2`; pixels outside the grid count as 0.
///
/// # Panics
/// If `k == 0`.
pub fn morph_transform(mask: &ChangeMask, op: MorphOp, k: usize) -> ChangeMask {
    assert!(k >= 1, "structuring element size must be >= 1");
    if k == 1 {
        return mask.clone();
    }
    match op {
        MorphOp::Erosion => erode(mask, k),
        MorphOp::Dilation => dilate(mask, k),
        MorphOp::Opening => dilate(&erode(mask, k), k),
        MorphOp::Closing => erode(&dilate(mask, k), k),
    }
}

/// Random change-mask corruption used while training the semantic labeler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub kernel_min: usize,
    pub kernel_max: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: false,
            kernel_min: 1,
            kernel_max: 20,
        }
    }
}

impl AugmentConfig {
    pub fn enabled() -> Self {
        AugmentConfig {
            enabled: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_min < 1 || self.kernel_min > self.kernel_max {
            return Err(Error::Config(format!(
                "augmentation kernel range {}..={} must satisfy 1 <= min <= max",
                self.kernel_min, self.kernel_max
            )));
        }
        Ok(())
    }
}

/// One uniformly drawn transform and kernel size. Draws nothing when
/// disabled.
pub fn draw_augmentation(cfg: &AugmentConfig, rng: &mut impl Rng) -> Option<(MorphOp, usize)> {
    if !cfg.enabled {
        return None;
    }
    let op = MorphOp::ALL[rng.random_range(0..4)];
    let k = rng.random_range(cfg.kernel_min..=cfg.kernel_max);
    Some((op, k))
}

pub fn augment_mask(mask: &ChangeMask, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<ChangeMask> {
    cfg.validate()?;
    Ok(match draw_augmentation(cfg, rng) {
        Some((op, k)) => morph_transform(mask, op, k),
        None => mask.clone(),
    })
}
