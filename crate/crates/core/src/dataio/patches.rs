//! Sliding-window crops of panoramic pairs, resized and rotated.

use std::fmt;
use std::str::FromStr;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::maps::{ChangeMask, LabelMap};

/// Two aligned images of one scene, the ground-truth change mask and,
/// optionally, semantic change labels for each time point.
#[derive(Clone, Debug, PartialEq)]
pub struct PanoramaPair {
    pub id: String,
    pub i1: Tensor,
    pub i2: Tensor,
    pub mask: ChangeMask,
    pub labels: Option<(LabelMap, LabelMap)>,
}

impl PanoramaPair {
    pub fn new(id: impl Into<String>, i1: Tensor, i2: Tensor, mask: ChangeMask, labels: Option<(LabelMap, LabelMap)>) -> Result<Self> {
        let (w, h) = (mask.width(), mask.height());
        for (name, t) in [("I1", &i1), ("I2", &i2)] {
            if t.shape() != [3, h, w] {
                return Err(Error::shape("PanoramaPair", format!("{name} is {:?}, mask is {w}x{h}", t.shape())));
            }
        }
        if let Some((a, b)) = &labels {
            if !a.same_size(w, h) || !b.same_size(w, h) {
                return Err(Error::shape("PanoramaPair", "label maps differ in size from the mask"));
            }
        }
        Ok(PanoramaPair {
            id: id.into(),
            i1,
            i2,
            mask,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }
}

/// Clockwise rotation by a multiple of 90 degrees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn degrees(self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }

    pub fn from_degrees(deg: u32) -> Result<Self> {
        Rotation::ALL
            .into_iter()
            .find(|r| r.degrees() == deg % 360)
            .filter(|_| deg.is_multiple_of(90))
            .ok_or_else(|| Error::Config(format!("rotation must be a multiple of 90 degrees, got {deg}")))
    }

    pub fn then(self, other: Rotation) -> Rotation {
        Rotation::from_degrees(self.degrees() + other.degrees()).expect("multiple of 90")
    }

    /// Source coordinates of output pixel `(y, x)` in an `n x n` square.
    fn source(self, n: usize, y: usize, x: usize) -> (usize, usize) {
        match self {
            Rotation::R0 => (y, x),
            Rotation::R90 => (n - 1 - x, y),
            Rotation::R180 => (n - 1 - y, n - 1 - x),
            Rotation::R270 => (x, n - 1 - y),
        }
    }

    /// Where input pixel `(y, x)` lands.
    pub fn forward(self, n: usize, y: usize, x: usize) -> (usize, usize) {
        match self {
            Rotation::R0 => (y, x),
            Rotation::R90 => (x, n - 1 - y),
            Rotation::R180 => (n - 1 - y, n - 1 - x),
            Rotation::R270 => (n - 1 - x, y),
        }
    }

    /// Rotate every `n x n` plane of a row-major buffer.
    pub fn apply<T: Copy>(self, planes: &[T], n: usize) -> Vec<T> {
        if self == Rotation::R0 {
            return planes.to_vec();
        }
        let mut out = Vec::with_capacity(planes.len());
        for plane in planes.chunks(n * n) {
            for y in 0..n {
                for x in 0..n {
                    let (sy, sx) = self.source(n, y, x);
                    out.push(plane[sy * n + sx]);
                }
            }
        }
        out
    }
}

impl fmt::Display for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.degrees())
    }
}

impl FromStr for Rotation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let deg: u32 = s.trim().parse().map_err(|_| Error::Config(format!("bad rotation `{s}`")))?;
        Rotation::from_degrees(deg)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub crop: usize,
    pub out: usize,
    pub crops_per_image: usize,
    pub rotations: Vec<Rotation>,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            crop: 224,
            out: 256,
            crops_per_image: 30,
            rotations: Rotation::ALL.to_vec(),
        }
    }
}

impl PatchConfig {
    /// One full-frame crop per pair, unrotated: toy pairs are already at
    /// training resolution.
    pub fn identity(size: usize) -> Self {
        PatchConfig {
            crop: size,
            out: size,
            crops_per_image: 1,
            rotations: vec![Rotation::R0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.out == 0 || self.crops_per_image == 0 || self.rotations.is_empty() {
            return Err(Error::Config("patch crop, output size, crop count and rotations must be non-empty".into()));
        }
        Ok(())
    }
}

/// Evenly spaced horizontal offsets `round(j * (W - crop) / (count - 1))`;
/// a single crop sits at 0.
pub fn crop_offsets(width: usize, crop: usize, count: usize) -> Result<Vec<usize>> {
    if crop > width {
        return Err(Error::invalid("extract_patches", format!("crop {crop} exceeds panorama width {width}")));
    }
    if count <= 1 {
        return Ok(vec![0; count]);
    }
    let span = (width - crop) as f64;
    Ok((0..count).map(|j| (j as f64 * span / (count - 1) as f64).round() as usize).collect())
}

/// Where a patch came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchSource {
    pub pair_id: String,
    pub offset: usize,
    pub rotation: Rotation,
}

impl PatchSource {
    /// One manifest line: `pair_id offset rotation`.
    pub fn manifest_line(&self) -> String {
        format!("{} {} {}", self.pair_id, self.offset, self.rotation)
    }

    pub fn parse_manifest_line(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [id, off, rot] = parts.as_slice() else {
            return Err(Error::Config(format!("manifest line `{line}`: expected `pair_id offset rotation`")));
        };
        Ok(PatchSource {
            pair_id: id.to_string(),
            offset: off.parse().map_err(|_| Error::Config(format!("bad offset in `{line}`")))?,
            rotation: rot.parse()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub source: PatchSource,
    pub i1: Tensor,
    pub i2: Tensor,
    pub mask: ChangeMask,
    pub labels: Option<(LabelMap, LabelMap)>,
}

/// Half-pixel source coordinate taps for resampling `len` to `out`.
fn linear_taps(len: usize, out: usize) -> Vec<(usize, usize, f32)> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

fn nearest_taps(len: usize, out: usize) -> Vec<usize> {
    (0..out)
        .map(|d| (((d as f64 + 0.5) * len as f64 / out as f64).floor() as usize).min(len - 1))
        .collect()
}

/// Bilinear resize of a `[c, crop, crop]` window at `(top, left)` of a
/// `[c, h, w]` buffer to `[c, out, out]`.
fn resize_bilinear(src: &[f32], c: usize, w: usize, h: usize, (top, left): (usize, usize), crop: usize, out: usize) -> Vec<f32> {
    let taps = linear_taps(crop, out);
    let mut dst = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &taps {
            let r0 = &plane[(top + y0) * w + left..];
            let r1 = &plane[(top + y1) * w + left..];
            for &(x0, x1, fx) in &taps {
                let a = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let b = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst.push(a + (b - a) * fy);
            }
        }
    }
    dst
}

fn resize_nearest(src: &[u8], w: usize, (top, left): (usize, usize), crop: usize, out: usize) -> Vec<u8> {
    let taps = nearest_taps(crop, out);
    let mut dst = Vec::with_capacity(out * out);
    for &sy in &taps {
        for &sx in &taps {
            dst.push(src[(top + sy) * w + left + sx]);
        }
    }
    dst
}

struct Resized {
    i1: Vec<f32>,
    i2: Vec<f32>,
    mask: Vec<u8>,
    labels: Option<(Vec<u8>, Vec<u8>)>,
}

/// Lazily rendered patches of one pair in (offset, rotation) order. Each
/// crop is resized once and then rotated by index permutation.
pub struct Patches<'a> {
    pair: &'a PanoramaPair,
    cfg: &'a PatchConfig,
    offsets: Vec<usize>,
    top: usize,
    next: usize,
    current: Option<Resized>,
}

impl<'a> Patches<'a> {
    pub fn sources(&self) -> impl Iterator<Item = PatchSource> + '_ {
        self.offsets.iter().flat_map(move |&offset| {
            self.cfg.rotations.iter().map(move |&rotation| PatchSource {
                pair_id: self.pair.id.clone(),
                offset,
                rotation,
            })
        })
    }

    fn resize(&self, offset: usize) -> Resized {
        let (w, h) = (self.pair.width(), self.pair.height());
        let at = (self.top, offset);
        let (crop, out) = (self.cfg.crop, self.cfg.out);
        Resized {
            i1: resize_bilinear(self.pair.i1.data(), 3, w, h, at, crop, out),
            i2: resize_bilinear(self.pair.i2.data(), 3, w, h, at, crop, out),
            mask: resize_nearest(self.pair.mask.data(), w, at, crop, out),
            labels: self.pair.labels.as_ref().map(|(a, b)| {
                (resize_nearest(a.data(), w, at, crop, out), resize_nearest(b.data(), w, at, crop, out))
            }),
        }
    }
}

impl Iterator for Patches<'_> {
    type Item = Patch;

    fn next(&mut self) -> Option<Patch> {
        let nrot = self.cfg.rotations.len();
        if self.next >= self.offsets.len() * nrot {
            return None;
        }
        let (j, r) = (self.next / nrot, self.next % nrot);
        if r == 0 {
            self.current = Some(self.resize(self.offsets[j]));
        }
        self.next += 1;
        let cur = self.current.as_ref().expect("resized crop");
        let rot = self.cfg.rotations[r];
        let n = self.cfg.out;
        let image = |v: &[f32]| Tensor::new(vec![3, n, n], rot.apply(v, n)).expect("3 planes");
        let map = |v: &[u8]| LabelMap::new(n, n, rot.apply(v, n)).expect("one plane");
        Some(Patch {
            source: PatchSource {
                pair_id: self.pair.id.clone(),
                offset: self.offsets[j],
                rotation: rot,
            },
            i1: image(&cur.i1),
            i2: image(&cur.i2),
            mask: ChangeMask::new(n, n, rot.apply(&cur.mask, n)).expect("binary"),
            labels: cur.labels.as_ref().map(|(a, b)| (map(a), map(b))),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.offsets.len() * self.cfg.rotations.len() - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for Patches<'_> {}

/// `crops_per_image` evenly spaced `crop x crop` windows (vertically
/// centered), each resized to `out x out` (bilinear for images, nearest
/// for masks and labels) and emitted once per rotation.
pub fn extract_patches<'a>(pair: &'a PanoramaPair, cfg: &'a PatchConfig) -> Result<Patches<'a>> {
    cfg.validate()?;
    if cfg.crop > pair.height() {
        return Err(Error::invalid(
            "extract_patches",
            format!("crop {} exceeds panorama height {}", cfg.crop, pair.height()),
        ));
    }
    let offsets = crop_offsets(pair.width(), cfg.crop, cfg.crops_per_image)?;
    Ok(Patches {
        pair,
        cfg,
        offsets,
        top: (pair.height() - cfg.crop) / 2,
        next: 0,
        current: None,
    })
}
