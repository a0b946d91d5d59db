//! Procedural scenes of colored rectangles and discs on a textured
//! background, with ground truth that is exact by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::palette::Palette;
use crate::dataio::patches::PanoramaPair;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::maps::{ChangeMask, LabelMap};
use crate::synthesis::{SegSample, NO_CHANGE};

const NOISE: f32 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rect { top: f32, left: f32, height: f32, width: f32 },
    Disc { cy: f32, cx: f32, r: f32 },
}

impl Shape {
    /// Whether the center of pixel `(y, x)` lies inside.
    pub fn contains(&self, y: isize, x: isize) -> bool {
        let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
        match *self {
            Shape::Rect {
                top,
                left,
                height,
                width,
            } => py >= top && py < top + height && px >= left && px < left + width,
            Shape::Disc { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
        }
    }
}

/// A shape with its class at each time point; `None` means absent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub before: Option<u8>,
    pub after: Option<u8>,
}

impl Primitive {
    pub fn fixed(shape: Shape, class: u8) -> Self {
        Primitive {
            shape,
            before: Some(class),
            after: Some(class),
        }
    }
}

/// A fully specified two-time scene. Later primitives are drawn on top.
/// `shift` moves the second image's content right by that many pixels;
/// masks and labels stay in the first image's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub shift: isize,
    pub primitives: Vec<Primitive>,
}

/// Rendered images with scene labels (`seg0`, `seg1`), the change mask and
/// the semantic change labels (`change0`, `change1`, no-change outside the
/// mask).
#[derive(Clone, Debug, PartialEq)]
pub struct ToyPair {
    pub i1: Tensor,
    pub i2: Tensor,
    pub mask: ChangeMask,
    pub seg0: LabelMap,
    pub seg1: LabelMap,
    pub change0: LabelMap,
    pub change1: LabelMap,
}

impl ToyPair {
    pub fn into_pair(self, id: impl Into<String>) -> PanoramaPair {
        PanoramaPair::new(id, self.i1, self.i2, self.mask, Some((self.change0, self.change1))).expect("consistent sizes")
    }
}

fn class_colors(k: usize) -> Vec<[f32; 3]> {
    let palette = Palette::default_for(k);
    (0..k)
        .map(|c| {
            let rgb = palette.get(c as u8).unwrap_or([0, 0, 0]);
            rgb.map(|v| v as f32 / 127.5 - 1.0)
        })
        .collect()
}

impl ToyScene {
    fn class_at(&self, after: bool, y: isize, x: isize) -> (u8, Option<usize>) {
        for (i, p) in self.primitives.iter().enumerate().rev() {
            let class = if after { p.after } else { p.before };
            if let Some(c) = class {
                if p.shape.contains(y, x) {
                    return (c, Some(i));
                }
            }
        }
        (NO_CHANGE, None)
    }

    /// Background texture in scene coordinates, identical at both times.
    fn texture(&self, ch: usize, y: isize, x: isize) -> f32 {
        let phase = (self.seed % 997) as f32 * 0.37 + ch as f32 * 1.3;
        let (y, x) = (y as f32, x as f32);
        -0.35 + 0.15 * (0.45 * x + phase).sin() * (0.3 * y - phase).cos() + 0.08 * (0.11 * (x + 2.0 * y) + ch as f32).sin()
    }

    fn render_image(&self, after: bool, colors: &[[f32; 3]], rng: &mut ChaCha8Rng) -> Tensor {
        let (w, h) = (self.width, self.height);
        let shift = if after { self.shift } else { 0 };
        let mut data = vec![0f32; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as isize, x as isize - shift);
                let (class, prim) = self.class_at(after, sy, sx);
                for ch in 0..3 {
                    let base = match prim {
                        Some(i) => {
                            let shade = 0.9 + 0.1 * ((i * 7919) % 11) as f32 / 10.0;
                            colors[class as usize][ch] * shade
                        }
                        None => self.texture(ch, sy, sx),
                    };
                    let noise = rng.random_range(-NOISE..=NOISE);
                    data[(ch * h + y) * w + x] = (base + noise).clamp(-1.0, 1.0);
                }
            }
        }
        Tensor::new(vec![3, h, w], data).expect("3 planes")
    }

    fn labels(&self, after: bool) -> LabelMap {
        let (w, h) = (self.width, self.height);
        let data = (0..w * h).map(|i| self.class_at(after, (i / w) as isize, (i % w) as isize).0).collect();
        LabelMap::new(w, h, data).expect("sized")
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("toy scenes need 2..=255 classes, got {}", self.num_classes)));
        }
        let bad = self
            .primitives
            .iter()
            .flat_map(|p| [p.before, p.after])
            .flatten()
            .find(|&c| c == NO_CHANGE || c as usize >= self.num_classes);
        if let Some(c) = bad {
            return Err(Error::Config(format!("primitive class {c} must be in 1..{}", self.num_classes)));
        }
        Ok(())
    }

    pub fn render(&self) -> Result<ToyPair> {
        self.validate()?;
        let colors = class_colors(self.num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let i1 = self.render_image(false, &colors, &mut rng);
        let i2 = self.render_image(true, &colors, &mut rng);
        let seg0 = self.labels(false);
        let seg1 = self.labels(true);
        let (w, h) = (self.width, self.height);
        let mask = ChangeMask::from_fn(w, h, |y, x| seg0.get(y, x) != seg1.get(y, x));
        let keep = |seg: &LabelMap| {
            let data = seg.data().iter().zip(mask.data()).map(|(&c, &m)| if m == 1 { c } else { NO_CHANGE }).collect();
            LabelMap::new(w, h, data).expect("sized")
        };
        Ok(ToyPair {
            i1,
            i2,
            change0: keep(&seg0),
            change1: keep(&seg1),
            mask,
            seg0,
            seg1,
        })
    }
}

/// Random scene parameters; ranges are inclusive.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySceneConfig {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub static_objects: (usize, usize),
    pub alterations: (usize, usize),
    pub shift: isize,
}

impl ToySceneConfig {
    pub fn new(size: usize, num_classes: usize) -> Self {
        ToySceneConfig {
            width: size,
            height: size,
            num_classes,
            static_objects: (2, 4),
            alterations: (1, 3),
            shift: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width.min(self.height) < 32 {
            return Err(Error::Config(format!("toy scenes need size >= 32, got {}x{}", self.width, self.height)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("toy scenes need at least 2 classes".into()));
        }
        if self.static_objects.0 > self.static_objects.1 || self.alterations.0 > self.alterations.1 {
            return Err(Error::Config("empty object-count range".into()));
        }
        Ok(())
    }
}

fn random_shape(rng: &mut impl Rng, w: usize, h: usize) -> Shape {
    let s = w.min(h) as f32;
    if rng.random_bool(0.5) {
        let r = rng.random_range(s / 10.0..=s / 5.0);
        Shape::Disc {
            cy: rng.random_range(r..=h as f32 - r),
            cx: rng.random_range(r..=w as f32 - r),
            r,
        }
    } else {
        let height = rng.random_range(s / 6.0..=s / 2.5);
        let width = rng.random_range(s / 6.0..=s / 2.5);
        Shape::Rect {
            top: rng.random_range(0.0..=h as f32 - height),
            left: rng.random_range(0.0..=w as f32 - width),
            height,
            width,
        }
    }
}

fn random_class(rng: &mut impl Rng, k: usize) -> u8 {
    rng.random_range(1..k) as u8
}

/// Draw a scene: static objects present at both times, then altered ones
/// that appear, disappear or change class, drawn on top.
pub fn generate_toy_scene(cfg: &ToySceneConfig, seed: u64) -> Result<ToyScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h, k) = (cfg.width, cfg.height, cfg.num_classes);
    let mut primitives = Vec::new();
    for _ in 0..rng.random_range(cfg.static_objects.0..=cfg.static_objects.1) {
        let shape = random_shape(&mut rng, w, h);
        primitives.push(Primitive::fixed(shape, random_class(&mut rng, k)));
    }
    for _ in 0..rng.random_range(cfg.alterations.0..=cfg.alterations.1) {
        let shape = random_shape(&mut rng, w, h);
        let a = random_class(&mut rng, k);
        let kind = if k > 2 { rng.random_range(0..3) } else { rng.random_range(0..2) };
        let (before, after) = match kind {
            0 => (None, Some(a)),
            1 => (Some(a), None),
            _ => {
                let mut b = random_class(&mut rng, k - 1);
                if b >= a {
                    b += 1;
                }
                (Some(a), Some(b))
            }
        };
        primitives.push(Primitive { shape, before, after });
    }
    Ok(ToyScene {
        width: w,
        height: h,
        num_classes: k,
        seed,
        shift: cfg.shift,
        primitives,
    })
}

pub fn generate_toy_scene_pair(seed: u64, size: usize, num_classes: usize) -> Result<ToyPair> {
    generate_toy_scene(&ToySceneConfig::new(size, num_classes), seed)?.render()
}

/// A single-time scene as a segmentation sample with at least two
/// non-background classes (given `num_classes >= 3`).
pub fn generate_toy_segmentation(seed: u64, size: usize, num_classes: usize) -> Result<SegSample> {
    if num_classes < 3 {
        return Err(Error::Config("segmentation samples need at least 3 classes (background + 2)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n = rng.random_range(3..=6);
        let primitives = (0..n)
            .map(|_| {
                let shape = random_shape(&mut rng, size, size);
                Primitive::fixed(shape, random_class(&mut rng, num_classes))
            })
            .collect();
        let scene = ToyScene {
            width: size,
            height: size,
            num_classes,
            seed: rng.random(),
            shift: 0,
            primitives,
        };
        scene.validate()?;
        if size < 32 {
            return Err(Error::Config(format!("toy scenes need size >= 32, got {size}")));
        }
        let labels = scene.labels(false);
        if labels.present_classes(NO_CHANGE).len() >= 2 {
            let pair = scene.render()?;
            return SegSample::new(pair.i1, labels);
        }
    }
}

/// `count` independent scenes whose seeds are drawn from one stream.
pub fn toy_pair_dataset(cfg: &ToySceneConfig, count: usize, seed: u64) -> Result<Vec<ToyPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| generate_toy_scene(cfg, rng.random())?.render()).collect()
}

pub fn toy_segmentation_dataset(count: usize, size: usize, num_classes: usize, seed: u64) -> Result<Vec<SegSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| generate_toy_segmentation(rng.random(), size, num_classes)).collect()
}
