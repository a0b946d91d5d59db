use std::collections::BTreeMap;

use crate::dataio::netpbm::RgbImage;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::maps::{LabelMap, UNLABELED};

/// Class colors, parsed from lines of `class_id R G B`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    colors: BTreeMap<u8, [u8; 3]>,
}

/// Distinct colors for the first classes; class 0 (no change) is black.
const BASE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [128, 0, 0],
    [170, 255, 195],
];

impl Palette {
    pub fn parse(text: &str) -> Result<Self> {
        let mut colors = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Config(format!("palette line {}: expected `class_id R G B`, got `{line}`", lineno + 1));
            let vals = line
                .split_whitespace()
                .map(|t| t.parse::<u8>().map_err(|_| bad()))
                .collect::<Result<Vec<u8>>>()?;
            let [id, r, g, b] = vals.as_slice() else { return Err(bad()) };
            colors.insert(*id, [*r, *g, *b]);
        }
        Ok(Palette { colors })
    }

    /// `k` classes from a fixed table, cycling with darkened copies when
    /// `k` exceeds it. Only class 0 is black.
    pub fn default_for(k: usize) -> Self {
        let cycle = BASE.len() - 1;
        let colors = (0..k.min(255))
            .map(|c| {
                if c == 0 {
                    return (0, BASE[0]);
                }
                let [r, g, b] = BASE[1 + (c - 1) % cycle];
                let fade = (1 + (c - 1) / cycle) as u8;
                (c as u8, [r / fade, g / fade, b / fade])
            })
            .collect();
        Palette { colors }
    }

    pub fn get(&self, class: u8) -> Option<[u8; 3]> {
        self.colors.get(&class).copied()
    }

    pub fn to_text(&self) -> String {
        self.colors.iter().map(|(c, [r, g, b])| format!("{c} {r} {g} {b}\n")).collect()
    }

    fn color(&self, class: u8) -> Result<[u8; 3]> {
        match self.get(class) {
            Some(c) => Ok(c),
            None if class == UNLABELED => Ok([0, 0, 0]),
            None => Err(Error::Config(format!("palette has no color for class {class}"))),
        }
    }

    pub fn colorize(&self, labels: &LabelMap) -> Result<RgbImage> {
        let mut data = Vec::with_capacity(labels.data().len() * 3);
        for &c in labels.data() {
            data.extend_from_slice(&self.color(c)?);
        }
        Ok(RgbImage {
            width: labels.width(),
            height: labels.height(),
            data,
        })
    }

    /// `image` with class colors alpha-blended over every pixel whose class
    /// is not 0.
    pub fn overlay(&self, image: &Tensor, labels: &LabelMap, alpha: f32) -> Result<RgbImage> {
        let mut base = RgbImage::from_tensor(image)?;
        if (base.width, base.height) != (labels.width(), labels.height()) {
            return Err(Error::shape("overlay", "image and labels differ in size"));
        }
        for (p, &c) in labels.data().iter().enumerate() {
            if c == 0 {
                continue;
            }
            let col = self.color(c)?;
            for (v, &cv) in base.data[p * 3..p * 3 + 3].iter_mut().zip(&col) {
                *v = ((1.0 - alpha) * *v as f32 + alpha * cv as f32).round() as u8;
            }
        }
        Ok(base)
    }
}
