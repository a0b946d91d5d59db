//! Per-pixel label and mask images.

use crate::error::{Error, Result};

/// Label value reserved for pixels without annotation.
pub const UNLABELED: u8 = 255;

/// Per-pixel class-index image, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "LabelMap::new",
                format!("{} values for {width}x{height}", data.len()),
            ));
        }
        Ok(LabelMap {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        LabelMap {
            width,
            height,
            data: vec![class; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    /// Sorted distinct class ids present, excluding `background` and
    /// [`UNLABELED`].
    pub fn present_classes(&self, background: u8) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8)
            .filter(|&c| seen[c as usize] && c != background && c != UNLABELED)
            .collect()
    }

    pub fn same_size(&self, other_w: usize, other_h: usize) -> bool {
        self.width == other_w && self.height == other_h
    }
}

/// Per-pixel binary image; every value is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ChangeMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ChangeMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "ChangeMask::new",
                format!("{} values for {width}x{height}", data.len()),
            ));
        }
        if let Some((index, &v)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NonBinaryTarget {
                index,
                value: v as f64,
            });
        }
        Ok(ChangeMask {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        ChangeMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        ChangeMask {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        ChangeMask {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Pixelwise subset test (`self ⊆ other`).
    pub fn is_subset_of(&self, other: &ChangeMask) -> bool {
        self.data
            .iter()
            .zip(&other.data)
            .all(|(&a, &b)| a == 0 || b != 0)
    }
}
