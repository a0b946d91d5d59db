//! Weakly supervised training data for the semantic change labeler:
//! synthetic change tuples built from two plain segmentation samples, and
//! morphological corruption of change masks.

mod morph;

pub use morph::{augment_mask, draw_augmentation, morph_transform, AugmentConfig, MorphOp};

use rand::{Rng, SeedableRng};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::maps::{ChangeMask, LabelMap, UNLABELED};

/// Class id of "no change", which doubles as segmentation background.
pub const NO_CHANGE: u8 = 0;

/// The eleven-class street-scene change taxonomy, indexed by class id.
pub const CLASS_NAMES: [&str; 11] = [
    "no change",
    "animal",
    "vehicle",
    "barrier",
    "area",
    "structure",
    "lane marking",
    "vegetation",
    "traffic",
    "others",
    "debris",
];

pub const DEFAULT_N_MAX: usize = 10;

/// An image `[3, H, W]` in `[-1, 1]` with its segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub labels: LabelMap,
}

impl SegSample {
    pub fn new(image: Tensor, labels: LabelMap) -> Result<Self> {
        if image.shape() != [3, labels.height(), labels.width()] {
            return Err(Error::shape(
                "SegSample",
                format!("image {:?} vs labels {}x{}", image.shape(), labels.width(), labels.height()),
            ));
        }
        Ok(SegSample { image, labels })
    }

    /// Sampleable classes: everything except no-change and unlabeled.
    pub fn present_classes(&self) -> Vec<u8> {
        self.labels.present_classes(NO_CHANGE)
    }
}

/// A synthetic change tuple. `n1`/`n2` are the number of classes kept on
/// each side.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub i1: Tensor,
    pub i2: Tensor,
    pub mask: ChangeMask,
    pub l1: LabelMap,
    pub l2: LabelMap,
    pub n1: usize,
    pub n2: usize,
}

/// Draw `n` in `1..=min(n_max, N - 1)` then `n` distinct classes by a
/// partial Fisher-Yates shuffle of `present`.
fn draw_classes(present: &[u8], n_max: usize, rng: &mut impl Rng) -> Vec<u8> {
    let upper = n_max.min(present.len() - 1);
    let n = rng.random_range(1..=upper);
    let mut pool = present.to_vec();
    for j in 0..n {
        let r = rng.random_range(j..pool.len());
        pool.swap(j, r);
    }
    pool.truncate(n);
    pool
}

fn keep_classes(labels: &LabelMap, keep: &[u8]) -> LabelMap {
    let mut table = [NO_CHANGE; 256];
    for &c in keep {
        table[c as usize] = c;
    }
    let data = labels.data().iter().map(|&v| table[v as usize]).collect();
    LabelMap::new(labels.width(), labels.height(), data).expect("same size")
}

/// Build one tuple: side `i` keeps `n_i` randomly chosen classes of
/// `seg_i`, and the change mask is the union of both kept silhouettes.
/// Side 1 draws first. Unlabeled pixels are treated as no-change.
pub fn synthesize_sample(seg1: &SegSample, seg2: &SegSample, n_max: usize, rng: &mut impl Rng) -> Result<SyntheticSample> {
    let (w, h) = (seg1.labels.width(), seg1.labels.height());
    if !seg2.labels.same_size(w, h) {
        return Err(Error::shape(
            "synthesize_sample",
            format!("{w}x{h} vs {}x{}", seg2.labels.width(), seg2.labels.height()),
        ));
    }
    if n_max == 0 {
        return Err(Error::invalid("synthesize_sample", "n_max must be >= 1"));
    }
    let p1 = seg1.present_classes();
    let p2 = seg2.present_classes();
    for (side, p) in [(1, &p1), (2, &p2)] {
        if p.len() < 2 {
            return Err(Error::TooFewClasses { side, present: p.len() });
        }
    }
    let k1 = draw_classes(&p1, n_max, rng);
    let k2 = draw_classes(&p2, n_max, rng);
    let l1 = keep_classes(&seg1.labels, &k1);
    let l2 = keep_classes(&seg2.labels, &k2);
    let mask = ChangeMask::from_fn(w, h, |y, x| l1.get(y, x) != NO_CHANGE || l2.get(y, x) != NO_CHANGE);
    Ok(SyntheticSample {
        i1: seg1.image.clone(),
        i2: seg2.image.clone(),
        mask,
        l1,
        l2,
        n1: k1.len(),
        n2: k2.len(),
    })
}

/// Provenance of one synthesized tuple.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthesisSource {
    pub index: usize,
    pub first: usize,
    pub second: usize,
}

/// Draw `count` tuples from `pool`: each picks two distinct samples
/// uniformly (the same one twice if the pool has a single entry) and
/// synthesizes from them, all from one stream seeded by `seed`. Samples
/// with fewer than two classes are never picked. Each tuple is handed to
/// `sink` as soon as it exists.
pub fn synthesize_dataset(
    pool: &[SegSample],
    count: usize,
    n_max: usize,
    seed: u64,
    mut sink: impl FnMut(SynthesisSource, SyntheticSample) -> Result<()>,
) -> Result<()> {
    let eligible: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].present_classes().len() >= 2).collect();
    if count > 0 && eligible.is_empty() {
        return Err(Error::TooFewClasses { side: 1, present: 0 });
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for index in 0..count {
        let a = rng.random_range(0..eligible.len());
        let b = if eligible.len() > 1 {
            let b = rng.random_range(0..eligible.len() - 1);
            b + usize::from(b >= a)
        } else {
            a
        };
        let (first, second) = (eligible[a], eligible[b]);
        let sample = synthesize_sample(&pool[first], &pool[second], n_max, &mut rng)?;
        sink(SynthesisSource { index, first, second }, sample)?;
    }
    Ok(())
}

/// Source-to-target class table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMapping {
    table: Vec<Option<u8>>,
}

impl Default for ClassMapping {
    fn default() -> Self {
        ClassMapping { table: vec![None; 256] }
    }
}

impl ClassMapping {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn identity(num_classes: usize) -> Self {
        let mut m = Self::new();
        for c in 0..num_classes.min(255) {
            m.insert(c as u8, c as u8);
        }
        m
    }

    pub fn insert(&mut self, source: u8, target: u8) {
        self.table[source as usize] = Some(target);
    }

    pub fn get(&self, source: u8) -> Option<u8> {
        self.table[source as usize]
    }

    /// Two columns per line, `source target`, separated by whitespace or a
    /// comma. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
            let bad = || Error::Config(format!("class mapping line {}: expected `source target`, got `{line}`", lineno + 1));
            let [s, t] = cols.as_slice() else { return Err(bad()) };
            let s: u8 = s.parse().map_err(|_| bad())?;
            let t: u8 = t.parse().map_err(|_| bad())?;
            m.insert(s, t);
        }
        Ok(m)
    }
}

/// Pixelwise substitution. Unlabeled pixels pass through unless mapped
/// explicitly; any other unmapped class is an error.
pub fn remap_classes(labels: &LabelMap, mapping: &ClassMapping) -> Result<LabelMap> {
    let data = labels
        .data()
        .iter()
        .map(|&v| match mapping.get(v) {
            Some(t) => Ok(t),
            None if v == UNLABELED => Ok(UNLABELED),
            None => Err(Error::UnmappedClass { class: v }),
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMap::new(labels.width(), labels.height(), data)
}

/// Whether a tuple satisfies the structural invariants: the mask is the
/// union of both silhouettes, kept labels agree with their sources, and
/// each side keeps between 1 and `min(n_max, N - 1)` classes.
pub fn check_sample(sample: &SyntheticSample, seg1: &LabelMap, seg2: &LabelMap, n_max: usize) -> std::result::Result<(), String> {
    let (w, h) = (seg1.width(), seg1.height());
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (sample.l1.get(y, x), sample.l2.get(y, x));
            if sample.mask.get(y, x) != (a != NO_CHANGE || b != NO_CHANGE) {
                return Err(format!("mask/silhouette mismatch at ({y}, {x})"));
            }
            if a != NO_CHANGE && a != seg1.get(y, x) {
                return Err(format!("side 1 invents class {a} at ({y}, {x})"));
            }
            if b != NO_CHANGE && b != seg2.get(y, x) {
                return Err(format!("side 2 invents class {b} at ({y}, {x})"));
            }
        }
    }
    for (side, kept, src, n) in [(1, &sample.l1, seg1, sample.n1), (2, &sample.l2, seg2, sample.n2)] {
        let got = kept.present_classes(NO_CHANGE).len();
        let big_n = src.present_classes(NO_CHANGE).len();
        if got != n || n < 1 || n > n_max.min(big_n.saturating_sub(1)) {
            return Err(format!("side {side}: kept {got} classes, drew {n}, N = {big_n}, n_max = {n_max}"));
        }
    }
    Ok(())
}
