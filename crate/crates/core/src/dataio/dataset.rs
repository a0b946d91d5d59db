//! On-disk layouts.
//!
//! Pair datasets hold one directory per pair:
//! `<root>/<id>/t0.ppm, t1.ppm, mask.pgm` and optionally `label0.pgm,
//! label1.pgm`. Segmentation datasets hold `<root>/<id>/image.ppm,
//! labels.pgm`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataio::netpbm::{read_image, read_labelmap, read_mask, write_image, write_labelmap, write_mask};
use crate::dataio::patches::{PanoramaPair, Patch};
use crate::error::{Error, Result};
use crate::synthesis::SegSample;

/// Sorted names of the subdirectories of `root`.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_pair(root: &Path, pair: &PanoramaPair) -> Result<PathBuf> {
    let dir = root.join(&pair.id);
    create_dir(&dir)?;
    write_image(&pair.i1, &dir.join("t0.ppm"))?;
    write_image(&pair.i2, &dir.join("t1.ppm"))?;
    write_mask(&pair.mask, &dir.join("mask.pgm"))?;
    if let Some((l0, l1)) = &pair.labels {
        write_labelmap(l0, &dir.join("label0.pgm"))?;
        write_labelmap(l1, &dir.join("label1.pgm"))?;
    }
    Ok(dir)
}

/// Read one pair directory. Labels are loaded when both label files exist.
pub fn read_pair(root: &Path, id: &str) -> Result<PanoramaPair> {
    let dir = root.join(id);
    let i1 = read_image(&dir.join("t0.ppm"))?;
    let i2 = read_image(&dir.join("t1.ppm"))?;
    let mask = read_mask(&dir.join("mask.pgm"))?;
    let (p0, p1) = (dir.join("label0.pgm"), dir.join("label1.pgm"));
    let labels = if p0.exists() && p1.exists() {
        Some((read_labelmap(&p0)?, read_labelmap(&p1)?))
    } else {
        None
    };
    PanoramaPair::new(id, i1, i2, mask, labels)
}

pub fn read_pairs(root: &Path) -> Result<Vec<PanoramaPair>> {
    list_ids(root)?.iter().map(|id| read_pair(root, id)).collect()
}

/// Directory name of a patch: `<pair>_<offset>_r<degrees>`.
pub fn patch_id(patch: &Patch) -> String {
    let s = &patch.source;
    format!("{}_{:05}_r{}", s.pair_id, s.offset, s.rotation.degrees())
}

pub fn write_patch(root: &Path, patch: &Patch) -> Result<PathBuf> {
    let pair = PanoramaPair::new(patch_id(patch), patch.i1.clone(), patch.i2.clone(), patch.mask.clone(), patch.labels.clone())?;
    write_pair(root, &pair)
}

pub fn write_seg_sample(root: &Path, id: &str, sample: &SegSample) -> Result<PathBuf> {
    let dir = root.join(id);
    create_dir(&dir)?;
    write_image(&sample.image, &dir.join("image.ppm"))?;
    write_labelmap(&sample.labels, &dir.join("labels.pgm"))?;
    Ok(dir)
}

pub fn read_seg_sample(root: &Path, id: &str) -> Result<SegSample> {
    let dir = root.join(id);
    SegSample::new(read_image(&dir.join("image.ppm"))?, read_labelmap(&dir.join("labels.pgm"))?)
}

pub fn read_seg_dataset(root: &Path) -> Result<Vec<(String, SegSample)>> {
    list_ids(root)?
        .into_iter()
        .map(|id| {
            let s = read_seg_sample(root, &id)?;
            Ok((id, s))
        })
        .collect()
}
