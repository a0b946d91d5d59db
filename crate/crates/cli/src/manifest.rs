use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};
use sscd_core::kv::{join_list, KvMap};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("below root").to_path_buf());
        }
    }
    Ok(())
}

/// Content hash of a directory tree in the style of git: every file is
/// hashed as `blob <len>\0<bytes>`, then the sorted `path\0digest\n` lines
/// are hashed together.
pub fn dataset_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut tree = Sha256::new();
    for rel in files {
        let bytes = fs::read(root.join(&rel)).with_context(|| format!("reading {}", rel.display()))?;
        let mut blob = Sha256::new();
        blob.update(format!("blob {}\0", bytes.len()));
        blob.update(&bytes);
        tree.update(rel.to_string_lossy().replace('\\', "/"));
        tree.update([0]);
        tree.update(hex(&blob.finalize()));
        tree.update(b"\n");
    }
    Ok(hex(&tree.finalize()))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Everything needed to rerun a training job: the resolved configuration,
/// the dataset fingerprint and what the run produced. Output files are
/// named relative to the run directory.
pub struct RunManifest {
    pub config: KvMap,
    pub dataset: PathBuf,
    pub dataset_hash: String,
    pub train_ids: Vec<String>,
    pub iterations_run: usize,
    pub stopped_early: bool,
    pub final_loss: Option<f64>,
    pub loss_trace: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

impl RunManifest {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.config.clone();
        kv.set("dataset", self.dataset.display());
        kv.set("dataset_hash", &self.dataset_hash);
        kv.set("train_ids", join_list(&self.train_ids));
        kv.set("iterations_run", self.iterations_run);
        kv.set("stopped_early", self.stopped_early);
        if let Some(l) = self.final_loss {
            kv.set("final_loss", l);
        }
        kv.set("loss_trace", file_name(&self.loss_trace));
        let names: Vec<String> = self.checkpoints.iter().map(|p| file_name(p)).collect();
        kv.set("checkpoints", names.join(","));
        kv
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_kv().to_text()).with_context(|| format!("writing {}", path.display()))
    }
}
