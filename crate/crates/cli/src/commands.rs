use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use sscd_core::dataio::{
    extract_patches, kfold_split, list_ids, patch_id, read_pairs, read_seg_sample, toy_pair_dataset, toy_segmentation_dataset, write_labelmap, write_mask,
    write_pair, write_patch, write_seg_sample, Palette, PanoramaPair, PatchConfig, Rotation, ToySceneConfig,
};
use sscd_core::engine::{gradcheck_suite, GRADCHECK_TOLERANCE};
use sscd_core::eval::{evaluate_change, evaluate_direct, evaluate_pipeline, evaluate_semantic, gt_masks, EvalMode, Evaluation};
use sscd_core::kv::KvMap;
use sscd_core::nn::{load_weights, Architecture, CscdNetConfig, CsscdNetConfig, EncoderConfig, Model, ModelKind, SscdNetConfig};
use sscd_core::synthesis::{remap_classes, synthesize_dataset, ClassMapping, SegSample, CLASS_NAMES};
use sscd_core::train::{synthetic_to_pair, train, Control, Progress, TrainConfig};
use sscd_core::{Error, LabelMap};

use crate::manifest::{dataset_hash, RunManifest};
use crate::{Command, EvalArgs, GradcheckArgs, PatchesArgs, SynthesizeArgs, ToygenArgs, TrainArgs};

/// Bad flags or configuration, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Operations whose gradients disagree with finite differences.
#[derive(Debug)]
pub struct GradcheckFailure(pub Vec<&'static str>);

impl fmt::Display for GradcheckFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gradient check failed for: {}", self.0.join(", "))
    }
}

impl std::error::Error for GradcheckFailure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

/// 1 usage, 2 data, 3 numerical failure.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<GradcheckFailure>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_numerical_failure() { 3 } else { 2 };
        }
    }
    2
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synthesize(a) => synthesize(&a),
        Command::Patches(a) => patches(&a),
        Command::TrainCd(a) => train_cmd(ModelKind::Cscdnet, &a),
        Command::TrainSscd(a) => train_cmd(ModelKind::Sscdnet, &a),
        Command::TrainCsscd(a) => train_cmd(ModelKind::Csscdnet, &a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Toygen(a) => toygen(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synthesize(a: &SynthesizeArgs) -> Result<()> {
    let mapping = match &a.mapping {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(ClassMapping::parse(&text).map_err(|e| usage(e.to_string()))?)
        }
        None => None,
    };
    let ids = list_ids(&a.seg_dir)?;
    let mut pool = Vec::new();
    let mut errors = Vec::new();
    for id in &ids {
        let loaded = read_seg_sample(&a.seg_dir, id).and_then(|s| match &mapping {
            Some(m) => SegSample::new(s.image, remap_classes(&s.labels, m)?),
            None => Ok(s),
        });
        match loaded {
            Ok(s) => pool.push(s),
            Err(e) => errors.push(format!("  {id}: {e}")),
        }
    }
    if !errors.is_empty() {
        return Err(anyhow!(Error::Config(format!("{} unreadable samples:\n{}", errors.len(), errors.join("\n")))));
    }
    let skipped = pool.iter().filter(|s| s.present_classes().len() < 2).count();
    if skipped > 0 {
        eprintln!("note: {skipped} samples have fewer than two classes and are never drawn");
    }
    create_dir(&a.out)?;
    let mut manifest = String::new();
    synthesize_dataset(&pool, a.count, a.n_max, a.seed, |src, sample| {
        let id = format!("{:06}", src.index);
        manifest.push_str(&format!("{id} {} {} {} {}\n", ids[src.first], ids[src.second], sample.n1, sample.n2));
        write_pair(&a.out, &synthetic_to_pair(id, sample))?;
        Ok(())
    })?;
    write_text(&a.out.join("manifest.txt"), &manifest)?;
    eprintln!("wrote {} tuples to {}", a.count, a.out.display());
    Ok(())
}

fn patches(a: &PatchesArgs) -> Result<()> {
    let rotations = a
        .rotations
        .iter()
        .map(|&d| Rotation::from_degrees(d))
        .collect::<sscd_core::Result<Vec<_>>>()
        .map_err(|e| usage(e.to_string()))?;
    let cfg = PatchConfig {
        crop: a.crop,
        out: a.size,
        crops_per_image: a.crops_per_image,
        rotations,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let pairs = read_pairs(&a.pairs)?;
    create_dir(&a.out)?;
    let mut manifest = String::new();
    let mut n = 0;
    for pair in &pairs {
        for patch in extract_patches(pair, &cfg)? {
            write_patch(&a.out, &patch)?;
            manifest.push_str(&patch.source.manifest_line());
            manifest.push('\n');
            n += 1;
        }
    }
    write_text(&a.out.join("manifest.txt"), &manifest)?;
    eprintln!("wrote {n} patches from {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

/// Preset, then config file, then flags.
pub fn resolve_config(kind: ModelKind, a: &TrainArgs) -> Result<(Architecture, TrainConfig)> {
    let (encoder, mut tc, k) = match a.preset.as_str() {
        "toy" => {
            let iters = if kind == ModelKind::Cscdnet { 2000 } else { 5000 };
            (EncoderConfig::toy(), TrainConfig::toy(kind, a.seed, iters), 4)
        }
        "full" => (EncoderConfig::full(), TrainConfig::new(kind, a.seed), CLASS_NAMES.len()),
        other => return Err(usage(format!("unknown preset `{other}` (toy, full)"))),
    };
    let trunk = CscdNetConfig::with_encoder(encoder.clone());
    let arch = match kind {
        ModelKind::Cscdnet => Architecture::Change(trunk),
        ModelKind::Sscdnet => Architecture::Semantic(SscdNetConfig {
            encoder,
            num_classes: k,
            ..SscdNetConfig::default()
        }),
        ModelKind::Csscdnet => Architecture::Direct(CsscdNetConfig { trunk, num_classes: k }),
    };
    let mut kv = arch.to_kv();
    kv.merge(&tc.to_kv());
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file = KvMap::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if let Some(found) = file.get_str("kind") {
            if found != kind.as_str() {
                return Err(usage(format!("config is for `{found}`, this command trains `{kind}`")));
            }
        }
        kv.merge(&file);
    }
    if let Some(v) = a.iterations {
        kv.set("iterations", v);
    }
    if let Some(v) = a.batch_size {
        kv.set("batch_size", v);
    }
    if let Some(v) = a.lr {
        kv.set("lr", v);
    }
    if let Some(v) = a.checkpoint_every {
        kv.set("checkpoint_every", v);
    }
    if let Some(v) = a.max_disp {
        kv.set("correlation_max_disp", v);
    }
    if let Some(v) = a.num_classes {
        kv.set("num_classes", v);
    }
    if a.augment {
        kv.set("augment", true);
    }
    kv.set("seed", a.seed);
    let arch = Architecture::from_kv(&kv).map_err(|e| usage(e.to_string()))?;
    tc.apply_kv(&kv).map_err(|e| usage(e.to_string()))?;
    tc.checkpoint_every = Some(tc.checkpoint_interval());
    Ok((arch, tc))
}

fn select_fold(pairs: Vec<PanoramaPair>, folds: Option<usize>, fold: usize, seed: u64, test: bool) -> Result<Vec<PanoramaPair>> {
    let Some(k) = folds else { return Ok(pairs) };
    let split = kfold_split(pairs.len(), k, seed).map_err(|e| usage(e.to_string()))?;
    let f = split.get(fold).ok_or_else(|| usage(format!("fold {fold} out of range for {k} folds")))?;
    let keep = if test { &f.test } else { &f.train };
    let mut slots: Vec<Option<PanoramaPair>> = pairs.into_iter().map(Some).collect();
    Ok(keep.iter().map(|&i| slots[i].take().expect("indices are distinct")).collect())
}

fn train_cmd(kind: ModelKind, a: &TrainArgs) -> Result<()> {
    let (arch, cfg) = resolve_config(kind, a)?;
    let mut pairs = read_pairs(&a.data)?;
    if pairs.is_empty() {
        return Err(anyhow!(Error::Config(format!("no pairs under {}", a.data.display()))));
    }
    let hash = dataset_hash(&a.data)?;
    pairs = select_fold(pairs, a.folds, a.fold, a.seed, false)?;
    if a.extract_patches {
        let pc = PatchConfig::default();
        let mut out = Vec::new();
        for p in &pairs {
            for patch in extract_patches(p, &pc)? {
                let id = patch_id(&patch);
                out.push(PanoramaPair::new(id, patch.i1, patch.i2, patch.mask, patch.labels)?);
            }
        }
        pairs = out;
    }
    create_dir(&a.out)?;
    let mut config = arch.to_kv();
    config.merge(&cfg.to_kv());
    if let Some(k) = a.folds {
        config.set("folds", k);
        config.set("fold", a.fold);
    }
    write_text(&a.out.join("config.txt"), &config.to_text())?;

    let trace_path = a.out.join("loss_trace.txt");
    let mut trace = BufWriter::new(fs::File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?);
    let every = (cfg.iterations / 20).max(1);
    let mut io_error = None;
    let mut observer = |p: &Progress| {
        if let Err(e) = writeln!(trace, "{}", p.loss) {
            io_error.get_or_insert(e);
        }
        if p.iteration.is_multiple_of(every) || p.iteration == 1 {
            eprintln!("iter {:>7}  loss {:.6}", p.iteration, p.loss);
        }
        Control::Continue
    };
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let model = Model::build(arch, cfg.seed)?;
    let result = train(model, &pairs, &cfg, Some(&a.out), &mut observer);
    trace.flush()?;
    if let Some(e) = io_error {
        return Err(e).context("writing loss trace");
    }
    let report = result?;
    RunManifest {
        config,
        dataset: a.data.clone(),
        dataset_hash: hash,
        train_ids: ids,
        iterations_run: report.iterations_run(),
        stopped_early: report.stopped_early,
        final_loss: report.final_loss(),
        loss_trace: trace_path,
        checkpoints: report.checkpoints.clone(),
    }
    .write(&a.out.join("manifest.txt"))?;
    eprintln!("trained {} iterations; final checkpoint {}", report.iterations_run(), report.checkpoints.last().map(|p| p.display().to_string()).unwrap_or_default());
    Ok(())
}

fn class_names(k: usize) -> Vec<String> {
    if k == CLASS_NAMES.len() {
        return CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    }
    (0..k).map(|c| if c == 0 { "no change".to_string() } else { format!("class {c}") }).collect()
}

fn write_evaluation(ev: &Evaluation, pairs: &[PanoramaPair], names: &[String], palette: &Palette, out: &Path) -> Result<()> {
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    create_dir(out)?;
    let mut text = format!("mode {}\npairs {}\n", ev.mode, pairs.len());
    text.push_str(&ev.report.to_text(&names));
    if let Some((t, f1)) = ev.best_threshold {
        text.push_str(&format!("best F1 over thresholds {f1:.4} at tau {t}\n"));
    }
    write_text(&out.join("report.txt"), &text)?;
    write_text(&out.join("metrics.csv"), &ev.report.to_csv(&names))?;
    let mut per = String::from("id,metric,class,value\n");
    for (id, r) in &ev.per_image {
        if let Some(r) = r {
            for line in r.to_csv(&names).lines().skip(1) {
                per.push_str(&format!("{id},{line}\n"));
            }
        }
    }
    write_text(&out.join("per_image.csv"), &per)?;
    let dir = out.join("predictions");
    create_dir(&dir)?;
    for (i, p) in pairs.iter().enumerate() {
        if ev.mode == EvalMode::Cd {
            let m = &ev.masks[i];
            write_mask(m, &dir.join(format!("{}_mask.pgm", p.id)))?;
            let as_labels = LabelMap::new(m.width(), m.height(), m.data().to_vec())?;
            palette.overlay(&p.i1, &as_labels, 0.5)?.save(&dir.join(format!("{}_overlay.ppm", p.id)))?;
        } else {
            let (l0, l1) = &ev.labels[i];
            write_labelmap(l0, &dir.join(format!("{}_label0.pgm", p.id)))?;
            write_labelmap(l1, &dir.join(format!("{}_label1.pgm", p.id)))?;
            palette.overlay(&p.i1, l0, 0.5)?.save(&dir.join(format!("{}_overlay0.ppm", p.id)))?;
            palette.overlay(&p.i2, l1, 0.5)?.save(&dir.join(format!("{}_overlay1.ppm", p.id)))?;
        }
    }
    print!("{text}");
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let mode: EvalMode = a.mode.parse().map_err(|e: Error| usage(e.to_string()))?;
    if a.folds.is_some() && a.seed.is_none() {
        return Err(usage("--folds needs the --seed used for the split"));
    }
    let pairs = read_pairs(&a.data)?;
    let pairs = select_fold(pairs, a.folds, a.fold, a.seed.unwrap_or(0), true)?;
    if pairs.is_empty() {
        return Err(anyhow!(Error::Config(format!("no pairs under {}", a.data.display()))));
    }
    let model = load_weights(&a.checkpoint)?;
    let ev = match mode {
        EvalMode::Cd => evaluate_change(&model, &pairs, a.tau)?,
        EvalMode::Sscd => evaluate_semantic(&model, &pairs, &gt_masks(&pairs))?,
        EvalMode::Pipeline => {
            let path = a
                .semantic_checkpoint
                .as_ref()
                .ok_or_else(|| usage("pipeline mode needs --semantic-checkpoint"))?;
            evaluate_pipeline(&model, &load_weights(path)?, &pairs, a.tau)?
        }
        EvalMode::Csscd => evaluate_direct(&model, &pairs)?,
    };
    let k = match mode {
        EvalMode::Cd => 2,
        EvalMode::Pipeline => load_weights(a.semantic_checkpoint.as_ref().expect("checked")).map(|m| m.architecture().num_classes().unwrap_or(2))?,
        _ => model.architecture().num_classes().unwrap_or(2),
    };
    let names = if mode == EvalMode::Cd { vec!["unchanged".to_string(), "changed".to_string()] } else { class_names(k) };
    let palette = match &a.palette {
        Some(p) => Palette::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?).map_err(|e| usage(e.to_string()))?,
        None => Palette::default_for(k),
    };
    write_evaluation(&ev, &pairs, &names, &palette, &a.out)
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be >= 1"));
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let checks = gradcheck_suite(&seeds)?;
    let mut text = format!("{:<22} {:>14} {:>5}  status (tolerance {GRADCHECK_TOLERANCE:e})\n", "op", "max_rel_error", "runs");
    for c in &checks {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        text.push_str(&format!("{:<22} {:>14.3e} {:>5}  {status}\n", c.op, c.max_rel_error, c.runs));
    }
    print!("{text}");
    if let Some(path) = &a.report {
        write_text(path, &text)?;
    }
    let failed: Vec<&'static str> = checks.iter().filter(|c| !c.passed()).map(|c| c.op).collect();
    if !failed.is_empty() {
        bail!(GradcheckFailure(failed));
    }
    Ok(())
}

fn toygen(a: &ToygenArgs) -> Result<()> {
    create_dir(&a.out)?;
    match a.kind.as_str() {
        "pairs" => {
            let mut cfg = ToySceneConfig::new(a.size, a.classes);
            cfg.shift = a.shift;
            if let Some(r) = &a.alterations {
                let [lo, hi] = r.as_slice() else { return Err(usage("--alterations takes `min,max`")) };
                cfg.alterations = (*lo, *hi);
            }
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            for (i, pair) in toy_pair_dataset(&cfg, a.count, a.seed)?.into_iter().enumerate() {
                write_pair(&a.out, &pair.into_pair(format!("toy_{i:04}")))?;
            }
        }
        "seg" => {
            for (i, s) in toy_segmentation_dataset(a.count, a.size, a.classes, a.seed)
                .map_err(|e| usage(e.to_string()))?
                .iter()
                .enumerate()
            {
                write_seg_sample(&a.out, &format!("seg_{i:04}"), s)?;
            }
        }
        other => return Err(usage(format!("unknown toy kind `{other}` (pairs, seg)"))),
    }
    write_text(&a.out.join("palette.txt"), &Palette::default_for(a.classes).to_text())?;
    eprintln!("wrote {} {} to {}", a.count, a.kind, a.out.display());
    Ok(())
}
