use std::fmt;
use std::str::FromStr;

use crate::engine::UpsampleMode;
use crate::error::{Error, Result};
use crate::kv::{join_list, KvMap};

/// ResNet-style encoder geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub use_batchnorm: bool,
}

impl EncoderConfig {
    /// Small widths `[16, 32, 64, 128]`.
    pub fn toy() -> Self {
        EncoderConfig {
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            use_batchnorm: true,
        }
    }

    /// ResNet-18 widths `[64, 128, 256, 512]`.
    pub fn full() -> Self {
        EncoderConfig {
            stage_widths: vec![64, 128, 256, 512],
            ..Self::toy()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Total spatial reduction between the input and the deepest stage.
    pub fn downsampling_factor(&self) -> usize {
        1 << self.stage_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::Config(format!("stage widths must be non-empty and positive: {:?}", self.stage_widths)));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Correlated siamese change detector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CscdNetConfig {
    pub encoder: EncoderConfig,
    pub correlation_max_disp: usize,
    /// Encoder stage indices whose features are correlated.
    pub correlation_stages: Vec<usize>,
    pub upsample: UpsampleMode,
}

impl CscdNetConfig {
    pub fn with_encoder(encoder: EncoderConfig) -> Self {
        let n = encoder.num_stages();
        CscdNetConfig {
            correlation_stages: (n.saturating_sub(2)..n).collect(),
            encoder,
            correlation_max_disp: 4,
            upsample: UpsampleMode::Bilinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let n = self.encoder.num_stages();
        if let Some(&bad) = self.correlation_stages.iter().find(|&&s| s >= n) {
            return Err(Error::Config(format!("correlation stage {bad} out of range for {n} encoder stages")));
        }
        let mut sorted = self.correlation_stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.correlation_stages.len() {
            return Err(Error::Config("duplicate correlation stage".into()));
        }
        Ok(())
    }
}

impl Default for CscdNetConfig {
    fn default() -> Self {
        Self::with_encoder(EncoderConfig::toy())
    }
}

/// Silhouette-based semantic change labeler: 7-channel input, `2K` outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SscdNetConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub upsample: UpsampleMode,
}

impl SscdNetConfig {
    pub const INPUT_CHANNELS: usize = 7;

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        validate_classes(self.num_classes)
    }
}

impl Default for SscdNetConfig {
    fn default() -> Self {
        SscdNetConfig {
            encoder: EncoderConfig::toy(),
            num_classes: 11,
            upsample: UpsampleMode::Bilinear,
        }
    }
}

fn validate_classes(k: usize) -> Result<()> {
    if !(2..=255).contains(&k) {
        return Err(Error::Config(format!("num_classes must be in 2..=255, got {k}")));
    }
    Ok(())
}

/// The change detector's trunk with a `2K`-channel split head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsscdNetConfig {
    pub trunk: CscdNetConfig,
    pub num_classes: usize,
}

impl CsscdNetConfig {
    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        validate_classes(self.num_classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Cscdnet,
    Sscdnet,
    Csscdnet,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cscdnet => "cscdnet",
            ModelKind::Sscdnet => "sscdnet",
            ModelKind::Csscdnet => "csscdnet",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cscdnet" => Ok(ModelKind::Cscdnet),
            "sscdnet" => Ok(ModelKind::Sscdnet),
            "csscdnet" => Ok(ModelKind::Csscdnet),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// A fully specified network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    Change(CscdNetConfig),
    Semantic(SscdNetConfig),
    Direct(CsscdNetConfig),
}

fn upsample_name(mode: UpsampleMode) -> &'static str {
    match mode {
        UpsampleMode::Nearest => "nearest",
        UpsampleMode::Bilinear => "bilinear",
    }
}

fn parse_upsample(s: &str) -> Result<UpsampleMode> {
    match s {
        "nearest" => Ok(UpsampleMode::Nearest),
        "bilinear" => Ok(UpsampleMode::Bilinear),
        other => Err(Error::Config(format!("unknown upsample mode `{other}`"))),
    }
}

impl Architecture {
    pub fn kind(&self) -> ModelKind {
        match self {
            Architecture::Change(_) => ModelKind::Cscdnet,
            Architecture::Semantic(_) => ModelKind::Sscdnet,
            Architecture::Direct(_) => ModelKind::Csscdnet,
        }
    }

    pub fn encoder(&self) -> &EncoderConfig {
        match self {
            Architecture::Change(c) => &c.encoder,
            Architecture::Semantic(c) => &c.encoder,
            Architecture::Direct(c) => &c.trunk.encoder,
        }
    }

    /// Semantic class count, for the two semantic kinds.
    pub fn num_classes(&self) -> Option<usize> {
        match self {
            Architecture::Change(_) => None,
            Architecture::Semantic(c) => Some(c.num_classes),
            Architecture::Direct(c) => Some(c.num_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Change(c) => c.validate(),
            Architecture::Semantic(c) => c.validate(),
            Architecture::Direct(c) => c.validate(),
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("kind", self.kind());
        let enc = self.encoder();
        kv.set("stage_widths", join_list(&enc.stage_widths));
        kv.set("blocks_per_stage", enc.blocks_per_stage);
        kv.set("use_batchnorm", enc.use_batchnorm);
        let trunk = match self {
            Architecture::Change(c) => Some(c),
            Architecture::Direct(c) => Some(&c.trunk),
            Architecture::Semantic(_) => None,
        };
        if let Some(t) = trunk {
            kv.set("correlation_max_disp", t.correlation_max_disp);
            kv.set("correlation_stages", join_list(&t.correlation_stages));
            kv.set("upsample", upsample_name(t.upsample));
        }
        if let Architecture::Semantic(c) = self {
            kv.set("upsample", upsample_name(c.upsample));
        }
        if let Some(k) = self.num_classes() {
            kv.set("num_classes", k);
        }
        kv
    }

    /// Build from `key=value` pairs; missing keys take the toy defaults.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let kind: ModelKind = kv.require::<String>("kind")?.parse()?;
        let mut encoder = EncoderConfig::toy();
        if let Some(w) = kv.get_list("stage_widths")? {
            encoder.stage_widths = w;
        }
        if let Some(b) = kv.get("blocks_per_stage")? {
            encoder.blocks_per_stage = b;
        }
        if let Some(bn) = kv.get("use_batchnorm")? {
            encoder.use_batchnorm = bn;
        }
        let upsample = kv.get_str("upsample").map(parse_upsample).transpose()?.unwrap_or(UpsampleMode::Bilinear);
        let trunk = || -> Result<CscdNetConfig> {
            let mut t = CscdNetConfig::with_encoder(encoder.clone());
            if let Some(d) = kv.get("correlation_max_disp")? {
                t.correlation_max_disp = d;
            }
            if let Some(s) = kv.get_list("correlation_stages")? {
                t.correlation_stages = s;
            }
            t.upsample = upsample;
            Ok(t)
        };
        let num_classes = kv.get("num_classes")?.unwrap_or(11);
        let arch = match kind {
            ModelKind::Cscdnet => Architecture::Change(trunk()?),
            ModelKind::Sscdnet => Architecture::Semantic(SscdNetConfig {
                encoder: encoder.clone(),
                num_classes,
                upsample,
            }),
            ModelKind::Csscdnet => Architecture::Direct(CsscdNetConfig {
                trunk: trunk()?,
                num_classes,
            }),
        };
        arch.validate()?;
        Ok(arch)
    }
}
