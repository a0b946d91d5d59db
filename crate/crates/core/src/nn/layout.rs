//! Layer tables derived from an [`Architecture`]. The same table drives
//! parameter declaration and the forward pass, so the two cannot drift.

use crate::nn::config::{Architecture, CscdNetConfig, EncoderConfig, SscdNetConfig};

/// One convolution, optionally followed by batch normalization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub batchnorm: bool,
    /// Conv bias is present whenever no batch norm follows.
    pub bias: bool,
}

impl ConvLayer {
    fn new(name: String, cin: usize, cout: usize, kernel: usize, stride: usize, batchnorm: bool) -> Self {
        ConvLayer {
            name,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding: kernel / 2,
            batchnorm,
            bias: !batchnorm,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn bn_name(&self, field: &str) -> String {
        format!("{}.bn.{field}", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    /// Trainable scalars owned by this layer.
    pub fn trainable_count(&self) -> usize {
        let mut n = self.out_channels * self.in_channels * self.kernel * self.kernel;
        if self.bias {
            n += self.out_channels;
        }
        if self.batchnorm {
            n += 2 * self.out_channels;
        }
        n
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub shortcut: Option<ConvLayer>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderLayout {
    /// Full-resolution stem, followed by a 2x2 max pool.
    pub stem: ConvLayer,
    pub stages: Vec<Vec<ResBlock>>,
}

impl EncoderLayout {
    fn new(cfg: &EncoderConfig, in_channels: usize) -> Self {
        let bn = cfg.use_batchnorm;
        let w0 = cfg.stage_widths[0];
        let stem = ConvLayer::new("enc.stem".into(), in_channels, w0, 3, 1, bn);
        let mut prev = w0;
        let stages = cfg
            .stage_widths
            .iter()
            .enumerate()
            .map(|(s, &width)| {
                (0..cfg.blocks_per_stage)
                    .map(|b| {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        let cin = if b == 0 { prev } else { width };
                        let name = format!("enc.s{s}.b{b}");
                        let block = ResBlock {
                            conv1: ConvLayer::new(format!("{name}.conv1"), cin, width, 3, stride, bn),
                            conv2: ConvLayer::new(format!("{name}.conv2"), width, width, 3, 1, bn),
                            shortcut: (stride != 1 || cin != width)
                                .then(|| ConvLayer::new(format!("{name}.down"), cin, width, 1, stride, bn)),
                        };
                        prev = width;
                        block
                    })
                    .collect()
            })
            .collect();
        EncoderLayout { stem, stages }
    }

    fn layers(&self) -> Vec<&ConvLayer> {
        let mut v = vec![&self.stem];
        for block in self.stages.iter().flatten() {
            v.push(&block.conv1);
            v.push(&block.conv2);
            v.extend(block.shortcut.as_ref());
        }
        v
    }
}

/// Decoder levels from the deepest stage upwards, then the full-resolution
/// level and the 1x1 head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderLayout {
    /// `levels[i]` fuses encoder stage `stages - 1 - i`.
    pub levels: Vec<ConvLayer>,
    pub full: ConvLayer,
    pub head: ConvLayer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub encoder: EncoderLayout,
    pub decoder: DecoderLayout,
    /// Number of encoder passes whose features feed the decoder (2 for the
    /// siamese kinds, 1 for the semantic labeler).
    pub branches: usize,
    pub correlation_stages: Vec<usize>,
    pub max_disp: usize,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        match arch {
            Architecture::Change(c) => Self::siamese(c, 2),
            Architecture::Direct(c) => Self::siamese(&c.trunk, 2 * c.num_classes),
            Architecture::Semantic(c) => Self::semantic(c),
        }
    }

    fn siamese(cfg: &CscdNetConfig, out: usize) -> Self {
        let encoder = EncoderLayout::new(&cfg.encoder, 3);
        let corr_channels = (2 * cfg.correlation_max_disp + 1).pow(2);
        let decoder = Self::decoder(&cfg.encoder, 2, |s| {
            if cfg.correlation_stages.contains(&s) {
                corr_channels
            } else {
                0
            }
        }, out);
        Layout {
            encoder,
            decoder,
            branches: 2,
            correlation_stages: cfg.correlation_stages.clone(),
            max_disp: cfg.correlation_max_disp,
            input_channels: 3,
            output_channels: out,
        }
    }

    fn semantic(cfg: &SscdNetConfig) -> Self {
        let encoder = EncoderLayout::new(&cfg.encoder, SscdNetConfig::INPUT_CHANNELS);
        let decoder = Self::decoder(&cfg.encoder, 1, |_| 0, 2 * cfg.num_classes);
        Layout {
            encoder,
            decoder,
            branches: 1,
            correlation_stages: Vec::new(),
            max_disp: 0,
            input_channels: SscdNetConfig::INPUT_CHANNELS,
            output_channels: 2 * cfg.num_classes,
        }
    }

    fn decoder(enc: &EncoderConfig, branches: usize, extra: impl Fn(usize) -> usize, out: usize) -> DecoderLayout {
        let bn = enc.use_batchnorm;
        let widths = &enc.stage_widths;
        let mut levels = Vec::new();
        let mut prev = 0;
        for s in (0..widths.len()).rev() {
            let cin = prev + branches * widths[s] + extra(s);
            levels.push(ConvLayer::new(format!("dec.l{s}"), cin, widths[s], 3, 1, bn));
            prev = widths[s];
        }
        let w0 = widths[0];
        let full = ConvLayer::new("dec.full".into(), prev + branches * w0, w0, 3, 1, bn);
        let mut head = ConvLayer::new("head".into(), w0, out, 1, 1, false);
        head.padding = 0;
        DecoderLayout { levels, full, head }
    }

    /// Every convolution in declaration order.
    pub fn layers(&self) -> Vec<&ConvLayer> {
        let mut v = self.encoder.layers();
        v.extend(&self.decoder.levels);
        v.push(&self.decoder.full);
        v.push(&self.decoder.head);
        v
    }

    pub fn num_stages(&self) -> usize {
        self.encoder.stages.len()
    }
}
