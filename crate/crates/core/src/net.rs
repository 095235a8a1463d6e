//! U-Net assembly: AnatomyNet and its block, merge and down-sampling variants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{init_uniform, merge_skip, Block, BlockKind, Conv, MergeKind, MergeMode, ParamList};
use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::volgrid::{channel_softmax, concat_channels, conv_transpose3d, leaky_relu, Tensor};

/// Where the encoder halves spatial resolution: PoolN down-samples in each
/// of the first N encoder blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolScheme {
    Pool1,
    Pool2,
    Pool3,
    Pool4,
}

impl PoolScheme {
    pub const ALL: [PoolScheme; 4] = [PoolScheme::Pool1, PoolScheme::Pool2, PoolScheme::Pool3, PoolScheme::Pool4];

    pub fn downsamplings(self) -> usize {
        match self {
            PoolScheme::Pool1 => 1,
            PoolScheme::Pool2 => 2,
            PoolScheme::Pool3 => 3,
            PoolScheme::Pool4 => 4,
        }
    }

    /// Whether encoder block `i` (0-based) starts with a stride-2 conv.
    pub fn downsamples_at(self, i: usize) -> bool {
        i < self.downsamplings()
    }

    /// Factor every input dimension must be divisible by.
    pub fn max_reduction(self) -> usize {
        1 << self.downsamplings()
    }

    /// Denominator of encoder block `i`'s feature size relative to the input.
    pub fn reduction_at(self, i: usize) -> usize {
        1 << (i + 1).min(self.downsamplings())
    }

    pub fn label(self) -> &'static str {
        match self {
            PoolScheme::Pool1 => "Pool 1",
            PoolScheme::Pool2 => "Pool 2",
            PoolScheme::Pool3 => "Pool 3",
            PoolScheme::Pool4 => "Pool 4",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub block_kind: BlockKind,
    pub merge: MergeKind,
    pub pool_scheme: PoolScheme,
    pub encoder_channels: [usize; 4],
    pub head_channels: usize,
    pub num_classes: usize,
    pub se_reduction: usize,
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::anatomynet()
    }
}

impl NetworkConfig {
    /// SE residual blocks, concatenated skips, one down-sampling, widths 32–56.
    pub fn anatomynet() -> Self {
        NetworkConfig {
            block_kind: BlockKind::SeResidual,
            merge: MergeKind::Concat,
            pool_scheme: PoolScheme::Pool1,
            encoder_channels: [32, 40, 48, 56],
            head_channels: 16,
            num_classes: 10,
            se_reduction: 4,
            leaky_slope: crate::volgrid::DEFAULT_LEAKY_SLOPE,
        }
    }

    /// Desk-scale AnatomyNet: widths 8/10/12/14, head 8, r = 2.
    pub fn anatomynet_mini() -> Self {
        NetworkConfig {
            encoder_channels: [8, 10, 12, 14],
            head_channels: 8,
            se_reduction: 2,
            ..Self::anatomynet()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.contains(&0) || self.head_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes must be in 2..=255, got {}", self.num_classes)));
        }
        if self.se_reduction == 0 {
            return Err(Error::Config("se_reduction must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky_slope must be in (0, 1), got {}", self.leaky_slope)));
        }
        Ok(())
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let divisor = self.pool_scheme.max_reduction();
        if dims.iter().any(|&d| d == 0 || d % divisor != 0) {
            return Err(Error::Indivisible { dims, divisor });
        }
        Ok(())
    }
}

/// Stride-2, 2³-kernel transposed convolution used for up-sampling.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl UpConv {
    fn new(rng: &mut impl Rng, in_channels: usize, out_channels: usize) -> Self {
        // Each output voxel sees exactly one tap per input channel.
        UpConv {
            weight: init_uniform(rng, &[in_channels, out_channels, 2, 2, 2], in_channels),
            bias: Tensor::parameter(&[out_channels], vec![0.0; out_channels]).expect("bias"),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_transpose3d(x, &self.weight, Some(&self.bias), [2; 3], [0; 3])
    }

    fn collect(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    /// Encoder level whose resolution and width this stage restores.
    level: usize,
    up: Option<UpConv>,
    merge: MergeMode,
    block: Block,
}

/// An instantiated network. Parameters are shared handles, so cloning a
/// `Network` shares its weights.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    encoders: Vec<Block>,
    decoders: Vec<DecoderStage>,
    head_up: UpConv,
    head_conv: Conv,
    out_conv: Conv,
}

/// Deterministically builds `config` with weights drawn from `seed`.
pub fn build(config: &NetworkConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = config.encoder_channels;
    let (kind, r, slope) = (config.block_kind, config.se_reduction, config.leaky_slope);
    let scheme = config.pool_scheme;

    let mut encoders = Vec::with_capacity(4);
    let mut in_ch = 1;
    for (i, &width) in w.iter().enumerate() {
        let stride = if scheme.downsamples_at(i) { 2 } else { 1 };
        encoders.push(Block::new(&mut rng, kind, in_ch, width, stride, r, slope));
        in_ch = width;
    }

    let mut decoders = Vec::with_capacity(3);
    let mut prev = w[3];
    for level in (0..3).rev() {
        let up = scheme.downsamples_at(level + 1).then(|| UpConv::new(&mut rng, prev, prev));
        let merge = MergeMode::new(&mut rng, config.merge, prev, w[level]);
        let merged = merge.merged_channels(prev, w[level]);
        let block = Block::new(&mut rng, kind, merged, w[level], 1, r, slope);
        decoders.push(DecoderStage {
            level,
            up,
            merge,
            block,
        });
        prev = w[level];
    }

    let head_up = UpConv::new(&mut rng, w[0], w[0]);
    let head_conv = Conv::new(&mut rng, w[0] + 1, config.head_channels, 3, 1);
    let out_conv = Conv::new(&mut rng, config.head_channels, config.num_classes, 3, 1);
    Ok(Network {
        config: config.clone(),
        encoders,
        decoders,
        head_up,
        head_conv,
        out_conv,
    })
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Every trainable tensor with a stable name, in build order.
    pub fn named_parameters(&self) -> ParamList {
        let mut out = ParamList::new();
        for (i, e) in self.encoders.iter().enumerate() {
            e.collect_parameters(&format!("encoder{i}"), &mut out);
        }
        for d in &self.decoders {
            let prefix = format!("decoder{}", d.level);
            if let Some(up) = &d.up {
                up.collect(&format!("{prefix}.up"), &mut out);
            }
            d.merge.collect_parameters(&format!("{prefix}.merge"), &mut out);
            d.block.collect_parameters(&prefix, &mut out);
        }
        self.head_up.collect("head.up", &mut out);
        out.push(("head.conv.weight".into(), self.head_conv.weight.clone()));
        out.push(("head.conv.bias".into(), self.head_conv.bias.clone()));
        out.push(("head.out.weight".into(), self.out_conv.weight.clone()));
        out.push(("head.out.bias".into(), self.out_conv.bias.clone()));
        out
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(Tensor::numel).sum()
    }

    /// All parameter values concatenated in build order.
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.parameters().iter().flat_map(|p| p.to_vec()).collect()
    }

    pub fn zero_grad(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }

    /// Bias of the final (class-logit) convolution.
    pub fn output_bias(&self) -> &Tensor {
        &self.out_conv.bias
    }

    /// Class-probability maps `[B, C, S, H, W]` for a `[B, 1, S, H, W]` volume.
    pub fn forward(&self, volume: &Tensor) -> Result<Tensor> {
        let s = volume.shape();
        if s.len() != 5 || s[1] != 1 {
            return Err(Error::shape(
                "network",
                "channels",
                format!("expected a [B, 1, S, H, W] volume, got {s:?}"),
            ));
        }
        self.config.check_dims([s[2], s[3], s[4]])?;
        let slope = self.config.leaky_slope;

        let mut features = Vec::with_capacity(4);
        let mut h = volume.clone();
        for e in &self.encoders {
            h = e.forward(&h)?;
            features.push(h.clone());
        }
        let mut d = h;
        for stage in &self.decoders {
            if let Some(up) = &stage.up {
                d = up.forward(&d)?;
            }
            d = merge_skip(&d, &features[stage.level], &stage.merge)?;
            d = stage.block.forward(&d)?;
        }
        let up = self.head_up.forward(&d)?;
        let joined = concat_channels(&up, volume)?;
        let hidden = leaky_relu(&self.head_conv.forward(&joined)?, slope);
        channel_softmax(&self.out_conv.forward(&hidden)?)
    }
}

/// Output shape of each stage for a single-channel input of `dims`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub name: String,
    pub channels: usize,
    pub dims: [usize; 3],
}

/// Shapes reported for every block without running the network.
pub fn feature_map_shapes(config: &NetworkConfig, dims: [usize; 3]) -> Result<Vec<StageShape>> {
    config.validate()?;
    config.check_dims(dims)?;
    let scheme = config.pool_scheme;
    let w = config.encoder_channels;
    let at = |level: usize| dims.map(|d| d / scheme.reduction_at(level));
    let mut out = Vec::new();
    for (i, &width) in w.iter().enumerate() {
        out.push(StageShape {
            name: format!("encoder{i}"),
            channels: width,
            dims: at(i),
        });
    }
    for level in (0..3).rev() {
        out.push(StageShape {
            name: format!("decoder{level}"),
            channels: w[level],
            dims: at(level),
        });
    }
    out.push(StageShape {
        name: "head.up".into(),
        channels: w[0],
        dims,
    });
    out.push(StageShape {
        name: "head.conv".into(),
        channels: config.head_channels,
        dims,
    });
    out.push(StageShape {
        name: "output".into(),
        channels: config.num_classes,
        dims,
    });
    Ok(out)
}

/// Per-voxel argmax; ties resolve to the lowest class index.
pub fn predict_labels(probabilities: &Tensor) -> Result<LabelVolume> {
    let s = probabilities.shape();
    if s.len() != 5 || s[0] != 1 {
        return Err(Error::shape(
            "predict_labels",
            "batch",
            format!("expected [1, C, S, H, W], got {s:?}"),
        ));
    }
    let (c, dims) = (s[1], [s[2], s[3], s[4]]);
    if c > 255 {
        return Err(Error::shape("predict_labels", "channels", "at most 255 classes"));
    }
    let sp: usize = dims.iter().product();
    let p = probabilities.data();
    let labels = (0..sp)
        .map(|v| {
            let mut best = 0;
            for k in 1..c {
                if p[k * sp + v] > p[best * sp + v] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new(dims, labels, [1.0; 3], c)
}
