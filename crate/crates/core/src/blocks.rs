//! Feature-learning blocks: plain two-conv blocks, residual blocks and 3D
//! squeeze-and-excitation residual blocks, plus skip-connection merging.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{
    add, concat_channels, conv3d, dense, global_avg_pool3d, leaky_relu, scale_channels, sigmoid, Tensor,
};

/// Named trainable tensors, in a stable order.
pub type ParamList = Vec<(String, Tensor)>;

/// Uniform `[-1/√fan_in, 1/√fan_in]` weights.
pub(crate) fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::parameter(shape, data).expect("initializer shape")
}

/// A 3D convolution layer with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv {
    /// Cubic kernel of side `k`; padding `k / 2` keeps spatial size at stride 1.
    pub fn new(rng: &mut impl Rng, in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Self {
        let weight = init_uniform(rng, &[out_channels, in_channels, k, k, k], in_channels * k * k * k);
        Conv {
            weight,
            bias: Tensor::parameter(&[out_channels], vec![0.0; out_channels]).expect("bias"),
            stride: [stride; 3],
            padding: [k / 2; 3],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv3d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
    }

    fn collect(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Fully connected layer.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(rng: &mut impl Rng, inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: init_uniform(rng, &[outputs, inputs], inputs),
            bias: Tensor::parameter(&[outputs], vec![0.0; outputs]).expect("bias"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        dense(x, &self.weight, Some(&self.bias))
    }

    fn collect(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// The residual function `F`: conv → LeakyReLU → conv.
///
/// The first conv carries any width change and down-sampling stride.
#[derive(Clone, Debug)]
pub struct ConvPath {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ConvPath {
    pub fn new(rng: &mut impl Rng, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ConvPath {
            conv1: Conv::new(rng, in_channels, out_channels, 3, stride),
            conv2: Conv::new(rng, out_channels, out_channels, 3, 1),
        }
    }

    fn residual(&self, x: &Tensor, slope: f64) -> Result<Tensor> {
        let h = leaky_relu(&self.conv1.forward(x)?, slope);
        self.conv2.forward(&h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Plain,
    Residual,
    SeResidual,
}

#[derive(Clone, Debug)]
pub struct PlainBlockParams {
    pub conv_path: ConvPath,
    pub slope: f64,
}

#[derive(Clone, Debug)]
pub struct ResBlockParams {
    pub conv_path: ConvPath,
    /// 1×1×1 projection used when the block changes width or stride.
    pub shortcut: Option<Conv>,
    pub slope: f64,
}

#[derive(Clone, Debug)]
pub struct SeResBlockParams {
    pub conv_path: ConvPath,
    pub shortcut: Option<Conv>,
    /// K → max(1, K / r).
    pub excite_w1: Dense,
    /// max(1, K / r) → K.
    pub excite_w2: Dense,
    pub reduction: usize,
    pub slope: f64,
}

fn check_channels(op: &'static str, x: &Tensor, expected: usize) -> Result<()> {
    if x.rank() != 5 || x.shape()[1] != expected {
        return Err(Error::shape(
            op,
            "channels",
            format!("block expects {expected} input channels, got shape {:?}", x.shape()),
        ));
    }
    Ok(())
}

fn identity_or_projection(x: &Tensor, shortcut: &Option<Conv>) -> Result<Tensor> {
    match shortcut {
        Some(p) => p.forward(x),
        None => Ok(x.clone()),
    }
}

/// Y = G(s ⊙ F(X) + X) with s = σ(W₂ G(W₁ avgpool(F(X)))).
pub fn se_residual_forward(x: &Tensor, params: &SeResBlockParams) -> Result<Tensor> {
    check_channels("se_residual_forward", x, params.conv_path.conv1.in_channels())?;
    let g = params.slope;
    let residual = params.conv_path.residual(x, g)?;
    let z = global_avg_pool3d(&residual)?;
    let hidden = leaky_relu(&params.excite_w1.forward(&z)?, g);
    let s = sigmoid(&params.excite_w2.forward(&hidden)?);
    let calibrated = scale_channels(&residual, &s)?;
    let skip = identity_or_projection(x, &params.shortcut)?;
    Ok(leaky_relu(&add(&calibrated, &skip)?, g))
}

/// Y = G(F(X) + X).
pub fn residual_forward(x: &Tensor, params: &ResBlockParams) -> Result<Tensor> {
    check_channels("residual_forward", x, params.conv_path.conv1.in_channels())?;
    let residual = params.conv_path.residual(x, params.slope)?;
    let skip = identity_or_projection(x, &params.shortcut)?;
    Ok(leaky_relu(&add(&residual, &skip)?, params.slope))
}

/// Y = G(conv2(G(conv1(X)))).
pub fn plain_forward(x: &Tensor, params: &PlainBlockParams) -> Result<Tensor> {
    check_channels("plain_forward", x, params.conv_path.conv1.in_channels())?;
    let g = params.slope;
    let h = leaky_relu(&params.conv_path.conv1.forward(x)?, g);
    Ok(leaky_relu(&params.conv_path.conv2.forward(&h)?, g))
}

#[derive(Clone, Debug)]
pub enum Block {
    Plain(PlainBlockParams),
    Residual(ResBlockParams),
    SeResidual(SeResBlockParams),
}

impl Block {
    pub fn new(
        rng: &mut impl Rng,
        kind: BlockKind,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        reduction: usize,
        slope: f64,
    ) -> Self {
        let conv_path = ConvPath::new(rng, in_channels, out_channels, stride);
        let needs_projection = in_channels != out_channels || stride != 1;
        let mut shortcut = || needs_projection.then(|| Conv::new(rng, in_channels, out_channels, 1, stride));
        match kind {
            BlockKind::Plain => Block::Plain(PlainBlockParams { conv_path, slope }),
            BlockKind::Residual => Block::Residual(ResBlockParams {
                shortcut: shortcut(),
                conv_path,
                slope,
            }),
            BlockKind::SeResidual => {
                let shortcut = shortcut();
                let hidden = (out_channels / reduction.max(1)).max(1);
                Block::SeResidual(SeResBlockParams {
                    excite_w1: Dense::new(rng, out_channels, hidden),
                    excite_w2: Dense::new(rng, hidden, out_channels),
                    conv_path,
                    shortcut,
                    reduction,
                    slope,
                })
            }
        }
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Plain(_) => BlockKind::Plain,
            Block::Residual(_) => BlockKind::Residual,
            Block::SeResidual(_) => BlockKind::SeResidual,
        }
    }

    pub fn conv_path(&self) -> &ConvPath {
        match self {
            Block::Plain(p) => &p.conv_path,
            Block::Residual(p) => &p.conv_path,
            Block::SeResidual(p) => &p.conv_path,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv_path().conv2.out_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Block::Plain(p) => plain_forward(x, p),
            Block::Residual(p) => residual_forward(x, p),
            Block::SeResidual(p) => se_residual_forward(x, p),
        }
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut ParamList) {
        let path = self.conv_path();
        path.conv1.collect(&format!("{prefix}.conv1"), out);
        path.conv2.collect(&format!("{prefix}.conv2"), out);
        let shortcut = match self {
            Block::Plain(_) => None,
            Block::Residual(p) => p.shortcut.as_ref(),
            Block::SeResidual(p) => p.shortcut.as_ref(),
        };
        if let Some(s) = shortcut {
            s.collect(&format!("{prefix}.shortcut"), out);
        }
        if let Block::SeResidual(p) = self {
            p.excite_w1.collect(&format!("{prefix}.excite1"), out);
            p.excite_w2.collect(&format!("{prefix}.excite2"), out);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeKind {
    Concat,
    Sum,
}

/// How a decoder combines its input with the matching encoder feature.
#[derive(Clone, Debug)]
pub enum MergeMode {
    Concat,
    /// Elementwise sum; the 1×1×1 projection maps the encoder feature to
    /// the decoder's width when they differ.
    Sum(Option<Conv>),
}

impl MergeMode {
    pub fn new(rng: &mut impl Rng, kind: MergeKind, decoder_channels: usize, encoder_channels: usize) -> Self {
        match kind {
            MergeKind::Concat => MergeMode::Concat,
            MergeKind::Sum => MergeMode::Sum(
                (decoder_channels != encoder_channels)
                    .then(|| Conv::new(rng, encoder_channels, decoder_channels, 1, 1)),
            ),
        }
    }

    /// Channel count after merging.
    pub fn merged_channels(&self, decoder_channels: usize, encoder_channels: usize) -> usize {
        match self {
            MergeMode::Concat => decoder_channels + encoder_channels,
            MergeMode::Sum(_) => decoder_channels,
        }
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut ParamList) {
        if let MergeMode::Sum(Some(p)) = self {
            p.collect(&format!("{prefix}.projection"), out);
        }
    }
}

pub fn merge_skip(decoder_feat: &Tensor, encoder_feat: &Tensor, mode: &MergeMode) -> Result<Tensor> {
    let (d, e) = (decoder_feat.shape(), encoder_feat.shape());
    if d.len() != 5 || e.len() != 5 || d[0] != e[0] || d[2..] != e[2..] {
        return Err(Error::shape(
            "merge_skip",
            "spatial",
            format!("decoder {d:?} and encoder {e:?} must agree outside the channel axis"),
        ));
    }
    match mode {
        MergeMode::Concat => concat_channels(decoder_feat, encoder_feat),
        MergeMode::Sum(projection) => {
            let mapped = match projection {
                Some(p) => p.forward(encoder_feat)?,
                None => encoder_feat.clone(),
            };
            add(decoder_feat, &mapped)
        }
    }
}
