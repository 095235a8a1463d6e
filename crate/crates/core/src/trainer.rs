//! Optimizers, on-the-fly augmentation and the two-phase training loop.

use std::ops::ControlFlow;
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{masked_objective, one_hot, ClassWeights, LossConfig};
use crate::metrics::{evaluate, LabelVolume};
use crate::net::{predict_labels, Network};
use crate::phantom::{mix_seed, Dataset, Sample};
use crate::volgrid::{no_grad, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    RMSprop,
    SgdMomentum,
}

/// Optimizer hyper-parameters plus one state buffer per parameter
/// (squared-gradient average for RMSprop, velocity for SGD).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub rho: f64,
    pub delta: f64,
    pub momentum: f64,
    pub buffers: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn rmsprop(params: &[Tensor], learning_rate: f64, rho: f64, delta: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::RMSprop,
            learning_rate,
            rho,
            delta,
            momentum: 0.0,
            buffers: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn sgd_momentum(params: &[Tensor], learning_rate: f64, momentum: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            rho: 0.0,
            delta: 0.0,
            momentum,
            buffers: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn for_phase(params: &[Tensor], phase: &PhaseConfig) -> Self {
        match phase.optimizer {
            OptimizerKind::RMSprop => Self::rmsprop(params, phase.learning_rate, phase.rho, phase.delta),
            OptimizerKind::SgdMomentum => Self::sgd_momentum(params, phase.learning_rate, phase.momentum),
        }
    }

    pub fn step(&mut self, params: &[Tensor], grads: &[Vec<f64>]) -> Result<()> {
        match self.kind {
            OptimizerKind::RMSprop => rmsprop_step(params, grads, self),
            OptimizerKind::SgdMomentum => sgd_momentum_step(params, grads, self),
        }
    }
}

fn check_congruent(op: &'static str, params: &[Tensor], grads: &[Vec<f64>], state: &OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.buffers.len() {
        return Err(Error::shape(
            op,
            "parameters",
            format!(
                "{} parameters, {} gradients, {} state buffers",
                params.len(),
                grads.len(),
                state.buffers.len()
            ),
        ));
    }
    for (i, ((p, g), b)) in params.iter().zip(grads).zip(&state.buffers).enumerate() {
        if g.len() != p.numel() || b.len() != p.numel() {
            return Err(Error::shape(
                op,
                format!("parameter {i}"),
                format!("{} values, gradient {}, state {}", p.numel(), g.len(), b.len()),
            ));
        }
    }
    Ok(())
}

/// `v ← ρv + (1−ρ)g²; θ ← θ − lr·g/(√v + δ)`.
pub fn rmsprop_step(params: &[Tensor], grads: &[Vec<f64>], state: &mut OptimizerState) -> Result<()> {
    check_congruent("rmsprop_step", params, grads, state)?;
    let (lr, rho, delta) = (state.learning_rate, state.rho, state.delta);
    for ((p, g), v) in params.iter().zip(grads).zip(state.buffers.iter_mut()) {
        let mut data = p.data_mut();
        for ((theta, &gi), vi) in data.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = rho * *vi + (1.0 - rho) * gi * gi;
            *theta -= lr * gi / (vi.sqrt() + delta);
        }
    }
    Ok(())
}

/// `v ← μv + g; θ ← θ − lr·v`.
pub fn sgd_momentum_step(params: &[Tensor], grads: &[Vec<f64>], state: &mut OptimizerState) -> Result<()> {
    check_congruent("sgd_momentum_step", params, grads, state)?;
    let (lr, mu) = (state.learning_rate, state.momentum);
    for ((p, g), v) in params.iter().zip(grads).zip(state.buffers.iter_mut()) {
        let mut data = p.data_mut();
        for ((theta, &gi), vi) in data.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi + gi;
            *theta -= lr * *vi;
        }
    }
    Ok(())
}

/// Affine draw: rotations in degrees about the (slice, height, width) axes,
/// isotropic scale and translation in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: [f64; 3],
    pub scale: f64,
    pub translation: [f64; 3],
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: [0.0; 3],
        scale: 1.0,
        translation: [0.0; 3],
    };

    pub fn draw(rng: &mut impl Rng, dims: [usize; 3], cfg: &AugmentConfig) -> Self {
        let r = cfg.max_rotation_deg;
        let [s0, s1] = cfg.scale_range;
        let t = cfg.max_translation_frac;
        AffineParams {
            rotation_deg: std::array::from_fn(|_| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 }),
            scale: if s1 > s0 { rng.random_range(s0..=s1) } else { s0 },
            translation: std::array::from_fn(|i| {
                let m = t * dims[i] as f64;
                if m > 0.0 {
                    rng.random_range(-m..=m)
                } else {
                    0.0
                }
            }),
        }
    }

    /// Rotation R = R_w · R_h · R_s.
    fn rotation(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.rotation_deg.map(f64::to_radians);
        let rs = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
        let rh = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
        let rw = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
        matmul3(&rw, &matmul3(&rh, &rs))
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Smoothed random displacement field, three components per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub dims: [usize; 3],
    /// Component-major: `data[axis * N + voxel]`, in voxels.
    pub data: Vec<f64>,
}

impl DisplacementField {
    pub fn zero(dims: [usize; 3]) -> Self {
        DisplacementField {
            dims,
            data: vec![0.0; 3 * dims.iter().product::<usize>()],
        }
    }

    pub fn at(&self, voxel: usize) -> [f64; 3] {
        let n = self.data.len() / 3;
        [self.data[voxel], self.data[n + voxel], self.data[2 * n + voxel]]
    }

    /// Gaussian noise of std `sigma_field`, smoothed by a Gaussian of std
    /// `sigma_smooth`, each vector's length capped at `cap`.
    pub fn random(dims: [usize; 3], sigma_field: f64, sigma_smooth: f64, cap: f64, rng: &mut impl Rng) -> Self {
        let mut field = Self::zero(dims);
        if sigma_field <= 0.0 {
            return field;
        }
        let n: usize = dims.iter().product();
        let normal = Normal::new(0.0, sigma_field).expect("positive std");
        for v in field.data.iter_mut() {
            *v = normal.sample(rng);
        }
        if sigma_smooth > 0.0 {
            let kernel = gaussian_kernel(sigma_smooth);
            for comp in 0..3 {
                let slice = &mut field.data[comp * n..(comp + 1) * n];
                for axis in 0..3 {
                    smooth_axis(slice, dims, axis, &kernel);
                }
            }
        }
        for i in 0..n {
            let [a, b, c] = field.at(i);
            let len = (a * a + b * b + c * c).sqrt();
            if len > cap {
                let k = cap / len;
                field.data[i] *= k;
                field.data[n + i] *= k;
                field.data[2 * n + i] *= k;
            }
        }
        field
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Zero-padded 1D convolution along `axis`.
fn smooth_axis(data: &mut [f64], dims: [usize; 3], axis: usize, kernel: &[f64]) {
    let strides = [dims[1] * dims[2], dims[2], 1];
    let len = dims[axis];
    let radius = (kernel.len() / 2) as isize;
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let mut line = vec![0.0; len];
    for i in 0..dims[others[0]] {
        for j in 0..dims[others[1]] {
            let base = i * strides[others[0]] + j * strides[others[1]];
            for (k, l) in line.iter_mut().enumerate() {
                *l = data[base + k * strides[axis]];
            }
            for k in 0..len as isize {
                let mut acc = 0.0;
                for (t, &w) in kernel.iter().enumerate() {
                    let src = k + t as isize - radius;
                    if src >= 0 && src < len as isize {
                        acc += w * line[src as usize];
                    }
                }
                data[base + k as usize * strides[axis]] = acc;
            }
        }
    }
}

/// Trilinear interpolation; samples outside the grid read as 0.
fn trilinear(vol: &[f64], dims: [usize; 3], q: [f64; 3]) -> f64 {
    let base = q.map(f64::floor);
    let frac = [q[0] - base[0], q[1] - base[1], q[2] - base[2]];
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut weight = 1.0;
        let mut idx = 0usize;
        let mut inside = true;
        for axis in 0..3 {
            let hi = (corner >> (2 - axis)) & 1 == 1;
            let coord = base[axis] as i64 + hi as i64;
            weight *= if hi { frac[axis] } else { 1.0 - frac[axis] };
            if coord < 0 || coord >= dims[axis] as i64 {
                inside = false;
            } else {
                idx = idx * dims[axis] + coord as usize;
            }
        }
        if inside && weight != 0.0 {
            acc += weight * vol[idx];
        }
    }
    acc
}

fn nearest(labels: &[u8], dims: [usize; 3], q: [f64; 3]) -> u8 {
    let mut idx = 0usize;
    for axis in 0..3 {
        let c = q[axis].round();
        if c < 0.0 || c >= dims[axis] as f64 {
            return 0;
        }
        idx = idx * dims[axis] + c as usize;
    }
    labels[idx]
}

/// Resamples intensities (trilinear) and labels (nearest) through a map from
/// output voxel to source position.
fn resample(sample: &Sample, map: impl Fn([f64; 3], usize) -> [f64; 3]) -> Result<Sample> {
    let dims = sample.labels.dims();
    let src = sample.volume.data();
    let lab = sample.labels.labels();
    let n: usize = dims.iter().product();
    let mut vol = vec![0.0; n];
    let mut out_labels = vec![0u8; n];
    let mut i = 0;
    for s in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let q = map([s as f64, h as f64, w as f64], i);
                vol[i] = trilinear(&src, dims, q);
                out_labels[i] = nearest(lab, dims, q);
                i += 1;
            }
        }
    }
    Ok(Sample {
        volume: Tensor::new(sample.volume.shape(), vol)?,
        labels: LabelVolume::new(dims, out_labels, sample.labels.spacing(), sample.labels.num_classes())?,
        mask: sample.mask.clone(),
    })
}

/// Applies `params` about the volume centre.
pub fn apply_affine(sample: &Sample, params: &AffineParams) -> Result<Sample> {
    let dims = sample.labels.dims();
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let r = params.rotation();
    let inv_s = 1.0 / params.scale;
    let t = params.translation;
    resample(sample, |p, _| {
        let d = [p[0] - c[0] - t[0], p[1] - c[1] - t[1], p[2] - c[2] - t[2]];
        // Rᵀ d / s
        std::array::from_fn(|i| c[i] + (r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2]) * inv_s)
    })
}

/// Random rotation, scale and translation drawn from `cfg`.
pub fn augment_affine(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_affine(sample, &AffineParams::draw(&mut rng, sample.labels.dims(), cfg))
}

/// Samples each output voxel at its position plus the displacement.
pub fn apply_displacement(sample: &Sample, field: &DisplacementField) -> Result<Sample> {
    if field.dims != sample.labels.dims() {
        return Err(Error::shape(
            "apply_displacement",
            "dims",
            format!("{:?} vs {:?}", field.dims, sample.labels.dims()),
        ));
    }
    resample(sample, |p, i| {
        let d = field.at(i);
        [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
    })
}

pub fn augment_elastic(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = DisplacementField::random(
        sample.labels.dims(),
        cfg.elastic_sigma_field,
        cfg.elastic_sigma_smooth,
        cfg.elastic_cap,
        &mut rng,
    );
    apply_displacement(sample, &field)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub affine: bool,
    pub elastic: bool,
    /// Each enabled augmentation fires independently with this probability.
    pub probability: f64,
    pub max_rotation_deg: f64,
    pub scale_range: [f64; 2],
    pub max_translation_frac: f64,
    pub elastic_sigma_field: f64,
    pub elastic_sigma_smooth: f64,
    pub elastic_cap: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            affine: true,
            elastic: true,
            probability: 0.5,
            max_rotation_deg: 10.0,
            scale_range: [0.95, 1.05],
            max_translation_frac: 0.04,
            elastic_sigma_field: 40.0,
            elastic_sigma_smooth: 4.0,
            elastic_cap: 3.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            affine: false,
            elastic: false,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config("augmentation probability must lie in [0, 1]".into()));
        }
        let [s0, s1] = self.scale_range;
        if !(s0 > 0.0 && s1 >= s0) {
            return Err(Error::Config("scale range must be positive and ordered".into()));
        }
        if self.max_rotation_deg < 0.0
            || self.max_translation_frac < 0.0
            || self.elastic_sigma_field < 0.0
            || self.elastic_sigma_smooth < 0.0
            || self.elastic_cap < 0.0
        {
            return Err(Error::Config("augmentation magnitudes must be non-negative".into()));
        }
        Ok(())
    }
}

/// Applies the enabled augmentations, each on an independent coin flip.
pub fn augment(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let do_affine = cfg.affine && rng.random_bool(cfg.probability);
    let do_elastic = cfg.elastic && rng.random_bool(cfg.probability);
    let (affine_seed, elastic_seed) = (rng.random::<u64>(), rng.random::<u64>());
    let mut out = if do_affine {
        augment_affine(sample, affine_seed, cfg)?
    } else {
        sample.clone()
    };
    if do_elastic {
        out = augment_elastic(&out, elastic_seed, cfg)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_rho() -> f64 {
    0.9
}

fn default_delta() -> f64 {
    1e-8
}

fn default_momentum() -> f64 {
    0.9
}

impl PhaseConfig {
    pub fn rmsprop(learning_rate: f64, epochs: usize) -> Self {
        PhaseConfig {
            optimizer: OptimizerKind::RMSprop,
            learning_rate,
            epochs,
            rho: default_rho(),
            delta: default_delta(),
            momentum: default_momentum(),
        }
    }

    pub fn sgd_momentum(learning_rate: f64, epochs: usize) -> Self {
        PhaseConfig {
            optimizer: OptimizerKind::SgdMomentum,
            ..Self::rmsprop(learning_rate, epochs)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weighting {
    /// Reciprocal of the number of training samples annotating each class.
    InverseCounts,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    /// Always 1.
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub shuffle: bool,
    pub weighting: Weighting,
    /// Held-out evaluation cadence in epochs; 0 disables it.
    pub eval_every: usize,
    /// Checkpoint cadence in epochs; 0 keeps only the phase boundary.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainSchedule {
    /// 30 RMSprop epochs then 10 SGD epochs.
    pub fn desk() -> Self {
        TrainSchedule {
            phase1: PhaseConfig::rmsprop(0.002, 30),
            phase2: PhaseConfig::sgd_momentum(0.001, 10),
            batch_size: 1,
            augment: AugmentConfig::default(),
            shuffle: true,
            weighting: Weighting::InverseCounts,
            eval_every: 1,
            checkpoint_every: 0,
            seed: 0,
        }
    }

    /// 150 RMSprop epochs then 50 SGD epochs.
    pub fn paper() -> Self {
        TrainSchedule {
            phase1: PhaseConfig::rmsprop(0.002, 150),
            phase2: PhaseConfig::sgd_momentum(0.001, 50),
            ..Self::desk()
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.phase1.epochs + self.phase2.epochs
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(Error::Config(format!("batch size must be 1, got {}", self.batch_size)));
        }
        for p in [&self.phase1, &self.phase2] {
            if !(p.learning_rate >= 0.0 && p.learning_rate.is_finite()) {
                return Err(Error::Config(format!("invalid learning rate {}", p.learning_rate)));
            }
            if !(0.0..1.0).contains(&p.rho) || !(0.0..1.0).contains(&p.momentum) || !(p.delta > 0.0) {
                return Err(Error::Config("optimizer constants out of range".into()));
            }
        }
        self.augment.validate()
    }
}

/// Random access to training samples.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Sample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn get(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Dataset {
    fn len(&self) -> usize {
        Dataset::len(self) as usize
    }

    fn get(&self, index: usize) -> Result<Sample> {
        Dataset::get(self, index as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub mean_loss: f64,
    /// Mean DSC over annotated foreground classes of the held-out samples.
    pub held_out_dsc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl History {
    /// `step,epoch,loss,phase,lr`, one row per optimizer step.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,loss,phase,lr\n");
        for r in &self.steps {
            s.push_str(&format!("{},{},{},{},{}\n", r.step, r.epoch, r.loss, r.phase, r.lr));
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.loss).collect()
    }
}

/// Progress notifications; the observer may stop training early.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
    Checkpoint { epoch: usize, phase_boundary: bool },
}

/// Class weights from the annotation masks of `data`. Under
/// [`Weighting::InverseCounts`], classes no sample annotates get weight 1
/// (they are masked everywhere, so the value never enters the loss).
pub fn training_class_weights(data: &dyn SampleSource, num_classes: usize, weighting: Weighting) -> Result<ClassWeights> {
    if weighting == Weighting::Uniform {
        return Ok(ClassWeights::uniform(num_classes));
    }
    let mut counts = vec![0u64; num_classes];
    for i in 0..data.len() {
        let s = data.get(i)?;
        if s.mask.len() != num_classes {
            return Err(Error::Config(format!(
                "sample {i} has {} classes, network has {num_classes}",
                s.mask.len()
            )));
        }
        for (c, n) in counts.iter_mut().enumerate() {
            *n += s.mask.is_annotated(c) as u64;
        }
    }
    ClassWeights::new(
        counts
            .into_iter()
            .map(|n| if n == 0 { 1.0 } else { 1.0 / n as f64 })
            .collect(),
    )
}

/// Single-sample loss and its parameter gradients.
pub fn loss_and_gradients(
    net: &Network,
    sample: &Sample,
    weights: &ClassWeights,
    loss: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let params = net.parameters();
    net.zero_grad();
    let probs = net.forward(&sample.volume)?;
    let c = probs.shape()[1];
    let n = sample.labels.labels().len();
    let p = probs.reshape(&[c, n])?;
    let g = one_hot(sample.labels.labels(), c)?;
    let l = masked_objective(&p, &g, &sample.mask, weights, loss)?;
    let value = l.item();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    l.backward()?;
    let grads = params
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((value, grads))
}

/// Mean DSC over annotated foreground classes.
pub fn held_out_dsc(net: &Network, samples: &[Sample]) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    for s in samples {
        let probs = no_grad(|| net.forward(&s.volume))?;
        let pred = predict_labels(&probs)?.with_spacing(s.labels.spacing())?;
        if let Some(m) = evaluate(&pred, &s.labels, &s.mask)?.mean_dsc {
            scores.push(m);
        }
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

pub fn train(
    net: &Network,
    data: &dyn SampleSource,
    held_out: &[Sample],
    loss: &LossConfig,
    schedule: &TrainSchedule,
) -> Result<History> {
    train_with(net, data, held_out, loss, schedule, |_, _| Ok(ControlFlow::Continue(())))
}

/// Trains in place. Samples are prepared one step ahead on a helper thread.
pub fn train_with<F>(
    net: &Network,
    data: &dyn SampleSource,
    held_out: &[Sample],
    loss: &LossConfig,
    schedule: &TrainSchedule,
    mut observer: F,
) -> Result<History>
where
    F: FnMut(TrainEvent<'_>, &Network) -> Result<ControlFlow<()>>,
{
    schedule.validate()?;
    loss.validate()?;
    if data.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let num_classes = net.config().num_classes;
    let weights = training_class_weights(data, num_classes, schedule.weighting)?;
    let params = net.parameters();

    // (step, epoch, sample index) for the whole run.
    let mut plan = Vec::with_capacity(schedule.total_epochs() * data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..schedule.total_epochs() {
        if schedule.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(schedule.seed, epoch as u64));
            order.shuffle(&mut rng);
        }
        for &i in &order {
            plan.push((plan.len(), epoch, i));
        }
    }

    let mut history = History::default();
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Sample>>(1);
        let plan_ref = &plan;
        let augment_cfg = &schedule.augment;
        let aug_seed = mix_seed(schedule.seed, u64::MAX);
        scope.spawn(move || {
            for &(step, _, idx) in plan_ref {
                let prepared = data
                    .get(idx)
                    .and_then(|s| augment(&s, mix_seed(aug_seed, step as u64), augment_cfg));
                if tx.send(prepared).is_err() {
                    break;
                }
            }
        });

        let mut optimizer = OptimizerState::for_phase(&params, &schedule.phase1);
        let mut epoch_losses = Vec::new();
        for (k, &(step, epoch, _)) in plan.iter().enumerate() {
            let phase_cfg = if epoch < schedule.phase1.epochs {
                &schedule.phase1
            } else {
                &schedule.phase2
            };
            let phase = if epoch < schedule.phase1.epochs { 1 } else { 2 };
            let sample = rx
                .recv()
                .map_err(|_| Error::Config("sample producer stopped".into()))??;
            let (value, grads) = loss_and_gradients(net, &sample, &weights, loss)?;
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            optimizer.step(&params, &grads)?;
            net.zero_grad();
            let record = StepRecord {
                step,
                epoch,
                phase,
                lr: phase_cfg.learning_rate,
                loss: value,
            };
            epoch_losses.push(value);
            history.steps.push(record);
            if observer(TrainEvent::Step(history.steps.last().unwrap()), net)?.is_break() {
                history.stopped_early = true;
                return Ok(());
            }

            let epoch_done = plan.get(k + 1).is_none_or(|&(_, e, _)| e != epoch);
            if !epoch_done {
                continue;
            }
            let completed = epoch + 1;
            let evaluate_now = schedule.eval_every > 0 && !held_out.is_empty() && completed % schedule.eval_every == 0;
            let rec = EpochRecord {
                epoch,
                phase,
                mean_loss: epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64,
                held_out_dsc: if evaluate_now { held_out_dsc(net, held_out)? } else { None },
            };
            epoch_losses.clear();
            history.epochs.push(rec);
            if observer(TrainEvent::Epoch(history.epochs.last().unwrap()), net)?.is_break() {
                history.stopped_early = true;
                return Ok(());
            }
            let boundary = completed == schedule.phase1.epochs;
            let cadence = schedule.checkpoint_every > 0 && completed % schedule.checkpoint_every == 0;
            if boundary || cadence {
                let event = TrainEvent::Checkpoint {
                    epoch,
                    phase_boundary: boundary,
                };
                if observer(event, net)?.is_break() {
                    history.stopped_early = true;
                    return Ok(());
                }
            }
            if boundary {
                optimizer = OptimizerState::for_phase(&params, &schedule.phase2);
            }
        }
        Ok(())
    })?;
    Ok(history)
}
