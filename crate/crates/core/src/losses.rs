//! Training objectives over class probabilities laid out as `[C, N]`.
//!
//! Every loss is a single fused op whose gradient with respect to the
//! probabilities is written out by hand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossFamily {
    Dice,
    ExpLogDice,
    DiceFocal,
    DiceCrossEntropy,
}

impl LossFamily {
    pub const ALL: [LossFamily; 4] = [
        LossFamily::Dice,
        LossFamily::ExpLogDice,
        LossFamily::DiceFocal,
        LossFamily::DiceCrossEntropy,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LossFamily::Dice => "Dice loss",
            LossFamily::ExpLogDice => "Exp. Log. Dice",
            LossFamily::DiceFocal => "Dice + focal",
            LossFamily::DiceCrossEntropy => "Dice + cross entropy",
        }
    }

    /// Trade-off weight used when none is given.
    pub fn default_lambda(self) -> f64 {
        match self {
            LossFamily::DiceFocal => 0.5,
            LossFamily::DiceCrossEntropy => 0.1,
            LossFamily::Dice | LossFamily::ExpLogDice => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "LossConfigRepr")]
pub struct LossConfig {
    pub family: LossFamily,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_explog: f64,
    pub focal_exponent: f64,
    pub epsilon: f64,
    pub prob_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_family(LossFamily::DiceFocal)
    }
}

/// On-disk form: an omitted `lambda` takes the family's default.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LossConfigRepr {
    #[serde(default = "default_family")]
    family: LossFamily,
    lambda: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    gamma_explog: Option<f64>,
    focal_exponent: Option<f64>,
    epsilon: Option<f64>,
    prob_floor: Option<f64>,
}

fn default_family() -> LossFamily {
    LossFamily::DiceFocal
}

impl From<LossConfigRepr> for LossConfig {
    fn from(r: LossConfigRepr) -> Self {
        let d = LossConfig::for_family(r.family);
        LossConfig {
            family: r.family,
            lambda: r.lambda.unwrap_or(d.lambda),
            alpha: r.alpha.unwrap_or(d.alpha),
            beta: r.beta.unwrap_or(d.beta),
            gamma_explog: r.gamma_explog.unwrap_or(d.gamma_explog),
            focal_exponent: r.focal_exponent.unwrap_or(d.focal_exponent),
            epsilon: r.epsilon.unwrap_or(d.epsilon),
            prob_floor: r.prob_floor.unwrap_or(d.prob_floor),
        }
    }
}

impl LossConfig {
    pub fn for_family(family: LossFamily) -> Self {
        LossConfig {
            family,
            lambda: family.default_lambda(),
            alpha: 0.5,
            beta: 0.5,
            gamma_explog: 0.3,
            focal_exponent: 2.0,
            epsilon: 1e-5,
            prob_floor: 1e-7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Config(format!("loss {what} out of range: {v}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", self.lambda);
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", self.alpha);
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta", self.beta);
        }
        if !(self.gamma_explog > 0.0 && self.gamma_explog.is_finite()) {
            return bad("gamma_explog", self.gamma_explog);
        }
        if !(self.focal_exponent >= 0.0 && self.focal_exponent.is_finite()) {
            return bad("focal_exponent", self.focal_exponent);
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", self.epsilon);
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 1.0) {
            return bad("prob_floor", self.prob_floor);
        }
        Ok(())
    }
}

/// Per-class annotation flags. Entry 0 is set iff every anatomy is annotated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationMask(Vec<bool>);

impl AnnotationMask {
    pub fn new(flags: Vec<bool>) -> Result<Self> {
        if flags.len() < 2 {
            return Err(Error::Config("annotation mask needs at least two classes".into()));
        }
        if flags[0] && !flags.iter().all(|&f| f) {
            return Err(Error::Config(
                "annotation mask flags background but not every anatomy".into(),
            ));
        }
        Ok(AnnotationMask(flags))
    }

    /// Builds the mask from the anatomy flags (classes 1..C).
    pub fn from_anatomies(anatomies: &[bool]) -> Self {
        let mut flags = Vec::with_capacity(anatomies.len() + 1);
        flags.push(anatomies.iter().all(|&a| a));
        flags.extend_from_slice(anatomies);
        AnnotationMask(flags)
    }

    pub fn full(num_classes: usize) -> Self {
        AnnotationMask(vec![true; num_classes])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_annotated(&self, class_id: usize) -> bool {
        self.0.get(class_id).copied().unwrap_or(false)
    }

    pub fn is_full(&self) -> bool {
        self.0[0]
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }
}

/// Positive per-class weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("class weight must be positive, got {w}")));
        }
        Ok(ClassWeights(weights))
    }

    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights(vec![1.0; num_classes])
    }

    /// Reciprocal annotation counts; a zero count is an error.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("class {c} is never annotated")));
        }
        Ok(ClassWeights(counts.iter().map(|&n| 1.0 / n as f64).collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class_id: usize) -> f64 {
        self.0[class_id]
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|w| w * k).collect())
    }
}

pub fn class_weights_from_counts(counts: &[u64]) -> Result<ClassWeights> {
    ClassWeights::from_counts(counts)
}

/// Soft true positives, false negatives and false positives per class.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftConfusion {
    pub tp: Vec<f64>,
    pub fn_: Vec<f64>,
    pub fp: Vec<f64>,
}

fn layout(op: &'static str, p: &Tensor, g: &Tensor) -> Result<(usize, usize)> {
    if p.rank() != 2 {
        return Err(Error::shape(op, "rank", format!("probabilities must be [C, N], got {:?}", p.shape())));
    }
    if p.shape() != g.shape() {
        return Err(Error::shape(
            op,
            "targets",
            format!("{:?} vs {:?}", p.shape(), g.shape()),
        ));
    }
    Ok((p.shape()[0], p.shape()[1]))
}

fn class_factors(op: &'static str, c: usize, mask: &AnnotationMask, w: &ClassWeights) -> Result<Vec<f64>> {
    if mask.len() != c || w.len() != c {
        return Err(Error::shape(
            op,
            "classes",
            format!("{c} classes, mask {}, weights {}", mask.len(), w.len()),
        ));
    }
    Ok((0..c)
        .map(|k| if mask.is_annotated(k) { w.get(k) } else { 0.0 })
        .collect())
}

fn confusion_of(p: &[f64], g: &[f64], c: usize, n: usize) -> SoftConfusion {
    let mut out = SoftConfusion {
        tp: vec![0.0; c],
        fn_: vec![0.0; c],
        fp: vec![0.0; c],
    };
    for k in 0..c {
        let (pr, gr) = (&p[k * n..(k + 1) * n], &g[k * n..(k + 1) * n]);
        let (mut tp, mut fn_, mut fp) = (0.0, 0.0, 0.0);
        for (&pv, &gv) in pr.iter().zip(gr) {
            tp += pv * gv;
            fn_ += (1.0 - pv) * gv;
            fp += pv * (1.0 - gv);
        }
        out.tp[k] = tp;
        out.fn_[k] = fn_;
        out.fp[k] = fp;
    }
    out
}

pub fn soft_confusion(p: &Tensor, g: &Tensor) -> Result<SoftConfusion> {
    let (c, n) = layout("soft_confusion", p, g)?;
    Ok(confusion_of(&p.data(), &g.data(), c, n))
}

/// `(TP + ε) / (TP + α·FN + β·FP + ε)` for one class.
pub fn tversky_term(tp: f64, fn_: f64, fp: f64, alpha: f64, beta: f64, epsilon: f64) -> f64 {
    (tp + epsilon) / (tp + alpha * fn_ + beta * fp + epsilon)
}

/// `C − Σ_c k(c)·T(c)`.
fn weighted_dice(op: &'static str, p: &Tensor, g: &Tensor, k: Vec<f64>, cfg: &LossConfig) -> Result<Tensor> {
    let (c, n) = layout(op, p, g)?;
    let gd = g.to_vec();
    let conf = confusion_of(&p.data(), &gd, c, n);
    let (alpha, beta, eps) = (cfg.alpha, cfg.beta, cfg.epsilon);
    let mut loss = c as f64;
    let mut num = vec![0.0; c];
    let mut den = vec![0.0; c];
    for j in 0..c {
        num[j] = conf.tp[j] + eps;
        den[j] = conf.tp[j] + alpha * conf.fn_[j] + beta * conf.fp[j] + eps;
        loss -= k[j] * num[j] / den[j];
    }
    Ok(Tensor::from_op(
        "dice_loss",
        vec![1],
        vec![loss],
        vec![p.clone()],
        Box::new(move |ctx| {
            let up = ctx.upstream[0];
            let mut dp = vec![0.0; c * n];
            for j in 0..c {
                if k[j] == 0.0 {
                    continue;
                }
                let (nu, de) = (num[j], den[j]);
                let scale = -up * k[j] / (de * de);
                for i in j * n..(j + 1) * n {
                    let gv = gd[i];
                    // dNum = g, dDen = g − α·g + β·(1 − g)
                    let dden = gv - alpha * gv + beta * (1.0 - gv);
                    dp[i] = scale * (gv * de - nu * dden);
                }
            }
            vec![Some(dp)]
        }),
    ))
}

pub fn dice_loss(p: &Tensor, g: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let c = p.shape().first().copied().unwrap_or(0);
    weighted_dice("dice_loss", p, g, vec![1.0; c], cfg)
}

pub fn masked_weighted_dice(
    p: &Tensor,
    g: &Tensor,
    mask: &AnnotationMask,
    w: &ClassWeights,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let (c, _) = layout("masked_weighted_dice", p, g)?;
    let k = class_factors("masked_weighted_dice", c, mask, w)?;
    weighted_dice("masked_weighted_dice", p, g, k, cfg)
}

/// `−(1/N) Σ_c k(c) Σ_n g·(1 − p)^γ·log max(p, floor)`; γ = 0 gives cross-entropy.
fn weighted_focal(
    op: &'static str,
    p: &Tensor,
    g: &Tensor,
    k: Vec<f64>,
    exponent: f64,
    floor: f64,
) -> Result<Tensor> {
    let (c, n) = layout(op, p, g)?;
    let gd = g.to_vec();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    {
        let pd = p.data();
        for j in 0..c {
            if k[j] == 0.0 {
                continue;
            }
            let mut s = 0.0;
            for i in j * n..(j + 1) * n {
                if gd[i] != 0.0 {
                    let pv = pd[i];
                    s += gd[i] * (1.0 - pv).powf(exponent) * pv.max(floor).ln();
                }
            }
            loss -= k[j] * s * inv_n;
        }
    }
    Ok(Tensor::from_op(
        op,
        vec![1],
        vec![loss],
        vec![p.clone()],
        Box::new(move |ctx| {
            let up = ctx.upstream[0];
            let pd = ctx.inputs[0].data();
            let mut dp = vec![0.0; c * n];
            for j in 0..c {
                if k[j] == 0.0 {
                    continue;
                }
                let scale = -up * k[j] * inv_n;
                for i in j * n..(j + 1) * n {
                    let gv = gd[i];
                    if gv == 0.0 {
                        continue;
                    }
                    let pv = pd[i];
                    let q = 1.0 - pv;
                    let log_part = pv.max(floor).ln();
                    let dmod = if exponent == 0.0 {
                        0.0
                    } else {
                        -exponent * q.powf(exponent - 1.0) * log_part
                    };
                    let dlog = if pv > floor { q.powf(exponent) / pv } else { 0.0 };
                    dp[i] = scale * gv * (dmod + dlog);
                }
            }
            vec![Some(dp)]
        }),
    ))
}

pub fn focal_loss(p: &Tensor, g: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let c = p.shape().first().copied().unwrap_or(0);
    weighted_focal("focal_loss", p, g, vec![1.0; c], cfg.focal_exponent, cfg.prob_floor)
}

pub fn cross_entropy_loss(p: &Tensor, g: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let c = p.shape().first().copied().unwrap_or(0);
    weighted_focal("cross_entropy_loss", p, g, vec![1.0; c], 0.0, cfg.prob_floor)
}

pub fn masked_weighted_focal(
    p: &Tensor,
    g: &Tensor,
    mask: &AnnotationMask,
    w: &ClassWeights,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let (c, _) = layout("masked_weighted_focal", p, g)?;
    let k = class_factors("masked_weighted_focal", c, mask, w)?;
    weighted_focal("masked_weighted_focal", p, g, k, cfg.focal_exponent, cfg.prob_floor)
}

pub fn masked_weighted_cross_entropy(
    p: &Tensor,
    g: &Tensor,
    mask: &AnnotationMask,
    w: &ClassWeights,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let (c, _) = layout("masked_weighted_cross_entropy", p, g)?;
    let k = class_factors("masked_weighted_cross_entropy", c, mask, w)?;
    weighted_focal("masked_weighted_cross_entropy", p, g, k, 0.0, cfg.prob_floor)
}

/// `(−ln D)^γ` for a Dice value clamped to `[floor, 1]`.
pub fn exp_log_class_term(d: f64, gamma: f64, floor: f64) -> f64 {
    let d = d.clamp(floor, 1.0);
    (-d.ln()).max(0.0).powf(gamma)
}

/// Derivative of [`exp_log_class_term`] in D: `−γ / (D·(−ln D)^(1−γ))`.
/// `−ln D` is held at or above `floor` so the value stays finite at D = 1.
pub fn exp_log_class_grad(d: f64, gamma: f64, floor: f64) -> f64 {
    if d < floor || d > 1.0 {
        return 0.0;
    }
    let u = (-d.ln()).max(floor);
    -gamma * u.powf(gamma - 1.0) / d
}

fn weighted_exp_log(op: &'static str, p: &Tensor, g: &Tensor, k: Vec<f64>, cfg: &LossConfig) -> Result<Tensor> {
    let (c, n) = layout(op, p, g)?;
    let gd = g.to_vec();
    let conf = confusion_of(&p.data(), &gd, c, n);
    let (eps, gamma, floor) = (cfg.epsilon, cfg.gamma_explog, cfg.prob_floor);
    let inv_c = 1.0 / c as f64;
    let mut num = vec![0.0; c];
    let mut den = vec![0.0; c];
    let mut loss = 0.0;
    for j in 0..c {
        num[j] = 2.0 * conf.tp[j] + eps;
        den[j] = 2.0 * conf.tp[j] + conf.fn_[j] + conf.fp[j] + eps;
        loss += k[j] * exp_log_class_term(num[j] / den[j], gamma, floor) * inv_c;
    }
    Ok(Tensor::from_op(
        op,
        vec![1],
        vec![loss],
        vec![p.clone()],
        Box::new(move |ctx| {
            let up = ctx.upstream[0];
            let mut dp = vec![0.0; c * n];
            for j in 0..c {
                if k[j] == 0.0 {
                    continue;
                }
                let (nu, de) = (num[j], den[j]);
                let dl_dd = up * k[j] * inv_c * exp_log_class_grad(nu / de, gamma, floor);
                if dl_dd == 0.0 {
                    continue;
                }
                for i in j * n..(j + 1) * n {
                    let gv = gd[i];
                    // dNum = 2g, dDen = 1
                    dp[i] = dl_dd * (2.0 * gv * de - nu) / (de * de);
                }
            }
            vec![Some(dp)]
        }),
    ))
}

/// Mean over classes of `(−ln D(c))^γ` with soft Dice `D`.
pub fn exp_log_dice_loss(p: &Tensor, g: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let c = p.shape().first().copied().unwrap_or(0);
    weighted_exp_log("exp_log_dice_loss", p, g, vec![1.0; c], cfg)
}

pub fn masked_weighted_exp_log(
    p: &Tensor,
    g: &Tensor,
    mask: &AnnotationMask,
    w: &ClassWeights,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let (c, _) = layout("masked_weighted_exp_log", p, g)?;
    let k = class_factors("masked_weighted_exp_log", c, mask, w)?;
    weighted_exp_log("masked_weighted_exp_log", p, g, k, cfg)
}

fn combine(dice: Tensor, extra: Option<Tensor>, lambda: f64) -> Result<Tensor> {
    match extra {
        Some(e) if lambda != 0.0 => crate::volgrid::add(&dice, &crate::volgrid::mul_scalar(&e, lambda)),
        _ => Ok(dice),
    }
}

/// The objective selected by `cfg.family`, unmasked.
pub fn hybrid_loss(p: &Tensor, g: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    match cfg.family {
        LossFamily::Dice => dice_loss(p, g, cfg),
        LossFamily::ExpLogDice => exp_log_dice_loss(p, g, cfg),
        LossFamily::DiceFocal => combine(dice_loss(p, g, cfg)?, Some(focal_loss(p, g, cfg)?), cfg.lambda),
        LossFamily::DiceCrossEntropy => {
            combine(dice_loss(p, g, cfg)?, Some(cross_entropy_loss(p, g, cfg)?), cfg.lambda)
        }
    }
}

/// The objective selected by `cfg.family` with missing-annotation masking
/// and per-class weights.
pub fn masked_objective(
    p: &Tensor,
    g: &Tensor,
    mask: &AnnotationMask,
    w: &ClassWeights,
    cfg: &LossConfig,
) -> Result<Tensor> {
    match cfg.family {
        LossFamily::Dice => masked_weighted_dice(p, g, mask, w, cfg),
        LossFamily::ExpLogDice => masked_weighted_exp_log(p, g, mask, w, cfg),
        LossFamily::DiceFocal => combine(
            masked_weighted_dice(p, g, mask, w, cfg)?,
            Some(masked_weighted_focal(p, g, mask, w, cfg)?),
            cfg.lambda,
        ),
        LossFamily::DiceCrossEntropy => combine(
            masked_weighted_dice(p, g, mask, w, cfg)?,
            Some(masked_weighted_cross_entropy(p, g, mask, w, cfg)?),
            cfg.lambda,
        ),
    }
}

/// One-hot `[C, N]` targets from class IDs.
pub fn one_hot(labels: &[u8], num_classes: usize) -> Result<Tensor> {
    let n = labels.len();
    let mut data = vec![0.0; num_classes * n];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= num_classes {
            return Err(Error::Config(format!("label {l} out of range for {num_classes} classes")));
        }
        data[l * n + i] = 1.0;
    }
    Tensor::new(&[num_classes, n], data)
}
