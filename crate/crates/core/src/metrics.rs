//! Hard Dice, 95th-percentile Hausdorff distance and voxel statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::AnnotationMask;

/// Names of the ten default classes, background first.
pub const CLASS_NAMES: [&str; 10] = [
    "Background",
    "BrainStem",
    "Chiasm",
    "Mandible",
    "OpticNerveL",
    "OpticNerveR",
    "ParotidL",
    "ParotidR",
    "SubmandibularL",
    "SubmandibularR",
];

pub fn class_name(class_id: usize) -> String {
    CLASS_NAMES
        .get(class_id)
        .map_or_else(|| format!("class{class_id}"), |s| s.to_string())
}

/// Per-voxel class IDs on an (S, H, W) grid with physical spacing in mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelVolume {
    dims: [usize; 3],
    labels: Vec<u8>,
    spacing: [f64; 3],
    num_classes: usize,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>, spacing: [f64; 3], num_classes: usize) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(
                "label volume",
                "voxels",
                format!("{} labels for dims {dims:?}", labels.len()),
            ));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Config(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(LabelVolume {
            dims,
            labels,
            spacing,
            num_classes,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn get(&self, s: usize, h: usize, w: usize) -> u8 {
        self.labels[(s * self.dims[1] + h) * self.dims[2] + w]
    }

    pub fn count(&self, class_id: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == class_id).count()
    }

    pub fn binary_mask(&self, class_id: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == class_id).collect()
    }
}

fn check_pair(op: &'static str, a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::shape(op, "dims", format!("{:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// Hard (TP, FN, FP) counts of `class_id`, with `truth` as reference.
pub fn confusion_counts(pred: &LabelVolume, truth: &LabelVolume, class_id: usize) -> Result<(usize, usize, usize)> {
    check_pair("confusion", pred, truth)?;
    let c = class_id as u8;
    let (mut tp, mut fn_, mut fp) = (0, 0, 0);
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        match (p == c, t == c) {
            (true, true) => tp += 1,
            (false, true) => fn_ += 1,
            (true, false) => fp += 1,
            _ => {}
        }
    }
    Ok((tp, fn_, fp))
}

/// 2TP / (2TP + FN + FP); 1.0 when the class is empty in both volumes.
pub fn dsc_binary(pred: &LabelVolume, truth: &LabelVolume, class_id: usize) -> Result<f64> {
    let (tp, fn_, fp) = confusion_counts(pred, truth, class_id)?;
    let denom = 2 * tp + fn_ + fp;
    Ok(if denom == 0 { 1.0 } else { (2 * tp) as f64 / denom as f64 })
}

/// Mask voxels with at least one 6-neighbour outside the mask; the volume
/// border counts as outside.
pub fn surface_voxels(mask: &[bool], dims: [usize; 3]) -> Vec<usize> {
    let [ds, dh, dw] = dims;
    let mut out = Vec::new();
    for s in 0..ds {
        for h in 0..dh {
            for w in 0..dw {
                let i = (s * dh + h) * dw + w;
                if !mask[i] {
                    continue;
                }
                let boundary = s == 0
                    || h == 0
                    || w == 0
                    || s + 1 == ds
                    || h + 1 == dh
                    || w + 1 == dw
                    || !mask[i - dh * dw]
                    || !mask[i + dh * dw]
                    || !mask[i - dw]
                    || !mask[i + dw]
                    || !mask[i - 1]
                    || !mask[i + 1];
                if boundary {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// Exact 1D squared-distance transform (lower envelope of parabolas),
/// with `weight` = spacing².
fn edt_1d(f: &[f64], weight: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let isect = |f: &[f64], q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + weight * qf * qf) - (f[p] + weight * pf * pf)) / (2.0 * weight * (qf - pf))
    };
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&top) => {
                    let s = isect(f, q, top);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while j + 1 < v.len() && z[j + 1] < pf {
            j += 1;
        }
        let d = pf - v[j] as f64;
        *o = weight * d * d + f[v[j]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest `true`.
pub fn squared_distance_map(targets: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [ds, dh, dw] = dims;
    let mut g: Vec<f64> = targets.iter().map(|&t| if t { 0.0 } else { f64::INFINITY }).collect();
    let n_max = ds.max(dh).max(dw);
    let (mut line, mut out) = (vec![0.0; n_max], vec![0.0; n_max]);
    let (mut v, mut z) = (Vec::with_capacity(n_max), Vec::with_capacity(n_max));
    // Width, height, then slices.
    let strides = [dh * dw, dw, 1];
    for axis in [2usize, 1, 0] {
        let n = dims[axis];
        let stride = strides[axis];
        let weight = spacing[axis] * spacing[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for k in 0..n {
                    line[k] = g[base + k * stride];
                }
                edt_1d(&line[..n], weight, &mut out[..n], &mut v, &mut z);
                for k in 0..n {
                    g[base + k * stride] = out[k];
                }
            }
        }
    }
    g
}

/// Linear interpolation between order statistics at rank `q·(n − 1)`.
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let rank = q * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = rank - lo as f64;
    Some(values[lo] + t * (values[hi] - values[lo]))
}

fn directed_surface_distances(
    from: &[usize],
    to_mask: &[bool],
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Vec<f64> {
    let edt = squared_distance_map(to_mask, dims, spacing);
    from.iter().map(|&i| edt[i].sqrt()).collect()
}

/// 95th-percentile symmetric surface distance in mm: the larger of the two
/// directed 95th percentiles. `None` unless the class is present in both.
pub fn hd95(pred: &LabelVolume, truth: &LabelVolume, class_id: usize) -> Result<Option<f64>> {
    check_pair("hd95", pred, truth)?;
    if pred.spacing != truth.spacing {
        return Err(Error::shape(
            "hd95",
            "spacing",
            format!("{:?} vs {:?}", pred.spacing, truth.spacing),
        ));
    }
    let (a, b) = (pred.binary_mask(class_id), truth.binary_mask(class_id));
    let (sa, sb) = (surface_voxels(&a, pred.dims), surface_voxels(&b, pred.dims));
    if sa.is_empty() || sb.is_empty() {
        return Ok(None);
    }
    let mut surf_b = vec![false; a.len()];
    sb.iter().for_each(|&i| surf_b[i] = true);
    let mut surf_a = vec![false; a.len()];
    sa.iter().for_each(|&i| surf_a[i] = true);
    let mut ab = directed_surface_distances(&sa, &surf_b, pred.dims, pred.spacing);
    let mut ba = directed_surface_distances(&sb, &surf_a, pred.dims, pred.spacing);
    let pa = percentile(&mut ab, 0.95).unwrap_or(0.0);
    let pb = percentile(&mut ba, 0.95).unwrap_or(0.0);
    Ok(Some(pa.max(pb)))
}

/// Voxel counts per class and their shares of the whole volume and of the
/// foreground (background's foreground share is reported as 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFrequencies {
    pub counts: Vec<u64>,
    pub total: u64,
    pub fraction_of_total: Vec<f64>,
    pub fraction_of_foreground: Vec<f64>,
}

impl ClassFrequencies {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let fg: u64 = counts.iter().skip(1).sum();
        let fraction_of_total = counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect();
        let fraction_of_foreground = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| if i == 0 || fg == 0 { 0.0 } else { c as f64 / fg as f64 })
            .collect();
        ClassFrequencies {
            counts,
            total,
            fraction_of_total,
            fraction_of_foreground,
        }
    }

    /// Pools the counts of several volumes.
    pub fn pooled<'a>(volumes: impl IntoIterator<Item = &'a LabelVolume>, num_classes: usize) -> Self {
        let mut counts = vec![0u64; num_classes];
        for v in volumes {
            for &l in &v.labels {
                counts[l as usize] += 1;
            }
        }
        Self::from_counts(counts)
    }
}

pub fn voxel_class_frequencies(truth: &LabelVolume, num_classes: usize) -> ClassFrequencies {
    ClassFrequencies::pooled(std::iter::once(truth), num_classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub name: String,
    pub annotated: bool,
    pub dsc: Option<f64>,
    pub hd95: Option<f64>,
    /// Ground-truth voxel count.
    pub voxels: u64,
    /// Ground-truth share of the whole volume.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// One entry per foreground class, in class order.
    pub classes: Vec<ClassMetrics>,
    /// Mean DSC over annotated foreground classes.
    pub mean_dsc: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn annotated(&self) -> impl Iterator<Item = &ClassMetrics> {
        self.classes.iter().filter(|c| c.annotated)
    }

    pub fn dsc(&self, class_id: usize) -> Option<f64> {
        self.classes.iter().find(|c| c.class_id == class_id).and_then(|c| c.dsc)
    }

    /// `name,dsc,hd95,voxels,fraction`, one row per annotated class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,dsc,hd95,voxels,fraction\n");
        for c in self.annotated() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                c.name,
                fmt_opt(c.dsc),
                fmt_opt(c.hd95),
                c.voxels,
                c.fraction
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-class DSC and HD95 for annotated foreground classes.
pub fn evaluate(pred: &LabelVolume, truth: &LabelVolume, mask: &AnnotationMask) -> Result<MetricsReport> {
    check_pair("evaluate", pred, truth)?;
    let c = truth.num_classes;
    if mask.len() != c {
        return Err(Error::shape(
            "evaluate",
            "classes",
            format!("mask has {} entries, volume has {c} classes", mask.len()),
        ));
    }
    let freqs = voxel_class_frequencies(truth, c);
    let mut classes = Vec::with_capacity(c.saturating_sub(1));
    for k in 1..c {
        let annotated = mask.is_annotated(k);
        let (dsc, hd) = if annotated {
            (Some(dsc_binary(pred, truth, k)?), hd95(pred, truth, k)?)
        } else {
            (None, None)
        };
        classes.push(ClassMetrics {
            class_id: k,
            name: class_name(k),
            annotated,
            dsc,
            hd95: hd,
            voxels: freqs.counts[k],
            fraction: freqs.fraction_of_total[k],
        });
    }
    let scored: Vec<f64> = classes.iter().filter_map(|m| m.dsc).collect();
    let mean_dsc = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(MetricsReport { classes, mean_dsc })
}
