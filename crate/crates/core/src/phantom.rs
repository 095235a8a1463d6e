//! Synthetic head-and-neck phantoms with calibrated class imbalance and
//! randomly missing annotations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::AnnotationMask;
use crate::metrics::LabelVolume;
use crate::volgrid::Tensor;

pub const NUM_CLASSES: usize = 10;

/// Table of annotation counts per anatomy (classes 1..=9) in the training set.
pub const ANNOTATION_COUNTS: [u64; 9] = [196, 129, 227, 133, 133, 257, 256, 135, 130];

/// Geometric primitive in fractional (slice, height, width) coordinates.
/// Sizes are derived from the class's target volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    /// Ellipsoid with relative semi-axes; `tilt_deg` bounds a random
    /// rotation in the height-width plane.
    Ellipsoid {
        center: [f64; 3],
        aspect: [f64; 3],
        tilt_deg: f64,
    },
    /// Round tube with hemispherical caps between two points.
    Capsule { start: [f64; 3], end: [f64; 3] },
    /// Elliptic cylinder along the slice axis.
    Cylinder {
        center_hw: [f64; 2],
        slices: [f64; 2],
        aspect_hw: [f64; 2],
    },
    /// Anterior half annulus extruded along the slice axis; the outer radius
    /// is a fraction of the smaller in-plane dimension.
    ArcPlate {
        center_hw: [f64; 2],
        slices: [f64; 2],
        outer_radius: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureTemplate {
    pub class_id: u8,
    pub primitive: Primitive,
    /// Mean intensity inside the structure.
    pub intensity: f64,
    /// Target share of all foreground voxels.
    pub foreground_share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    /// Target fraction of voxels that belong to no anatomy.
    pub background_fraction: f64,
    pub body_intensity: f64,
    pub noise_sigma: f64,
    /// Uniform centre jitter range in voxels.
    pub jitter_voxels: f64,
    pub structures: Vec<StructureTemplate>,
    /// Per-class probability that an anatomy's annotation is missing;
    /// entry 0 is unused.
    pub drop_probabilities: Vec<f64>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::with_dims([64, 64, 64], 0)
    }
}

fn default_drop_probabilities() -> Vec<f64> {
    let max = *ANNOTATION_COUNTS.iter().max().unwrap() as f64;
    std::iter::once(0.0)
        .chain(ANNOTATION_COUNTS.iter().map(|&c| 1.0 - c as f64 / max))
        .collect()
}

fn default_structures() -> Vec<StructureTemplate> {
    use Primitive::*;
    let t = |class_id, primitive, intensity, foreground_share| StructureTemplate {
        class_id,
        primitive,
        intensity,
        foreground_share,
    };
    vec![
        t(
            3,
            ArcPlate {
                center_hw: [0.45, 0.5],
                slices: [0.14, 0.24],
                outer_radius: 0.3,
            },
            0.95,
            0.3715,
        ),
        t(
            6,
            Ellipsoid {
                center: [0.45, 0.55, 0.2],
                aspect: [1.3, 1.0, 0.6],
                tilt_deg: 8.0,
            },
            0.42,
            0.175,
        ),
        t(
            7,
            Ellipsoid {
                center: [0.45, 0.55, 0.8],
                aspect: [1.3, 1.0, 0.6],
                tilt_deg: 8.0,
            },
            0.46,
            0.175,
        ),
        t(
            8,
            Ellipsoid {
                center: [0.32, 0.35, 0.3],
                aspect: [1.0, 1.0, 1.0],
                tilt_deg: 0.0,
            },
            0.50,
            0.045,
        ),
        t(
            9,
            Ellipsoid {
                center: [0.32, 0.35, 0.7],
                aspect: [1.0, 1.0, 1.0],
                tilt_deg: 0.0,
            },
            0.54,
            0.045,
        ),
        t(
            1,
            Cylinder {
                center_hw: [0.58, 0.5],
                slices: [0.35, 0.65],
                aspect_hw: [1.0, 1.1],
            },
            0.58,
            0.165,
        ),
        t(
            4,
            Capsule {
                start: [0.70, 0.42, 0.42],
                end: [0.72, 0.24, 0.30],
            },
            0.66,
            0.01,
        ),
        t(
            5,
            Capsule {
                start: [0.70, 0.42, 0.58],
                end: [0.72, 0.24, 0.70],
            },
            0.70,
            0.01,
        ),
        t(
            2,
            Ellipsoid {
                center: [0.70, 0.45, 0.5],
                aspect: [0.5, 0.6, 1.2],
                tilt_deg: 0.0,
            },
            0.78,
            0.0035,
        ),
    ]
}

impl PhantomSpec {
    pub fn with_dims(dims: [usize; 3], seed: u64) -> Self {
        PhantomSpec {
            dims,
            spacing: [1.0; 3],
            seed,
            background_fraction: 0.9818,
            body_intensity: 0.25,
            noise_sigma: 0.02,
            jitter_voxels: 1.0,
            structures: default_structures(),
            drop_probabilities: default_drop_probabilities(),
        }
    }

    /// Same geometry with every annotation present.
    pub fn fully_annotated(mut self) -> Self {
        self.drop_probabilities = vec![0.0; NUM_CLASSES];
        self
    }

    pub fn num_classes(&self) -> usize {
        self.drop_probabilities.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::Phantom(format!("dims must be at least 16 per axis, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Phantom(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if !(self.background_fraction > 0.0 && self.background_fraction < 1.0) {
            return Err(Error::Phantom("background fraction must lie in (0, 1)".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.jitter_voxels >= 0.0) {
            return Err(Error::Phantom("noise and jitter must be non-negative".into()));
        }
        let c = self.num_classes();
        if !(2..=256).contains(&c) {
            return Err(Error::Phantom(format!("unsupported class count {c}")));
        }
        if self.drop_probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Phantom("drop probabilities must lie in [0, 1]".into()));
        }
        for s in &self.structures {
            if s.class_id == 0 || s.class_id as usize >= c {
                return Err(Error::Phantom(format!("structure class {} out of range", s.class_id)));
            }
            if !(s.foreground_share > 0.0) {
                return Err(Error::Phantom(format!("class {} has no volume", s.class_id)));
            }
        }
        Ok(())
    }

    fn target_voxels(&self, share: f64) -> f64 {
        let n: usize = self.dims.iter().product();
        n as f64 * (1.0 - self.background_fraction) * share
    }
}

/// One generated phantom.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Intensities in [0, 1], shaped `[1, 1, S, H, W]`.
    pub volume: Tensor,
    pub labels: LabelVolume,
    pub mask: AnnotationMask,
}

/// A sized primitive placed in voxel coordinates.
enum Shape {
    Ellipsoid {
        c: [f64; 3],
        r: [f64; 3],
        cos: f64,
        sin: f64,
    },
    Capsule {
        a: [f64; 3],
        b: [f64; 3],
        r: f64,
    },
    Cylinder {
        c: [f64; 2],
        r: [f64; 2],
        s: [f64; 2],
    },
    Arc {
        c: [f64; 2],
        r_in: f64,
        r_out: f64,
        s: [f64; 2],
    },
}

impl Shape {
    fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Shape::Ellipsoid { c, r, cos, sin } => {
                let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                let (u, v) = (cos * d[1] + sin * d[2], -sin * d[1] + cos * d[2]);
                (d[0] / r[0]).powi(2) + (u / r[1]).powi(2) + (v / r[2]).powi(2) <= 1.0
            }
            Shape::Capsule { a, b, r } => {
                let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
                let len2 = ab.iter().map(|x| x * x).sum::<f64>();
                let t = (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0);
                let d2: f64 = (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum();
                d2 <= r * r
            }
            Shape::Cylinder { c, r, s } => {
                p[0] >= s[0] && p[0] <= s[1] && ((p[1] - c[0]) / r[0]).powi(2) + ((p[2] - c[1]) / r[1]).powi(2) <= 1.0
            }
            Shape::Arc { c, r_in, r_out, s } => {
                if p[0] < s[0] || p[0] > s[1] || p[1] > c[0] {
                    return false;
                }
                let d2 = (p[1] - c[0]).powi(2) + (p[2] - c[1]).powi(2);
                d2 >= r_in * r_in && d2 <= r_out * r_out
            }
        }
    }

    /// Inclusive voxel bounding box, possibly outside the grid.
    fn bounds(&self) -> [[f64; 2]; 3] {
        match *self {
            Shape::Ellipsoid { c, r, .. } => {
                let m = r[1].max(r[2]);
                [[c[0] - r[0], c[0] + r[0]], [c[1] - m, c[1] + m], [c[2] - m, c[2] + m]]
            }
            Shape::Capsule { a, b, r } => {
                std::array::from_fn(|i| [a[i].min(b[i]) - r, a[i].max(b[i]) + r])
            }
            Shape::Cylinder { c, r, s } => [s, [c[0] - r[0], c[0] + r[0]], [c[1] - r[1], c[1] + r[1]]],
            Shape::Arc { c, r_out, s, .. } => [s, [c[0] - r_out, c[0]], [c[1] - r_out, c[1] + r_out]],
        }
    }
}

/// Capsule radius with `π r² L + 4/3 π r³ = volume`.
fn capsule_radius(volume: f64, length: f64) -> f64 {
    let f = |r: f64| std::f64::consts::PI * r * r * (length + 4.0 / 3.0 * r) - volume;
    let (mut lo, mut hi) = (0.0, (volume / std::f64::consts::PI).cbrt() + 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn place(spec: &PhantomSpec, t: &StructureTemplate, rng: &mut ChaCha8Rng) -> Result<Shape> {
    use std::f64::consts::PI;
    let d = spec.dims.map(|x| x as f64);
    let volume = spec.target_voxels(t.foreground_share);
    let j = spec.jitter_voxels;
    let mut jitter = || -> f64 { if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 } };
    let shape = match t.primitive {
        Primitive::Ellipsoid { center, aspect, tilt_deg } => {
            let k = (volume / (4.0 / 3.0 * PI * aspect.iter().product::<f64>())).cbrt();
            let c = [
                center[0] * d[0] + jitter(),
                center[1] * d[1] + jitter(),
                center[2] * d[2] + jitter(),
            ];
            let angle = if tilt_deg > 0.0 {
                rng.random_range(-tilt_deg..=tilt_deg).to_radians()
            } else {
                0.0
            };
            Shape::Ellipsoid {
                c,
                r: aspect.map(|a| a * k),
                cos: angle.cos(),
                sin: angle.sin(),
            }
        }
        Primitive::Capsule { start, end } => {
            let off = [jitter(), jitter(), jitter()];
            let a: [f64; 3] = std::array::from_fn(|i| start[i] * d[i] + off[i]);
            let b: [f64; 3] = std::array::from_fn(|i| end[i] * d[i] + off[i]);
            let len = (0..3).map(|i| (b[i] - a[i]).powi(2)).sum::<f64>().sqrt();
            Shape::Capsule {
                a,
                b,
                r: capsule_radius(volume, len),
            }
        }
        Primitive::Cylinder {
            center_hw,
            slices,
            aspect_hw,
        } => {
            let ds = jitter();
            let s = [slices[0] * d[0] + ds, slices[1] * d[0] + ds];
            let k = (volume / (PI * aspect_hw[0] * aspect_hw[1] * (s[1] - s[0]))).sqrt();
            Shape::Cylinder {
                c: [center_hw[0] * d[1] + jitter(), center_hw[1] * d[2] + jitter()],
                r: aspect_hw.map(|a| a * k),
                s,
            }
        }
        Primitive::ArcPlate {
            center_hw,
            slices,
            outer_radius,
        } => {
            let ds = jitter();
            let s = [slices[0] * d[0] + ds, slices[1] * d[0] + ds];
            let r_out = outer_radius * d[1].min(d[2]);
            let inner2 = r_out * r_out - 2.0 * volume / (PI * (s[1] - s[0]));
            if inner2 <= 0.0 {
                return Err(Error::Phantom(format!(
                    "class {} plate too thin for its target volume",
                    t.class_id
                )));
            }
            Shape::Arc {
                c: [center_hw[0] * d[1] + jitter(), center_hw[1] * d[2] + jitter()],
                r_in: inner2.sqrt(),
                r_out,
                s,
            }
        }
    };
    for (axis, [lo, hi]) in shape.bounds().into_iter().enumerate() {
        if lo < 0.0 || hi > d[axis] - 1.0 {
            return Err(Error::Phantom(format!(
                "class {} does not fit within dims {:?}",
                t.class_id, spec.dims
            )));
        }
    }
    Ok(shape)
}

pub(crate) fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 over the pair
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic phantom number `index`.
pub fn generate(spec: &PhantomSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index));
    let [ds, dh, dw] = spec.dims;
    let n = ds * dh * dw;

    let shapes: Vec<(usize, Shape)> = spec
        .structures
        .iter()
        .enumerate()
        .map(|(i, t)| place(spec, t, &mut rng).map(|s| (i, s)))
        .collect::<Result<_>>()?;

    let mut labels = vec![0u8; n];
    let mut base = vec![0.0; n];
    let centre = spec.dims.map(|x| (x as f64 - 1.0) / 2.0);
    let body_r = spec.dims.map(|x| 0.5 * x as f64);
    for s in 0..ds {
        for h in 0..dh {
            for w in 0..dw {
                let p = [s as f64, h as f64, w as f64];
                let i = (s * dh + h) * dw + w;
                let r2: f64 = (0..3).map(|a| ((p[a] - centre[a]) / body_r[a]).powi(2)).sum();
                if r2 <= 1.0 {
                    base[i] = spec.body_intensity;
                }
            }
        }
    }
    // Later structures overwrite earlier ones.
    for (ti, shape) in &shapes {
        let t = &spec.structures[*ti];
        let [[s0, s1], [h0, h1], [w0, w1]] = shape.bounds();
        for s in s0.ceil() as usize..=s1.floor() as usize {
            for h in h0.ceil() as usize..=h1.floor() as usize {
                for w in w0.ceil() as usize..=w1.floor() as usize {
                    if shape.contains([s as f64, h as f64, w as f64]) {
                        let i = (s * dh + h) * dw + w;
                        labels[i] = t.class_id;
                        base[i] = t.intensity;
                    }
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Phantom(e.to_string()))?;
        for v in base.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    let c = spec.num_classes();
    let anatomies: Vec<bool> = (1..c)
        .map(|k| {
            let p = spec.drop_probabilities[k];
            !(p > 0.0 && rng.random_bool(p.min(1.0)))
        })
        .collect();

    Ok(Sample {
        volume: Tensor::new(&[1, 1, ds, dh, dw], base)?,
        labels: LabelVolume::new(spec.dims, labels, spec.spacing, c)?,
        mask: AnnotationMask::from_anatomies(&anatomies),
    })
}

/// Lazily generated phantoms `0..n`.
#[derive(Clone, Debug)]
pub struct Dataset {
    spec: PhantomSpec,
    len: u64,
}

pub fn dataset(spec: &PhantomSpec, n: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Phantom("dataset needs at least one sample".into()));
    }
    spec.validate()?;
    Ok(Dataset {
        spec: spec.clone(),
        len: n,
    })
}

impl Dataset {
    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn spec(&self) -> &PhantomSpec {
        &self.spec
    }

    pub fn get(&self, index: u64) -> Result<Sample> {
        generate(&self.spec, index)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Sample>> + '_ {
        (0..self.len).map(move |i| generate(&self.spec, i))
    }
}
