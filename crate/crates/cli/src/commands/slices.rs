use std::path::{Path, PathBuf};

use serde::Serialize;
use vseg::io::VolumeFile;
use vseg::metrics::LabelVolume;
use vseg::{Error, Result};

use crate::data::ensure_dir;

/// Tinted pixels in one slice image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TintCounts {
    pub slice: usize,
    /// Truth and prediction.
    pub yellow: usize,
    /// Truth only.
    pub green: usize,
    /// Prediction only.
    pub red: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SliceReport {
    pub files: Vec<PathBuf>,
    pub counts: Vec<TintCounts>,
}

/// Tint of a pixel: green truth only, red prediction only, yellow both.
/// Untinted pixels show the intensity as half-range gray.
pub fn tint(gray: u8, truth: bool, pred: bool) -> [u8; 3] {
    match (truth, pred) {
        (true, true) => [255, 255, gray],
        (true, false) => [gray, 255, gray],
        (false, true) => [255, gray, gray],
        (false, false) => [gray, gray, gray],
    }
}

/// Inverse of [`tint`] on the marker channels (gray never reaches 255).
pub fn classify_pixel(rgb: [u8; 3]) -> (bool, bool) {
    match (rgb[0] == 255, rgb[1] == 255) {
        (true, true) => (true, true),
        (false, true) => (true, false),
        (true, false) => (false, true),
        (false, false) => (false, false),
    }
}

pub fn encode_ppm(width: usize, height: usize, pixels: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for p in pixels {
        out.extend_from_slice(p);
    }
    out
}

/// Writes one P6 image per slice along `axis`. A voxel counts as truth or
/// prediction when its label is `class`, or any nonzero label when no
/// class is given.
pub fn cmd_slices(
    volume: &Path,
    truth: &Path,
    prediction: Option<&Path>,
    axis: usize,
    class: Option<u8>,
    out: &Path,
) -> Result<SliceReport> {
    if axis > 2 {
        return Err(Error::Config(format!("axis must be 0, 1 or 2, got {axis}")));
    }
    let vol = VolumeFile::read(volume)?.to_tensor()?;
    let (truth, _) = VolumeFile::read(truth)?.to_labels()?;
    let pred: Option<LabelVolume> = prediction
        .map(|p| VolumeFile::read(p).and_then(|f| f.to_labels()).map(|(l, _)| l))
        .transpose()?;
    let dims = truth.dims();
    if vol.shape()[2..] != dims || pred.as_ref().is_some_and(|p| p.dims() != dims) {
        return Err(Error::Config("volume, truth and prediction dims differ".into()));
    }
    ensure_dir(out)?;
    let hit = |l: u8| match class {
        Some(c) => l == c,
        None => l != 0,
    };
    let (ra, rb) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (height, width) = (dims[ra], dims[rb]);
    let data = vol.data();
    let mut report = SliceReport {
        files: Vec::new(),
        counts: Vec::new(),
    };
    for s in 0..dims[axis] {
        let mut pixels = Vec::with_capacity(height * width);
        let mut counts = TintCounts {
            slice: s,
            ..Default::default()
        };
        for y in 0..height {
            for x in 0..width {
                let mut c = [0usize; 3];
                c[axis] = s;
                c[ra] = y;
                c[rb] = x;
                let i = (c[0] * dims[1] + c[1]) * dims[2] + c[2];
                let gray = (data[i].clamp(0.0, 1.0) * 127.0).round() as u8;
                let t = hit(truth.labels()[i]);
                let p = pred.as_ref().is_some_and(|p| hit(p.labels()[i]));
                match (t, p) {
                    (true, true) => counts.yellow += 1,
                    (true, false) => counts.green += 1,
                    (false, true) => counts.red += 1,
                    _ => {}
                }
                pixels.push(tint(gray, t, p));
            }
        }
        let path = out.join(format!("slice_axis{axis}_{s:04}.ppm"));
        std::fs::write(&path, encode_ppm(width, height, &pixels)).map_err(|e| Error::io(&path, e))?;
        report.files.push(path);
        report.counts.push(counts);
    }
    Ok(report)
}
