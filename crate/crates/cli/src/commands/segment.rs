use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use vseg::io::{load_checkpoint, VolumeFile};
use vseg::losses::AnnotationMask;
use vseg::metrics::LabelVolume;
use vseg::net::{predict_labels, Network};
use vseg::volgrid::{no_grad, Tensor};
use vseg::Result;

#[derive(Clone, Debug, Serialize)]
pub struct SegmentReport {
    pub dims: [usize; 3],
    pub padded_dims: [usize; 3],
    pub seconds: f64,
    pub output: PathBuf,
}

/// Argmax labels for a `[1, 1, S, H, W]` volume. With `pad`, indivisible
/// dims are zero-padded at the far end and the result is cropped back.
pub fn segment_volume(net: &Network, volume: &Tensor, spacing: [f64; 3], pad: bool) -> Result<(LabelVolume, [usize; 3])> {
    let s = volume.shape();
    let dims = [s[2], s[3], s[4]];
    let divisor = net.config().pool_scheme.max_reduction();
    if !pad {
        net.config().check_dims(dims)?;
        let probs = no_grad(|| net.forward(volume))?;
        return Ok((predict_labels(&probs)?.with_spacing(spacing)?, dims));
    }
    let padded = dims.map(|d| d.max(1).div_ceil(divisor) * divisor);
    let input = if padded == dims {
        volume.clone()
    } else {
        let src = volume.data();
        let mut data = vec![0.0; padded.iter().product()];
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                let from = (a * dims[1] + b) * dims[2];
                let to = (a * padded[1] + b) * padded[2];
                data[to..to + dims[2]].copy_from_slice(&src[from..from + dims[2]]);
            }
        }
        Tensor::new(&[1, 1, padded[0], padded[1], padded[2]], data)?
    };
    let probs = no_grad(|| net.forward(&input))?;
    let full = predict_labels(&probs)?;
    let mut labels = Vec::with_capacity(dims.iter().product());
    for a in 0..dims[0] {
        for b in 0..dims[1] {
            let row = (a * padded[1] + b) * padded[2];
            labels.extend_from_slice(&full.labels()[row..row + dims[2]]);
        }
    }
    Ok((LabelVolume::new(dims, labels, spacing, full.num_classes())?, padded))
}

pub fn cmd_segment(checkpoint: &Path, volume: &Path, output: &Path, pad: bool) -> Result<SegmentReport> {
    let net = load_checkpoint(checkpoint)?;
    let file = VolumeFile::read(volume)?;
    let tensor = file.to_tensor()?;
    let start = Instant::now();
    let (labels, padded_dims) = segment_volume(&net, &tensor, file.spacing, pad)?;
    let seconds = start.elapsed().as_secs_f64();
    let mask = AnnotationMask::full(labels.num_classes());
    VolumeFile::from_labels(&labels, &mask).write(output)?;
    Ok(SegmentReport {
        dims: labels.dims(),
        padded_dims,
        seconds,
        output: output.to_path_buf(),
    })
}
