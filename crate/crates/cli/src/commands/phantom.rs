use std::path::Path;

use vseg::metrics::ClassFrequencies;
use vseg::phantom::dataset;
use vseg::Result;

use crate::config::RunConfig;
use crate::data::{ensure_dir, write_sample, write_text, Manifest, MANIFEST};

/// Writes `n` phantom (volume, labels) pairs and a manifest into `out`.
pub fn cmd_phantom(cfg: &RunConfig, n: u64, out: &Path) -> Result<Manifest> {
    ensure_dir(out)?;
    let spec = &cfg.phantom;
    let data = dataset(spec, n)?;
    let mut files = Vec::new();
    let mut counts = vec![0u64; spec.num_classes()];
    for (i, sample) in data.iter().enumerate() {
        let sample = sample?;
        for &l in sample.labels.labels() {
            counts[l as usize] += 1;
        }
        files.push(write_sample(out, i as u64, &sample)?);
    }
    let frequencies = ClassFrequencies::from_counts(counts);
    let manifest = Manifest {
        phantom_seed: spec.seed,
        dims: spec.dims,
        spacing: spec.spacing,
        files,
        background_fraction: frequencies.fraction_of_total[0],
        frequencies,
    };
    write_text(&out.join(MANIFEST), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
