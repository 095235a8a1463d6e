//! Phantom data directories: VolumeFile pairs plus a JSON manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vseg::io::VolumeFile;
use vseg::metrics::ClassFrequencies;
use vseg::phantom::Sample;
use vseg::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub volume: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub phantom_seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub files: Vec<ManifestEntry>,
    pub frequencies: ClassFrequencies,
    pub background_fraction: f64,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn volume_name(index: u64) -> String {
    format!("phantom_{index:04}.vol")
}

pub fn labels_name(index: u64) -> String {
    format!("phantom_{index:04}_labels.vol")
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_sample(dir: &Path, index: u64, sample: &Sample) -> Result<ManifestEntry> {
    let entry = ManifestEntry {
        index,
        volume: volume_name(index),
        labels: labels_name(index),
    };
    VolumeFile::from_intensities(&sample.volume, sample.labels.spacing()).write(dir.join(&entry.volume))?;
    VolumeFile::from_labels(&sample.labels, &sample.mask).write(dir.join(&entry.labels))?;
    Ok(entry)
}

pub fn read_sample(dir: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let volume = VolumeFile::read(dir.join(&entry.volume))?.to_tensor()?;
    let (labels, mask) = VolumeFile::read(dir.join(&entry.labels))?.to_labels()?;
    let dims = labels.dims();
    if volume.shape()[2..] != dims {
        return Err(Error::Config(format!(
            "{}: volume dims {:?} differ from label dims {dims:?}",
            entry.volume,
            &volume.shape()[2..]
        )));
    }
    Ok(Sample { volume, labels, mask })
}

/// Every sample listed in the directory's manifest.
pub fn read_dir_samples(dir: &Path) -> Result<Vec<(PathBuf, Sample)>> {
    let manifest = Manifest::load(dir)?;
    manifest
        .files
        .iter()
        .map(|e| read_sample(dir, e).map(|s| (dir.join(&e.labels), s)))
        .collect()
}
