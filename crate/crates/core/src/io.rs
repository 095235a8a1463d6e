//! Binary volume files and network checkpoints (little-endian throughout).

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::AnnotationMask;
use crate::metrics::LabelVolume;
use crate::net::{build, Network, NetworkConfig};
use crate::volgrid::Tensor;

const VOLUME_MAGIC: &[u8; 4] = b"VOL3";
const VOLUME_VERSION: u16 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"VSEG";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum VolumePayload {
    Intensities(Vec<f64>),
    /// Class IDs followed by one annotation flag byte per class.
    Labels { labels: Vec<u8>, mask: Vec<u8> },
}

/// Self-describing volume container.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    pub dims: Vec<usize>,
    pub spacing: [f64; 3],
    pub payload: VolumePayload,
}

fn format_err(kind: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        kind,
        detail: detail.into(),
    }
}

/// Sequential reader over a byte slice.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], kind: &'static str) -> Self {
        Cursor { buf, pos: 0, kind }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(format_err(self.kind, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| format_err(self.kind, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn dims_to_u32(kind: &'static str, dims: &[usize]) -> Result<Vec<u32>> {
    if dims.len() > u8::MAX as usize {
        return Err(format_err(kind, "rank too large"));
    }
    dims.iter()
        .map(|&d| u32::try_from(d).map_err(|_| format_err(kind, format!("dimension {d} too large"))))
        .collect()
}

impl VolumeFile {
    pub fn from_intensities(volume: &Tensor, spacing: [f64; 3]) -> Self {
        let shape = volume.shape();
        let dims = if shape.len() > 3 && shape[..shape.len() - 3].iter().all(|&d| d == 1) {
            shape[shape.len() - 3..].to_vec()
        } else {
            shape.to_vec()
        };
        VolumeFile {
            dims,
            spacing,
            payload: VolumePayload::Intensities(volume.to_vec()),
        }
    }

    pub fn from_labels(labels: &LabelVolume, mask: &AnnotationMask) -> Self {
        VolumeFile {
            dims: labels.dims().to_vec(),
            spacing: labels.spacing(),
            payload: VolumePayload::Labels {
                labels: labels.labels().to_vec(),
                mask: mask.flags().iter().map(|&f| f as u8).collect(),
            },
        }
    }

    fn spatial_dims(&self) -> Result<[usize; 3]> {
        let n = self.dims.len();
        if n < 3 || self.dims[..n - 3].iter().any(|&d| d != 1) {
            return Err(format_err("volume", format!("not a single 3D volume: dims {:?}", self.dims)));
        }
        Ok([self.dims[n - 3], self.dims[n - 2], self.dims[n - 1]])
    }

    /// Intensities as a `[1, 1, S, H, W]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let [s, h, w] = self.spatial_dims()?;
        match &self.payload {
            VolumePayload::Intensities(v) => Tensor::new(&[1, 1, s, h, w], v.clone()),
            VolumePayload::Labels { .. } => Err(format_err("volume", "expected intensities, found labels")),
        }
    }

    pub fn to_labels(&self) -> Result<(LabelVolume, AnnotationMask)> {
        let dims = self.spatial_dims()?;
        match &self.payload {
            VolumePayload::Labels { labels, mask } => {
                let flags: Vec<bool> = mask.iter().map(|&b| b != 0).collect();
                let c = flags.len();
                Ok((
                    LabelVolume::new(dims, labels.clone(), self.spacing, c)?,
                    AnnotationMask::new(flags)?,
                ))
            }
            VolumePayload::Intensities(_) => Err(format_err("volume", "expected labels, found intensities")),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dims = dims_to_u32("volume", &self.dims)?;
        let mut out = Vec::new();
        out.extend_from_slice(VOLUME_MAGIC);
        out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
        out.push(match self.payload {
            VolumePayload::Intensities(_) => 0,
            VolumePayload::Labels { .. } => 1,
        });
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        let n: usize = self.dims.iter().product();
        match &self.payload {
            VolumePayload::Intensities(v) => {
                if v.len() != n {
                    return Err(format_err("volume", "payload length does not match dims"));
                }
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            VolumePayload::Labels { labels, mask } => {
                if labels.len() != n {
                    return Err(format_err("volume", "payload length does not match dims"));
                }
                out.extend_from_slice(labels);
                out.extend_from_slice(mask);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes, "volume");
        if c.take(4)? != VOLUME_MAGIC {
            return Err(format_err("volume", "bad magic"));
        }
        let version = c.u16()?;
        if version != VOLUME_VERSION {
            return Err(format_err("volume", format!("unsupported version {version}")));
        }
        let dtype = c.u8()?;
        let rank = c.u8()? as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let sp = c.f64s(3)?;
        let spacing = [sp[0], sp[1], sp[2]];
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err("volume", "dims overflow"))?;
        let payload = match dtype {
            0 => {
                let v = c.f64s(n)?;
                if !c.at_end() {
                    return Err(format_err("volume", "trailing bytes after intensities"));
                }
                VolumePayload::Intensities(v)
            }
            1 => {
                let labels = c.take(n)?.to_vec();
                let mask = c.rest().to_vec();
                VolumePayload::Labels { labels, mask }
            }
            other => return Err(format_err("volume", format!("unknown dtype code {other}"))),
        };
        Ok(VolumeFile { dims, spacing, payload })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Serializes the configuration and every named parameter.
pub fn checkpoint_bytes(net: &Network) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(net.config())?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    for (name, t) in net.named_parameters() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = dims_to_u32("checkpoint", t.shape())?;
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for x in t.data().iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn network_from_checkpoint_bytes(bytes: &[u8]) -> Result<Network> {
    let mut c = Cursor::new(bytes, "checkpoint");
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(format_err("checkpoint", "bad magic"));
    }
    let version = c.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err("checkpoint", format!("unsupported version {version}")));
    }
    let len = c.u32()? as usize;
    let config: NetworkConfig = serde_json::from_slice(c.take(len)?)?;
    let net = build(&config, 0)?;
    let params = net.named_parameters();
    let mut seen = vec![false; params.len()];
    while !c.at_end() {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| format_err("checkpoint", "parameter name is not UTF-8"))?;
        let rank = c.u8()? as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let idx = params
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| format_err("checkpoint", format!("unknown parameter {name}")))?;
        let t = &params[idx].1;
        if t.shape() != dims.as_slice() {
            return Err(format_err(
                "checkpoint",
                format!("{name}: shape {dims:?}, network expects {:?}", t.shape()),
            ));
        }
        let values = c.f64s(t.numel())?;
        t.data_mut().copy_from_slice(&values);
        seen[idx] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(format_err("checkpoint", format!("missing parameter {}", params[i].0)));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(net)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    network_from_checkpoint_bytes(&bytes)
}
