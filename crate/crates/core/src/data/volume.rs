use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{Tensor, Triple};
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"UVOL";
pub const VOLUME_VERSION: u16 = 1;
const HEADER_BYTES: usize = 4 + 2 + 4 * 5;

/// One image/label pair of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    /// `[channels, D, H, W]`.
    pub image: Tensor<f32>,
    /// Class index per voxel, `D * H * W` entries.
    pub label: Vec<u8>,
    pub num_classes: usize,
    pub task_id: usize,
}

/// Fixed-size part of a volume file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VolumeHeader {
    pub channels: usize,
    pub dims: Triple,
    pub num_classes: usize,
}

impl VolumeHeader {
    fn payload_bytes(&self) -> usize {
        let vox: usize = self.dims.iter().product();
        self.channels * vox * 4 + vox
    }
}

impl VolumeSample {
    pub fn new(image: Tensor<f32>, label: Vec<u8>, num_classes: usize, task_id: usize) -> Result<Self> {
        let s = VolumeSample {
            image,
            label,
            num_classes,
            task_id,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn dims(&self) -> Triple {
        self.image.spatial()
    }

    pub fn channels(&self) -> usize {
        self.image.channels()
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            channels: self.channels(),
            dims: self.dims(),
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.rank() != 4 {
            return Err(Error::Dimension(format!(
                "volume image must be [C, D, H, W], got {:?}",
                self.image.shape()
            )));
        }
        if self.label.len() != self.image.voxels() {
            return Err(Error::Dimension(format!(
                "label has {} voxels, image has {}",
                self.label.len(),
                self.image.voxels()
            )));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Label(format!("class count {} outside 2..=255", self.num_classes)));
        }
        if let Some(i) = self.label.iter().position(|&l| l as usize >= self.num_classes) {
            return Err(Error::Label(format!(
                "voxel {i} has label {} but the volume declares {} classes",
                self.label[i], self.num_classes
            )));
        }
        if !self.image.is_finite() {
            return Err(Error::Dimension("volume image contains non-finite values".into()));
        }
        Ok(())
    }
}

pub fn write_volume(sample: &VolumeSample, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    sample.validate()?;
    let h = sample.header();
    let mut bytes = Vec::with_capacity(HEADER_BYTES + h.payload_bytes());
    bytes.extend_from_slice(VOLUME_MAGIC);
    bytes.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for v in [h.channels, h.dims[0], h.dims[1], h.dims[2], h.num_classes] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in sample.image.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&sample.label);

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    let file = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    file.sync_all().map_err(|e| Error::io(path, e))
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<VolumeHeader> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::format(
            path,
            format!("truncated header: expected {HEADER_BYTES} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}, expected \"UVOL\"", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VOLUME_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let field = |i: usize| {
        let o = 6 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
    };
    let header = VolumeHeader {
        channels: field(0),
        dims: [field(1), field(2), field(3)],
        num_classes: field(4),
    };
    if header.channels == 0 || header.dims.contains(&0) {
        return Err(Error::format(path, format!("empty volume extents {header:?}")));
    }
    Ok(header)
}

/// Reads only the header of a volume file.
pub fn read_volume_header(path: impl AsRef<Path>) -> Result<VolumeHeader> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(HEADER_BYTES);
    File::open(path)
        .map_err(|e| Error::io(path, e))?
        .take(HEADER_BYTES as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    parse_header(path, &buf)
}

pub fn read_volume(path: impl AsRef<Path>, task_id: usize) -> Result<VolumeSample> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(path, &bytes)?;
    let expected = HEADER_BYTES + h.payload_bytes();
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {h:?}, found {}", bytes.len()),
        ));
    }
    let vox: usize = h.dims.iter().product();
    let img_end = HEADER_BYTES + h.channels * vox * 4;
    let data = bytes[HEADER_BYTES..img_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let image = Tensor::new(vec![h.channels, h.dims[0], h.dims[1], h.dims[2]], data)?;
    let label = bytes[img_end..].to_vec();
    VolumeSample::new(image, label, h.num_classes, task_id).map_err(|e| Error::format(path, e.to_string()))
}
