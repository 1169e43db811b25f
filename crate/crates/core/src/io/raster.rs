//! Raw raster files: an 8-byte magic tag, a little-endian `u32` header
//! length, a JSON header and the f32 little-endian payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Sinogram};

pub const RASTER_MAGIC: &[u8; 8] = b"DEERRAST";

/// Upper bound on header size; anything larger is treated as corruption.
const MAX_HEADER: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RasterKind {
    Image,
    Sinogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterHeader {
    pub kind: RasterKind,
    /// Always `"f32-le"`.
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Pixel size for images, detector spacing for sinograms.
    pub spacing: f64,
    /// View angles in radians (sinograms only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub angles: Vec<f64>,
    /// Free-form provenance such as view counts of the acquisition.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

const DTYPE: &str = "f32-le";

/// Header plus payload of one raster file.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterFile {
    pub header: RasterHeader,
    pub data: Vec<f32>,
}

impl RasterFile {
    pub fn from_image(img: &Image) -> Self {
        RasterFile {
            header: RasterHeader {
                kind: RasterKind::Image,
                dtype: DTYPE.into(),
                shape: vec![img.n(), img.n()],
                spacing: img.pixel_size(),
                angles: Vec::new(),
                meta: BTreeMap::new(),
            },
            data: img.data().to_vec(),
        }
    }

    pub fn from_sinogram(sino: &Sinogram) -> Self {
        RasterFile {
            header: RasterHeader {
                kind: RasterKind::Sinogram,
                dtype: DTYPE.into(),
                shape: vec![sino.n_views(), sino.n_det()],
                spacing: sino.det_spacing(),
                angles: sino.angles().to_vec(),
                meta: BTreeMap::new(),
            },
            data: sino.data().to_vec(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.header.meta.insert(key.into(), value.into());
        self
    }

    pub fn to_image(&self) -> Result<Image> {
        let h = &self.header;
        if h.kind != RasterKind::Image || h.shape.len() != 2 || h.shape[0] != h.shape[1] {
            return Err(Error::Invalid(format!(
                "raster is not a square image: {:?} {:?}",
                h.kind, h.shape
            )));
        }
        Image::new(h.shape[0], h.spacing, self.data.clone())
    }

    pub fn to_sinogram(&self) -> Result<Sinogram> {
        let h = &self.header;
        if h.kind != RasterKind::Sinogram || h.shape.len() != 2 {
            return Err(Error::Invalid(format!(
                "raster is not a sinogram: {:?} {:?}",
                h.kind, h.shape
            )));
        }
        Sinogram::new(h.angles.clone(), h.shape[1], h.spacing, self.data.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Invalid(format!("raster header: {e}")))?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.data.len());
        out.extend_from_slice(RASTER_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Parses and validates a raster; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let (header, payload) = split_container(bytes, RASTER_MAGIC, path)?;
        let header: RasterHeader =
            serde_json::from_slice(header).map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.dtype != DTYPE {
            return Err(corrupt(format!("unsupported dtype {}", header.dtype)));
        }
        let count = header
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt(format!("shape {:?} overflows", header.shape)))?;
        if payload.len() != count * 4 {
            return Err(corrupt(format!(
                "payload has {} bytes, shape {:?} needs {}",
                payload.len(),
                header.shape,
                count * 4
            )));
        }
        Ok(RasterFile {
            header,
            data: f32_from_le(payload),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Splits `magic | u32 header length | header | payload`.
pub(crate) fn split_container<'a>(
    bytes: &'a [u8],
    magic: &[u8; 8],
    path: &Path,
) -> Result<(&'a [u8], &'a [u8])> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(corrupt(format!(
            "missing magic tag {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if len > MAX_HEADER || 12 + len > bytes.len() {
        return Err(corrupt(format!(
            "header length {len} exceeds file size {}",
            bytes.len()
        )));
    }
    Ok((&bytes[12..12 + len], &bytes[12 + len..]))
}

pub(crate) fn f32_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    RasterFile::from_image(img).save(path)
}

pub fn load_image(path: &Path) -> Result<Image> {
    RasterFile::load(path)?.to_image()
}

pub fn save_sinogram(sino: &Sinogram, path: &Path) -> Result<()> {
    RasterFile::from_sinogram(sino).save(path)
}

pub fn load_sinogram(path: &Path) -> Result<Sinogram> {
    RasterFile::load(path)?.to_sinogram()
}
