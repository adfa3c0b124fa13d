//! Big-endian IDX files as used by the MNIST distribution.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, WriteBytesExt};

use super::DataError;
use crate::error::Result;

const IDX3_MAGIC: u32 = 0x0000_0803;
const IDX1_MAGIC: u32 = 0x0000_0801;

/// Grayscale images scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<f32>>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn need(what: &'static str, bytes: &[u8], offset: usize, expected: usize) -> Result<(), DataError> {
    if bytes.len() < expected {
        Err(DataError::Truncated {
            what,
            offset: offset.min(bytes.len()),
            expected,
            actual: bytes.len(),
        })
    } else {
        Ok(())
    }
}

fn magic(what: &'static str, bytes: &[u8], want: u32) -> Result<(), DataError> {
    need(what, bytes, 0, 4)?;
    let found = BigEndian::read_u32(bytes);
    if found != want {
        return Err(DataError::BadMagic {
            what,
            expected: format!("{want:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    Ok(())
}

pub fn parse_idx3(bytes: &[u8]) -> Result<IdxImages, DataError> {
    const WHAT: &str = "idx3";
    magic(WHAT, bytes, IDX3_MAGIC)?;
    need(WHAT, bytes, 4, 16)?;
    let n = BigEndian::read_u32(&bytes[4..]) as usize;
    let rows = BigEndian::read_u32(&bytes[8..]) as usize;
    let cols = BigEndian::read_u32(&bytes[12..]) as usize;
    let plane = rows * cols;
    need(WHAT, bytes, bytes.len(), 16 + n * plane)?;
    let images = bytes[16..16 + n * plane]
        .chunks(plane.max(1))
        .take(n)
        .map(|img| img.iter().map(|&b| f32::from(b) / 255.0).collect())
        .collect();
    Ok(IdxImages { rows, cols, images })
}

/// Read an IDX3 image file (e.g. `train-images-idx3-ubyte`).
pub fn load_mnist_idx(path: impl AsRef<Path>) -> Result<IdxImages> {
    let bytes = fs::read(path)?;
    Ok(parse_idx3(&bytes)?)
}

pub fn load_idx1_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    const WHAT: &str = "idx1";
    let bytes = fs::read(path)?;
    magic(WHAT, &bytes, IDX1_MAGIC)?;
    need(WHAT, &bytes, 4, 8)?;
    let n = BigEndian::read_u32(&bytes[4..]) as usize;
    need(WHAT, &bytes, bytes.len(), 8 + n)?;
    Ok(bytes[8..8 + n].to_vec())
}

/// Write 8-bit images in IDX3 layout.
pub fn write_idx3(path: impl AsRef<Path>, rows: usize, cols: usize, images: &[Vec<u8>]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.write_u32::<BigEndian>(IDX3_MAGIC)?;
    for d in [images.len(), rows, cols] {
        out.write_u32::<BigEndian>(d as u32)?;
    }
    for img in images {
        assert_eq!(img.len(), rows * cols, "image size does not match {rows}x{cols}");
        out.extend_from_slice(img);
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn write_idx1(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.write_u32::<BigEndian>(IDX1_MAGIC)?;
    out.write_u32::<BigEndian>(labels.len() as u32)?;
    out.extend_from_slice(labels);
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}
