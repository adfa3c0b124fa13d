//! `STPLDAT1` files: 8-byte magic, u32 version, u8 dtype tag, u8 rank,
//! rank × u32 extents `[N, L, C, H, W]`, then the f32 payload. All integers
//! and floats are little-endian.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use super::DataError;
use crate::error::Result;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"STPLDAT1";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const RANK: usize = 5;
const HEADER_LEN: usize = 8 + 4 + 1 + 1 + 4 * RANK;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    /// `[N, L, C, H, W]`.
    pub shape: [usize; 5],
}

impl DatasetHeader {
    pub fn sequences(&self) -> usize {
        self.shape[0]
    }

    pub fn sequence_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn payload_bytes(&self) -> usize {
        4 * self.shape.iter().product::<usize>()
    }

    pub fn file_bytes(&self) -> usize {
        HEADER_LEN + self.payload_bytes()
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(DATASET_MAGIC);
        out.write_u32::<LittleEndian>(VERSION).expect("vec write");
        out.push(DTYPE_F32);
        out.push(RANK as u8);
        for &d in &self.shape {
            out.write_u32::<LittleEndian>(d as u32).expect("vec write");
        }
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self, DataError> {
        let truncated = |offset| DataError::Truncated {
            what: "dataset",
            offset,
            expected: HEADER_LEN,
            actual: bytes.len(),
        };
        if bytes.len() < 8 {
            return Err(truncated(bytes.len()));
        }
        if &bytes[..8] != DATASET_MAGIC {
            return Err(DataError::BadMagic {
                what: "dataset",
                expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
            });
        }
        if bytes.len() < 14 {
            return Err(truncated(bytes.len()));
        }
        let version = LittleEndian::read_u32(&bytes[8..]);
        if version != VERSION {
            return Err(DataError::Version {
                found: version,
                expected: VERSION,
            });
        }
        if bytes[12] != DTYPE_F32 {
            return Err(DataError::Invalid(format!("dtype tag {} at byte 12 is not f32", bytes[12])));
        }
        if bytes[13] as usize != RANK {
            return Err(DataError::Invalid(format!("rank {} at byte 13, expected {RANK}", bytes[13])));
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(bytes.len()));
        }
        let mut shape = [0usize; RANK];
        for (k, s) in shape.iter_mut().enumerate() {
            *s = LittleEndian::read_u32(&bytes[14 + 4 * k..]) as usize;
        }
        Ok(Self { shape })
    }
}

/// Streams sequences to disk; `finish` checks the declared count was met.
pub struct DatasetWriter {
    path: PathBuf,
    out: BufWriter<File>,
    header: DatasetHeader,
    written: usize,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>, shape: [usize; 5]) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let header = DatasetHeader { shape };
        let mut out = BufWriter::new(File::create(&path)?);
        out.write_all(&header.encode())?;
        Ok(Self {
            path,
            out,
            header,
            written: 0,
        })
    }

    pub fn push(&mut self, sequence: &[f32]) -> Result<()> {
        if sequence.len() != self.header.sequence_len() {
            return Err(DataError::Invalid(format!(
                "sequence has {} values, expected {}",
                sequence.len(),
                self.header.sequence_len()
            ))
            .into());
        }
        if self.written == self.header.sequences() {
            return Err(DataError::Invalid(format!("more than {} sequences written", self.written)).into());
        }
        if let Some(v) = sequence.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::Invalid(format!("value {v} outside [0, 1]")).into());
        }
        let mut buf = vec![0u8; 4 * sequence.len()];
        LittleEndian::write_f32_into(sequence, &mut buf);
        self.out.write_all(&buf)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<DatasetHeader> {
        self.out.flush()?;
        if self.written != self.header.sequences() {
            return Err(DataError::Invalid(format!(
                "{}: wrote {} of {} sequences",
                self.path.display(),
                self.written,
                self.header.sequences()
            ))
            .into());
        }
        Ok(self.header)
    }
}

/// Past and future halves of a batch of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBatch {
    /// `[B, T, C, H, W]`.
    pub input: Tensor,
    /// `[B, T′, C, H, W]`.
    pub target: Tensor,
}

/// A whole dataset held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 5],
    data: Vec<f32>,
}

impl Dataset {
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let shape = t.dims5("dataset")?;
        Ok(Self {
            shape,
            data: t.into_data(),
        })
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    pub fn sequence(&self, i: usize) -> &[f32] {
        let n: usize = self.shape[1..].iter().product();
        &self.data[i * n..(i + 1) * n]
    }

    /// Error unless sequences hold `frames_in + frames_out` frames of
    /// `channels × height × width`.
    pub fn check_compatible(&self, frames_in: usize, frames_out: usize, channels: usize) -> Result<(), DataError> {
        let [_, l, c, ..] = self.shape;
        if l < frames_in + frames_out {
            return Err(DataError::ShapeMismatch {
                actual: self.shape.to_vec(),
                reason: format!("sequences have {l} frames, need {frames_in} + {frames_out}"),
            });
        }
        if c != channels {
            return Err(DataError::ShapeMismatch {
                actual: self.shape.to_vec(),
                reason: format!("{c} channels, model expects {channels}"),
            });
        }
        Ok(())
    }

    /// Gather sequences `indices` and split each into its first
    /// `frames_in` frames and the `frames_out` frames that follow.
    pub fn batch(&self, indices: &[usize], frames_in: usize, frames_out: usize) -> Result<VideoBatch> {
        let [_, l, c, h, w] = self.shape;
        if frames_in + frames_out > l {
            return Err(DataError::ShapeMismatch {
                actual: self.shape.to_vec(),
                reason: format!("sequences have {l} frames, need {frames_in} + {frames_out}"),
            }
            .into());
        }
        let frame = c * h * w;
        let mut input = Vec::with_capacity(indices.len() * frames_in * frame);
        let mut target = Vec::with_capacity(indices.len() * frames_out * frame);
        for &i in indices {
            let s = self.sequence(i);
            input.extend_from_slice(&s[..frames_in * frame]);
            target.extend_from_slice(&s[frames_in * frame..(frames_in + frames_out) * frame]);
        }
        let b = indices.len();
        Ok(VideoBatch {
            input: Tensor::new([b, frames_in, c, h, w], input)?,
            target: Tensor::new([b, frames_out, c, h, w], target)?,
        })
    }

    /// Sequences `indices` as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.sequence(0).len());
        for &i in indices {
            data.extend_from_slice(self.sequence(i));
        }
        let mut shape = self.shape;
        shape[0] = indices.len();
        Self { shape, data }
    }
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<DatasetHeader> {
    let mut w = DatasetWriter::create(path, ds.shape)?;
    for i in 0..ds.len() {
        w.push(ds.sequence(i))?;
    }
    w.finish()
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let header = DatasetHeader::decode(&bytes)?;
    if bytes.len() != header.file_bytes() {
        return Err(DataError::Truncated {
            what: "dataset",
            offset: bytes.len().min(header.file_bytes()),
            expected: header.file_bytes(),
            actual: bytes.len(),
        }
        .into());
    }
    let mut data = vec![0.0f32; header.payload_bytes() / 4];
    LittleEndian::read_f32_into(&bytes[HEADER_LEN..], &mut data);
    if let Some(pos) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(DataError::Invalid(format!(
            "value {} at byte offset {} outside [0, 1]",
            data[pos],
            HEADER_LEN + 4 * pos
        ))
        .into());
    }
    Ok(Dataset {
        shape: header.shape,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn toy() -> Dataset {
        Dataset::from_tensor(Tensor::from_fn([4, 6, 1, 3, 3], |i| (i % 17) as f32 / 16.0)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let ds = toy();
        let h = write_dataset(&p, &ds).unwrap();
        assert_eq!(h.shape, [4, 6, 1, 3, 3]);
        assert_eq!(fs::metadata(&p).unwrap().len() as usize, HEADER_LEN + 4 * 4 * 6 * 9);
        assert_eq!(read_dataset(&p).unwrap(), ds);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"STPLDAT1");
        assert_eq!(LittleEndian::read_u32(&bytes[14..]), 4);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        write_dataset(&p, &toy()).unwrap();
        let good = fs::read(&p).unwrap();

        let mut v = good.clone();
        v[8] = 9;
        fs::write(&p, &v).unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Data(DataError::Version { found: 9, .. }))));

        fs::write(&p, &good[..good.len() - 3]).unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Data(DataError::Truncated { .. }))));

        let mut v = good.clone();
        v[..8].copy_from_slice(b"NOTADATA");
        fs::write(&p, &v).unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Data(DataError::BadMagic { .. }))));

        let mut v = good;
        LittleEndian::write_f32(&mut v[HEADER_LEN..], 2.0);
        fs::write(&p, &v).unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Data(DataError::Invalid(_)))));
    }

    #[test]
    fn writer_enforces_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::create(dir.path().join("d"), [2, 1, 1, 1, 2]).unwrap();
        w.push(&[0.0, 1.0]).unwrap();
        assert!(w.push(&[0.5]).is_err());
        assert!(w.finish().is_err());
    }

    #[test]
    fn batches_split_past_and_future() {
        let ds = toy();
        let b = ds.batch(&[2, 0], 2, 3).unwrap();
        assert_eq!(b.input.shape(), &[2, 2, 1, 3, 3]);
        assert_eq!(b.target.shape(), &[2, 3, 1, 3, 3]);
        assert_eq!(&b.input.data()[..18], &ds.sequence(2)[..18]);
        assert_eq!(&b.target.data()[..27], &ds.sequence(2)[18..45]);
        assert_eq!(&b.input.data()[18..], &ds.sequence(0)[..18]);
        assert!(ds.batch(&[0], 4, 3).is_err());
        assert!(ds.check_compatible(3, 3, 1).is_ok());
        assert!(ds.check_compatible(4, 3, 1).is_err());
        assert!(ds.check_compatible(3, 3, 3).is_err());
        assert_eq!(ds.subset(&[3, 1]).sequence(1), ds.sequence(1));
    }
}
