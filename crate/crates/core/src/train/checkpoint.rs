//! Checkpoint files.
//!
//! Layout: magic `STPLCKPT`, u32 version, then the sections `CONF`, `PARM`,
//! `OPTM`, `PRNG`, `EPOC` in that order. Each section is a 4-byte tag, a u64
//! byte length and its payload. All integers and floats are little-endian;
//! tensors are f32.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::TrainConfig;
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STPLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const SECTIONS: [&[u8; 4]; 5] = [b"CONF", b"PARM", b"OPTM", b"PRNG", b"EPOC"];

/// Configuration stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

/// Shuffle streams are derived from the root seed and the epoch index, so
/// this pair is the whole PRNG state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrngState {
    pub seed: u64,
    pub next_epoch: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub params: ParamStore,
    pub optim: AdamW,
    pub prng: PrngState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_mse: f64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.write_u32::<LE>(t.rank() as u32).unwrap();
    for &d in t.shape() {
        out.write_u32::<LE>(d as u32).unwrap();
    }
    for &v in t.data() {
        out.write_f32::<LE>(v).unwrap();
    }
}

fn read_tensor(r: &mut Cursor<&[u8]>) -> Result<Tensor> {
    let rank = r.read_u32::<LE>()? as usize;
    if rank > 8 {
        return Err(bad(format!("tensor rank {rank} is implausible")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u32::<LE>()? as usize);
    }
    let n: usize = shape.iter().product();
    let left = r.get_ref().len() - r.position() as usize;
    if n * 4 > left {
        return Err(bad(format!("tensor {shape:?} needs {} bytes, {left} remain", n * 4)));
    }
    let mut data = vec![0f32; n];
    r.read_f32_into::<LE>(&mut data)?;
    Ok(Tensor::new(shape, data)?)
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LE>(s.len() as u32).unwrap();
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let n = r.read_u32::<LE>()? as usize;
    let mut b = vec![0; n.min(1 << 16)];
    if n > b.len() {
        return Err(bad("string too long"));
    }
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| bad("string is not UTF-8"))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let conf = toml::to_string(&self.config).map_err(|e| bad(format!("config: {e}")))?;

        let mut parm = Vec::new();
        parm.write_u32::<LE>(self.params.len() as u32).unwrap();
        for p in self.params.iter() {
            write_str(&mut parm, p.id());
            write_tensor(&mut parm, p.value());
        }

        let mut optm = Vec::new();
        let o = &self.optim;
        optm.write_u64::<LE>(o.step_count()).unwrap();
        for x in [o.beta1, o.beta2, o.eps, o.weight_decay] {
            optm.write_f64::<LE>(x).unwrap();
        }
        let (m, v) = o.moments();
        optm.write_u32::<LE>(m.len() as u32).unwrap();
        for (a, b) in m.iter().zip(v) {
            write_tensor(&mut optm, a);
            write_tensor(&mut optm, b);
        }

        let mut prng = Vec::new();
        prng.write_u64::<LE>(self.prng.seed).unwrap();
        prng.write_u64::<LE>(self.prng.next_epoch).unwrap();

        let mut epoc = Vec::new();
        epoc.write_u64::<LE>(self.epoch as u64).unwrap();
        epoc.write_f64::<LE>(self.best_val_mse).unwrap();

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LE>(CHECKPOINT_VERSION).unwrap();
        for (tag, body) in SECTIONS.iter().zip([conf.into_bytes(), parm, optm, prng, epoc]) {
            out.extend_from_slice(*tag);
            out.write_u64::<LE>(body.len() as u64).unwrap();
            out.extend_from_slice(&body);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("file too short for a header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = r.read_u32::<LE>()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let mut bodies: Vec<&[u8]> = Vec::new();
        for want in SECTIONS {
            let mut tag = [0u8; 4];
            r.read_exact(&mut tag).map_err(|_| bad("truncated section header"))?;
            if &tag != want {
                return Err(bad(format!(
                    "expected section {}, found {}",
                    String::from_utf8_lossy(want),
                    String::from_utf8_lossy(&tag)
                )));
            }
            let len = r.read_u64::<LE>()? as usize;
            let at = r.position() as usize;
            if bytes.len() - at < len {
                return Err(bad(format!("section {} truncated", String::from_utf8_lossy(want))));
            }
            bodies.push(&bytes[at..at + len]);
            r.set_position((at + len) as u64);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes after last section"));
        }

        let conf = std::str::from_utf8(bodies[0]).map_err(|_| bad("config is not UTF-8"))?;
        let config: CheckpointConfig = toml::from_str(conf).map_err(|e| bad(format!("config: {e}")))?;

        let mut r = Cursor::new(bodies[1]);
        let n = r.read_u32::<LE>()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let id = read_str(&mut r)?;
            let t = read_tensor(&mut r)?;
            if params.find(&id).is_some() {
                return Err(bad(format!("duplicate parameter `{id}`")));
            }
            params.push(id, t);
        }

        let mut r = Cursor::new(bodies[2]);
        let step = r.read_u64::<LE>()?;
        let mut f = [0f64; 4];
        r.read_f64_into::<LE>(&mut f)?;
        let k = r.read_u32::<LE>()? as usize;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..k {
            m.push(read_tensor(&mut r)?);
            v.push(read_tensor(&mut r)?);
        }
        let optim = AdamW::from_parts((f[0], f[1]), f[2], f[3], step, m, v)?;
        optim.check_params(&params)?;

        let mut r = Cursor::new(bodies[3]);
        let prng = PrngState {
            seed: r.read_u64::<LE>()?,
            next_epoch: r.read_u64::<LE>()?,
        };
        let mut r = Cursor::new(bodies[4]);
        let epoch = r.read_u64::<LE>()? as usize;
        let best_val_mse = r.read_f64::<LE>()?;

        Ok(Self {
            config,
            params,
            optim,
            prng,
            epoch,
            best_val_mse,
        })
    }

    /// Write atomically through a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            Error::Io(io) => Error::Checkpoint(format!("{}: truncated or unreadable ({io})", path.display())),
            other => other,
        })
    }
}
