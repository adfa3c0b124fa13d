//! Bouncing-digit sequences.
//!
//! Each digit gets a uniform start position fully inside the canvas, a
//! uniform direction, and a uniform speed. Every frame the position advances
//! by the velocity; a coordinate that leaves `[0, canvas − digit]` is
//! reflected back and that velocity component negated. Trajectories are
//! tracked in f64 and rasterized at the rounded position; overlapping digits
//! combine by per-pixel maximum.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetHeader, DatasetWriter};
use super::idx::IdxImages;
use crate::error::{Error, Result};
use crate::rng::{self, child_seed};
use crate::tensor::Tensor;

/// Added to the run seed to derive the held-out test set.
pub const TEST_SEED_OFFSET: u64 = 0x7E57_5E7D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MovingSpec {
    pub num_digits: usize,
    pub canvas: usize,
    pub digit_size: usize,
    /// Frames per sequence (inputs plus targets).
    pub seq_len: usize,
    /// Speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    pub seed: u64,
}

impl Default for MovingSpec {
    fn default() -> Self {
        Self {
            num_digits: 2,
            canvas: 64,
            digit_size: 28,
            seq_len: 20,
            speed_min: 2.0,
            speed_max: 5.0,
            seed: 0,
        }
    }
}

impl MovingSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("data: {m}")));
        if self.num_digits == 0 {
            return fail("num_digits must be at least 1".into());
        }
        if self.digit_size == 0 || self.digit_size > self.canvas {
            return fail(format!(
                "digit_size {} must be in 1..={} (canvas)",
                self.digit_size, self.canvas
            ));
        }
        if self.seq_len < 2 {
            return fail(format!("seq_len must be at least 2, got {}", self.seq_len));
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max && self.speed_max.is_finite()) {
            return fail(format!(
                "speed range [{}, {}] is invalid",
                self.speed_min, self.speed_max
            ));
        }
        Ok(())
    }

    /// The same generator with the held-out seed.
    pub fn test_split(&self) -> Self {
        Self {
            seed: self.seed.wrapping_add(TEST_SEED_OFFSET),
            ..self.clone()
        }
    }

    /// `[seq_len, 1, canvas, canvas]`.
    pub fn sequence_shape(&self) -> [usize; 4] {
        [self.seq_len, 1, self.canvas, self.canvas]
    }
}

/// Square sprites at a fixed size.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitPool {
    size: usize,
    images: Vec<Vec<f32>>,
}

impl DigitPool {
    pub fn new(size: usize, images: Vec<Vec<f32>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("digit pool is empty".into()));
        }
        if let Some(bad) = images.iter().position(|i| i.len() != size * size) {
            return Err(Error::Config(format!("digit {bad} is not {size}x{size}")));
        }
        Ok(Self { size, images })
    }

    /// Resample square IDX images to `size` by area averaging.
    pub fn from_idx(src: &IdxImages, size: usize) -> Result<Self> {
        if src.rows != src.cols {
            return Err(Error::Config(format!(
                "digit images must be square, got {}x{}",
                src.rows, src.cols
            )));
        }
        if src.rows == size {
            return Self::new(size, src.images.clone());
        }
        let weights = area_weights(src.rows, size);
        let images = src
            .images
            .iter()
            .map(|img| {
                let mut out = vec![0.0f32; size * size];
                for (oy, wy) in weights.iter().enumerate() {
                    for (ox, wx) in weights.iter().enumerate() {
                        let mut acc = 0.0f64;
                        for &(sy, fy) in wy {
                            for &(sx, fx) in wx {
                                acc += fy * fx * f64::from(img[sy * src.cols + sx]);
                            }
                        }
                        out[oy * size + ox] = acc as f32;
                    }
                }
                out
            })
            .collect();
        Self::new(size, images)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// For each output cell, the source cells it overlaps and their normalized
/// overlap fractions.
fn area_weights(from: usize, to: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = from as f64 / to as f64;
    (0..to)
        .map(|o| {
            let (lo, hi) = (o as f64 * ratio, (o + 1) as f64 * ratio);
            (lo.floor() as usize..(hi.ceil() as usize).min(from))
                .filter_map(|s| {
                    let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    (overlap > 0.0).then_some((s, overlap / ratio))
                })
                .collect()
        })
        .collect()
}

/// Advance one coordinate by `vel` inside `[0, limit]`, reflecting at the walls.
pub fn bounce(pos: f64, vel: f64, limit: f64) -> (f64, f64) {
    if limit <= 0.0 {
        return (0.0, vel);
    }
    let (mut p, mut v) = (pos + vel, vel);
    loop {
        if p < 0.0 {
            p = -p;
            v = -v;
        } else if p > limit {
            p = 2.0 * limit - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

struct Mover {
    sprite: usize,
    pos: [f64; 2],
    vel: [f64; 2],
}

/// Sequence `index` of the stream defined by `spec.seed`, shaped
/// `[seq_len, 1, canvas, canvas]`.
pub fn generate_sequence(spec: &MovingSpec, pool: &DigitPool, index: u64) -> Result<Tensor> {
    spec.validate()?;
    if pool.size() != spec.digit_size {
        return Err(Error::Config(format!(
            "digit pool has {0}x{0} sprites, the generator wants {1}",
            pool.size(),
            spec.digit_size
        )));
    }
    let mut rng = rng::rng(child_seed(spec.seed, index));
    let limit = (spec.canvas - spec.digit_size) as f64;
    let mut movers: Vec<Mover> = (0..spec.num_digits)
        .map(|_| {
            let sprite = rng.gen_range(0..pool.len());
            let pos = [rng.gen::<f64>() * limit, rng.gen::<f64>() * limit];
            let theta = rng.gen::<f64>() * TAU;
            let speed = spec.speed_min + rng.gen::<f64>() * (spec.speed_max - spec.speed_min);
            Mover {
                sprite,
                pos,
                vel: [speed * theta.cos(), speed * theta.sin()],
            }
        })
        .collect();

    let (c, d) = (spec.canvas, spec.digit_size);
    let mut data = vec![0.0f32; spec.seq_len * c * c];
    for frame in data.chunks_mut(c * c) {
        for m in &movers {
            let x0 = m.pos[0].round() as usize;
            let y0 = m.pos[1].round() as usize;
            let img = &pool.images[m.sprite];
            for dy in 0..d {
                let row = &mut frame[(y0 + dy) * c + x0..(y0 + dy) * c + x0 + d];
                for (o, &v) in row.iter_mut().zip(&img[dy * d..(dy + 1) * d]) {
                    *o = o.max(v);
                }
            }
        }
        for m in &mut movers {
            for k in 0..2 {
                (m.pos[k], m.vel[k]) = bounce(m.pos[k], m.vel[k], limit);
            }
        }
    }
    Ok(Tensor::new(spec.sequence_shape().to_vec(), data)?)
}

/// Sequences `start..start + count` stacked as `[count, L, 1, canvas, canvas]`.
pub fn generate_sequences(spec: &MovingSpec, pool: &DigitPool, start: u64, count: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    for i in 0..count as u64 {
        data.extend_from_slice(generate_sequence(spec, pool, start + i)?.data());
    }
    let [l, c, h, w] = spec.sequence_shape();
    Ok(Tensor::new([count, l, c, h, w], data)?)
}

/// Stream `count` sequences into a dataset file without holding them all.
pub fn generate_dataset(
    spec: &MovingSpec,
    pool: &DigitPool,
    count: usize,
    path: impl AsRef<Path>,
) -> Result<DatasetHeader> {
    let [l, c, h, w] = spec.sequence_shape();
    let mut writer = DatasetWriter::create(path, [count, l, c, h, w])?;
    for i in 0..count as u64 {
        writer.push(generate_sequence(spec, pool, i)?.data())?;
    }
    writer.finish()
}
