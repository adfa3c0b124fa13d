//! Procedural handwritten-style digits, used as a stand-in sprite source
//! when no MNIST files are available. Each digit is a set of strokes in a
//! unit box, distorted by a random affine map and stroke width, then
//! rasterized with a one-pixel anti-aliased edge.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;

use super::idx::write_idx3;
use crate::error::Result;
use crate::rng::{self, Rng};

type Pt = (f64, f64);

/// Points along an ellipse arc; angles in degrees, 0 = right, 90 = up.
fn arc(c: Pt, r: Pt, from: f64, to: f64) -> Vec<Pt> {
    let n = 24;
    (0..=n)
        .map(|i| {
            let a = (from + (to - from) * i as f64 / n as f64) * PI / 180.0;
            (c.0 + r.0 * a.cos(), c.1 - r.1 * a.sin())
        })
        .collect()
}

fn strokes(digit: u8) -> Vec<Vec<Pt>> {
    match digit {
        0 => vec![arc((0.5, 0.5), (0.3, 0.45), 0.0, 360.0)],
        1 => vec![vec![(0.32, 0.22), (0.55, 0.05), (0.55, 0.95)]],
        2 => {
            let mut s = arc((0.5, 0.3), (0.27, 0.25), 160.0, -40.0);
            s.extend([(0.18, 0.95), (0.85, 0.95)]);
            vec![s]
        }
        3 => vec![
            arc((0.5, 0.28), (0.25, 0.23), 150.0, -90.0),
            arc((0.5, 0.72), (0.28, 0.23), 90.0, -150.0),
        ],
        4 => vec![vec![(0.68, 0.95), (0.68, 0.05), (0.15, 0.66), (0.88, 0.66)]],
        5 => {
            let mut s = vec![(0.78, 0.05), (0.32, 0.05), (0.27, 0.45)];
            s.extend(arc((0.5, 0.67), (0.28, 0.28), 130.0, -150.0));
            vec![s]
        }
        6 => {
            let mut s = vec![(0.72, 0.05), (0.45, 0.25)];
            s.extend(arc((0.5, 0.68), (0.26, 0.27), 160.0, 520.0));
            vec![s]
        }
        7 => vec![vec![(0.15, 0.05), (0.85, 0.05), (0.42, 0.95)]],
        8 => vec![
            arc((0.5, 0.27), (0.22, 0.22), 0.0, 360.0),
            arc((0.5, 0.72), (0.26, 0.23), 0.0, 360.0),
        ],
        9 => {
            let mut s = arc((0.5, 0.3), (0.25, 0.25), -20.0, 340.0);
            s.push((0.62, 0.95));
            vec![s]
        }
        _ => panic!("digit {digit} out of range"),
    }
}

fn segment_distance(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// One `size × size` digit image with values in `[0, 1]`.
pub fn render_digit(digit: u8, size: usize, rng: &mut Rng) -> Vec<f32> {
    // the glyph occupies a 20/28 box, as in the usual benchmark sprites
    let box_px = size as f64 * 20.0 / 28.0;
    let scale = box_px * rng.gen_range(0.85..1.05);
    let aspect = rng.gen_range(0.8..1.1);
    let shear = rng.gen_range(-0.3..0.3);
    let rot = rng.gen_range(-0.2..0.2f64);
    let width = size as f64 / 28.0 * rng.gen_range(1.1..1.9);
    let (cx, cy) = (
        size as f64 / 2.0 + rng.gen_range(-1.0..1.0),
        size as f64 / 2.0 + rng.gen_range(-1.0..1.0),
    );
    let jitter = 0.03;
    let place = |p: Pt, rng: &mut Rng| -> Pt {
        let (u, v) = (
            p.0 - 0.5 + rng.gen_range(-jitter..jitter),
            p.1 - 0.5 + rng.gen_range(-jitter..jitter),
        );
        let u = u * aspect - shear * v;
        let (s, c) = rot.sin_cos();
        (cx + scale * (c * u - s * v), cy + scale * (s * u + c * v))
    };
    let lines: Vec<Vec<Pt>> = strokes(digit)
        .into_iter()
        .map(|s| s.into_iter().map(|p| place(p, rng)).collect())
        .collect();
    let mut img = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = lines
                .iter()
                .flat_map(|l| l.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            img[y * size + x] = (width - d + 0.5).clamp(0.0, 1.0) as f32;
        }
    }
    img
}

/// `count` digits cycling through 0–9, each with its own distortion.
pub fn render_digit_pool(count: usize, size: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = rng::rng(seed);
    (0..count).map(|i| render_digit((i % 10) as u8, size, &mut rng)).collect()
}

/// Write a rendered pool as an IDX3 file with 28×28 images.
pub fn write_glyph_fixture(path: impl AsRef<Path>, count: usize, seed: u64) -> Result<()> {
    let imgs: Vec<Vec<u8>> = render_digit_pool(count, 28, seed)
        .into_iter()
        .map(|img| img.into_iter().map(|v| (v * 255.0).round() as u8).collect())
        .collect();
    write_idx3(path, 28, 28, &imgs)
}
