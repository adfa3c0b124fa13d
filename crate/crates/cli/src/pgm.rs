//! 8-bit binary PGM output.

use std::fs;
use std::io;
use std::path::Path;

/// Grayscale image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Gray {
    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![v; width * height],
        }
    }

    /// Copy `src` with its top-left corner at `(x, y)`.
    pub fn blit(&mut self, src: &Gray, x: usize, y: usize) {
        for r in 0..src.height {
            let dst = (y + r) * self.width + x;
            self.pixels[dst..dst + src.width].copy_from_slice(&src.pixels[r * src.width..(r + 1) * src.width]);
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        fs::write(path, self.to_pgm())
    }
}

/// Parse a binary PGM written by [`Gray::to_pgm`].
pub fn read_pgm(bytes: &[u8]) -> Option<Gray> {
    let text_end = bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').nth(2)?.0 + 1;
    let header = std::str::from_utf8(&bytes[..text_end]).ok()?;
    let mut it = header.split_whitespace();
    if it.next()? != "P5" {
        return None;
    }
    let width: usize = it.next()?.parse().ok()?;
    let height: usize = it.next()?.parse().ok()?;
    if it.next()? != "255" || bytes.len() != text_end + width * height {
        return None;
    }
    Some(Gray {
        width,
        height,
        pixels: bytes[text_end..].iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_mapping() {
        let g = Gray {
            width: 3,
            height: 2,
            pixels: vec![0.0, 0.5, 1.0, -1.0, 2.0, 0.25],
        };
        let bytes = g.to_pgm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[11..], &[0, 128, 255, 0, 255, 64]);
        let back = read_pgm(&bytes).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        assert_eq!(back.pixels[2], 1.0);
    }

    #[test]
    fn blit_places_rows() {
        let mut canvas = Gray::filled(4, 3, 0.0);
        canvas.blit(&Gray::filled(2, 2, 1.0), 1, 1);
        assert_eq!(canvas.pixels, [0., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1., 0.]);
    }
}
