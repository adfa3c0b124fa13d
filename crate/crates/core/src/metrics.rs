//! Frame-quality metrics.
//!
//! MSE and MAE are **per-frame pixel sums**, then averaged over frames and
//! sequences. This is the convention behind published Moving MNIST scores
//! (a 64×64 frame with a uniform 0.07 error scores about 20). It differs from
//! the training loss, which divides by the pixel count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// PSNR reported for identical frames when averaging.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values.
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

fn check_pair<T: Scalar>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Config(format!("frame sizes differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

pub fn mse_frame<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum())
}

pub fn mae_frame<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.iter().zip(b).map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs()).sum())
}

/// `10·log10(peak² / mean squared error)`; infinite for identical frames.
pub fn psnr_frame<T: Scalar>(a: &[T], b: &[T], peak: f64) -> Result<f64> {
    let mse = mse_frame(a, b)? / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

fn gaussian(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as f64;
    let k: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over valid positions of one `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = k.iter().zip(&x[y * w + ox..y * w + ox + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = k.iter().enumerate().map(|(i, kv)| kv * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Gaussian-windowed SSIM of two `[C, H, W]` frames, averaged over valid
/// window positions and channels.
pub fn ssim_frame<T: Scalar>(a: &[T], b: &[T], shape: [usize; 3], p: &SsimParams) -> Result<f64> {
    check_pair(a, b)?;
    let [c, h, w] = shape;
    if a.len() != c * h * w {
        return Err(Error::Config(format!("frame has {} values, shape {shape:?}", a.len())));
    }
    if h < p.window || w < p.window {
        return Err(Error::Config(format!(
            "frame {h}x{w} is smaller than the {0}x{0} SSIM window",
            p.window
        )));
    }
    let k = gaussian(p.window, p.sigma);
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let x: Vec<f64> = a[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|s| filter_valid(s, h, w, &k));
        for i in 0..mx.len() {
            let (ma, mb) = (mx[i], my[i]);
            let va = sxx[i] - ma * ma;
            let vb = syy[i] - mb * mb;
            let cov = sxy[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameMetrics {
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    /// Capped at [`PSNR_CAP`] when aggregated.
    pub psnr: f64,
}

impl FrameMetrics {
    pub fn compute<T: Scalar>(a: &[T], b: &[T], shape: [usize; 3]) -> Result<Self> {
        let p = SsimParams::default();
        Ok(Self {
            mse: mse_frame(a, b)?,
            mae: mae_frame(a, b)?,
            ssim: ssim_frame(a, b, shape, &p)?,
            psnr: psnr_frame(a, b, p.peak)?,
        })
    }
}

/// Running sums over `[B, T, C, H, W]` prediction/target pairs.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    sums: Vec<FrameMetrics>,
    sequences: usize,
    psnr_infinite: usize,
}

impl MetricAccumulator {
    pub fn new(frames: usize) -> Self {
        Self {
            sums: vec![FrameMetrics::default(); frames],
            sequences: 0,
            psnr_infinite: 0,
        }
    }

    pub fn add<T: Scalar>(&mut self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::Config(format!(
                "prediction {:?} and target {:?} differ",
                pred.shape(),
                target.shape()
            )));
        }
        let [b, t, c, h, w] = pred.dims5("metrics")?;
        if t != self.sums.len() {
            return Err(Error::Config(format!("expected {} frames, got {t}", self.sums.len())));
        }
        let frame = c * h * w;
        for s in 0..b {
            for (f, acc) in self.sums.iter_mut().enumerate() {
                let at = (s * t + f) * frame;
                let m = FrameMetrics::compute(
                    &pred.data()[at..at + frame],
                    &target.data()[at..at + frame],
                    [c, h, w],
                )?;
                if m.psnr.is_infinite() {
                    self.psnr_infinite += 1;
                }
                acc.mse += m.mse;
                acc.mae += m.mae;
                acc.ssim += m.ssim;
                acc.psnr += m.psnr.min(PSNR_CAP);
            }
        }
        self.sequences += b;
        Ok(())
    }

    pub fn finish(&self) -> MetricReport {
        let n = self.sequences.max(1) as f64;
        let per_frame: Vec<FrameMetrics> = self
            .sums
            .iter()
            .map(|s| FrameMetrics {
                mse: s.mse / n,
                mae: s.mae / n,
                ssim: s.ssim / n,
                psnr: s.psnr / n,
            })
            .collect();
        let f = per_frame.len().max(1) as f64;
        let mean = per_frame.iter().fold(FrameMetrics::default(), |a, m| FrameMetrics {
            mse: a.mse + m.mse / f,
            mae: a.mae + m.mae / f,
            ssim: a.ssim + m.ssim / f,
            psnr: a.psnr + m.psnr / f,
        });
        MetricReport {
            per_frame,
            mean,
            sequences: self.sequences,
            psnr_infinite: self.psnr_infinite,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Index `t` averages frame `t` over all sequences.
    pub per_frame: Vec<FrameMetrics>,
    /// Mean over frames and sequences.
    pub mean: FrameMetrics,
    pub sequences: usize,
    /// Frames whose PSNR was infinite and entered the mean as [`PSNR_CAP`].
    pub psnr_infinite: usize,
}

impl MetricReport {
    pub fn evaluate<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Self> {
        let mut acc = MetricAccumulator::new(pred.dims5("metrics")?[1]);
        acc.add(pred, target)?;
        Ok(acc.finish())
    }

    /// `key = value` lines.
    pub fn to_kv(&self) -> String {
        let m = &self.mean;
        let mut s = String::new();
        for (k, v) in [
            ("sequences", self.sequences.to_string()),
            ("frames", self.per_frame.len().to_string()),
            ("mse", m.mse.to_string()),
            ("mae", m.mae.to_string()),
            ("ssim", m.ssim.to_string()),
            ("psnr", m.psnr.to_string()),
            ("psnr_infinite", self.psnr_infinite.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,mse,mae,ssim,psnr\n");
        for (i, m) in self.per_frame.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},{},{}", m.mse, m.mae, m.ssim, m.psnr);
        }
        s
    }

    /// Write `<stem>.txt` and `<stem>_frames.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.txt")), self.to_kv())?;
        fs::write(dir.join(format!("{stem}_frames.csv")), self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use stpl_oracles::CaseRng;

    use super::*;

    fn frame(rng: &mut CaseRng, n: usize) -> Vec<f64> {
        rng.vec(n, 0.0, 1.0)
    }

    #[test]
    fn closed_forms() {
        let y = vec![0.5f64; 64 * 64];
        let yh: Vec<f64> = y.iter().map(|v| v + 0.07).collect();
        let mse = mse_frame(&yh, &y).unwrap();
        assert!((mse - 4096.0 * 0.0049).abs() < 1e-9);
        assert!((mse - 20.07).abs() < 0.01);
        assert_eq!(mse_frame(&y, &y).unwrap(), 0.0);
        assert_eq!(mae_frame(&y, &y).unwrap(), 0.0);

        let off: Vec<f64> = y.iter().map(|v| v + 0.1).collect();
        assert!((psnr_frame(&off, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr_frame(&y, &y, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn errors_match_loop_oracles() {
        let mut rng = CaseRng::new(1);
        let (a, b) = (frame(&mut rng, 300), frame(&mut rng, 300));
        assert_eq!(mse_frame(&a, &b).unwrap(), stpl_oracles::mse_sum(&a, &b));
        assert_eq!(mae_frame(&a, &b).unwrap(), stpl_oracles::mae_sum(&a, &b));
        let p = psnr_frame(&a, &b, 1.0).unwrap();
        assert!((p - stpl_oracles::psnr(&a, &b, 1.0)).abs() <= 1e-6);
        assert!(mse_frame(&a, &b[..10]).is_err());
    }

    #[test]
    fn ssim_cases() {
        let mut rng = CaseRng::new(2);
        let shape = [1, 16, 20];
        let y = frame(&mut rng, 320);
        let p = SsimParams::default();
        assert_eq!(ssim_frame(&y, &y, shape, &p).unwrap(), 1.0);
        let inv: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        assert!(ssim_frame(&inv, &y, shape, &p).unwrap() < 1.0);
        let small = [1, 8, 40];
        assert!(ssim_frame(&y, &y, small, &p).is_err());

        let x = frame(&mut rng, 2 * 12 * 13);
        let z = frame(&mut rng, 2 * 12 * 13);
        let got = ssim_frame(&x, &z, [2, 12, 13], &p).unwrap();
        let want = stpl_oracles::ssim(&x, &z, [2, 12, 13], 11, 1.5, 1.0);
        assert!((got - want).abs() <= 1e-6);
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let mut rng = CaseRng::new(3);
        let y = frame(&mut rng, 400);
        let noise = rng.vec(400, -1.0, 1.0);
        let at = |amp: f64| {
            let yh: Vec<f64> = y.iter().zip(&noise).map(|(a, n)| a + amp * n).collect();
            psnr_frame(&yh, &y, 1.0).unwrap()
        };
        let (p1, p2, p3) = (at(0.01), at(0.05), at(0.2));
        assert!(p1 > p2 && p2 > p3);
    }

    #[test]
    fn report_aggregates_and_serializes() {
        let mut rng = CaseRng::new(4);
        let shape = [2, 3, 1, 12, 12];
        let n = shape.iter().product();
        let a = Tensor::new(shape.to_vec(), rng.vec(n, 0.0, 1.0)).unwrap();
        let b = Tensor::new(shape.to_vec(), rng.vec(n, 0.0, 1.0)).unwrap();
        let r = MetricReport::evaluate(&a, &b).unwrap();
        assert_eq!((r.sequences, r.per_frame.len(), r.psnr_infinite), (2, 3, 0));
        let f = 144;
        let want: f64 = (0..6)
            .map(|i| stpl_oracles::mse_sum(&a.data()[i * f..(i + 1) * f], &b.data()[i * f..(i + 1) * f]))
            .sum::<f64>()
            / 6.0;
        assert!((r.mean.mse - want).abs() < 1e-9);

        let same = MetricReport::evaluate(&a, &a).unwrap();
        assert_eq!(same.mean.mse, 0.0);
        assert_eq!(same.mean.ssim, 1.0);
        assert_eq!(same.mean.psnr, PSNR_CAP);
        assert_eq!(same.psnr_infinite, 6);

        let kv = r.to_kv();
        assert!(kv.contains(&format!("mse = {}", r.mean.mse)));
        assert_eq!(r.to_csv().lines().count(), 4);
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path(), "eval").unwrap();
        assert!(dir.path().join("eval_frames.csv").exists());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
            let mut rng = CaseRng::new(seed);
            let (a, b) = (frame(&mut rng, 13 * 14), frame(&mut rng, 13 * 14));
            let p = SsimParams::default();
            let ab = ssim_frame(&a, &b, [1, 13, 14], &p).unwrap();
            let ba = ssim_frame(&b, &a, [1, 13, 14], &p).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert_eq!(ssim_frame(&a, &a, [1, 13, 14], &p).unwrap(), 1.0);
        }
    }
}
