//! Naive reference kernels evaluated in 64-bit floating point.
//!
//! Everything here is written as plain nested loops over flat row-major
//! slices so it shares no code path with the optimized kernels it checks.
//! The crate is a dev-dependency only.

/// Geometry of a 2-D convolution, mirrored from the engine without importing it.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

/// Direct cross-correlation with grouping, dilation, stride and zero padding.
///
/// `x` is `[b, cin, h, w]`, `w` is `[cout, cin/groups, kh, kw]`.
/// Returns the output and its shape `[b, cout, ho, wo]`.
pub fn conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: &[f64],
    g: ConvGeom,
) -> (Vec<f64>, [usize; 4]) {
    let [b, cin, h, wd] = xs;
    let [cout, cin_g, kh, kw] = ws;
    assert_eq!(cin_g * g.groups, cin);
    let cout_g = cout / g.groups;
    let ho = (h + 2 * g.padding - g.dilation * (kh - 1) - 1) / g.stride + 1;
    let wo = (wd + 2 * g.padding - g.dilation * (kw - 1) - 1) / g.stride + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            let grp = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[o];
                    for i in 0..cin_g {
                        let ci = grp * cin_g + i;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((n * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((o * cin_g + i) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [b, cout, ho, wo])
}

/// Transposed convolution computed the textbook way: insert `stride - 1`
/// zeros between input pixels, pad by `dilation*(k-1) - padding`, then run a
/// stride-1 direct correlation with the spatially flipped kernel.
///
/// `w` is `[cin, cout/groups, kh, kw]`.
pub fn conv_transpose2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: &[f64],
    g: ConvGeom,
) -> (Vec<f64>, [usize; 4]) {
    let [b, cin, h, wd] = xs;
    let [wcin, cout_g, kh, kw] = ws;
    assert_eq!(wcin, cin);
    let cin_g = cin / g.groups;
    let cout = cout_g * g.groups;
    let zh = (h - 1) * g.stride + 1;
    let zw = (wd - 1) * g.stride + 1;
    let mut z = vec![0.0; b * cin * zh * zw];
    for n in 0..b {
        for c in 0..cin {
            for y in 0..h {
                for xx in 0..wd {
                    z[((n * cin + c) * zh + y * g.stride) * zw + xx * g.stride] =
                        x[((n * cin + c) * h + y) * wd + xx];
                }
            }
        }
    }
    let pad_h = (g.dilation * (kh - 1)) as isize - g.padding as isize;
    let pad_w = (g.dilation * (kw - 1)) as isize - g.padding as isize;
    let ho = ((h - 1) * g.stride + g.dilation * (kh - 1) + 1) - 2 * g.padding;
    let wo = ((wd - 1) * g.stride + g.dilation * (kw - 1) + 1) - 2 * g.padding;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            let grp = o / cout_g;
            let ol = o % cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[o];
                    for il in 0..cin_g {
                        let ci = grp * cin_g + il;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let zy = oy as isize + (ky * g.dilation) as isize - pad_h;
                                let zx = ox as isize + (kx * g.dilation) as isize - pad_w;
                                if zy < 0 || zx < 0 || zy >= zh as isize || zx >= zw as isize {
                                    continue;
                                }
                                let zv = z[((n * cin + ci) * zh + zy as usize) * zw + zx as usize];
                                let wv = w[((ci * cout_g + ol) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)];
                                acc += zv * wv;
                            }
                        }
                    }
                    out[((n * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [b, cout, ho, wo])
}

/// `x[b, n] * w[m, n]^T + bias[m]` by triple loop.
pub fn linear(x: &[f64], b: usize, n: usize, w: &[f64], m: usize, bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; b * m];
    for r in 0..b {
        for o in 0..m {
            let mut acc = bias[o];
            for k in 0..n {
                acc += x[r * n + k] * w[o * n + k];
            }
            out[r * m + o] = acc;
        }
    }
    out
}

/// Mean over each `h*w` plane, summed left to right.
pub fn global_avg_pool(x: &[f64], planes: usize, plane: usize) -> Vec<f64> {
    (0..planes)
        .map(|p| {
            let mut s = 0.0;
            for i in 0..plane {
                s += x[p * plane + i];
            }
            s / plane as f64
        })
        .collect()
}

fn unravel(mut idx: usize, shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    for i in (0..shape.len()).rev() {
        out[i] = idx % shape[i];
        idx /= shape[i];
    }
    out
}

/// Temperature softmax normalized jointly over `axes`, computed element by
/// element: for every position, the denominator sums over all positions that
/// agree with it on the non-reduced axes.
pub fn softmax_axes(x: &[f64], shape: &[usize], axes: &[usize], tau: f64) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let ii = unravel(i, shape);
        let mut max = f64::NEG_INFINITY;
        let mut denom_terms = Vec::new();
        for j in 0..n {
            let jj = unravel(j, shape);
            let same = (0..shape.len()).all(|a| axes.contains(&a) || ii[a] == jj[a]);
            if same {
                max = max.max(x[j] / tau);
                denom_terms.push(j);
            }
        }
        let denom: f64 = denom_terms.iter().map(|&j| (x[j] / tau - max).exp()).sum();
        *o = (x[i] / tau - max).exp() / denom;
    }
    out
}

/// Group normalization with a separate pass for mean and for variance.
pub fn group_norm(
    x: &[f64],
    shape: [usize; 4],
    groups: usize,
    gain: &[f64],
    shift: &[f64],
    eps: f64,
) -> Vec<f64> {
    let [b, c, h, w] = shape;
    let cg = c / groups;
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        for g in 0..groups {
            let start = (n * c + g * cg) * plane;
            let len = cg * plane;
            let mut mean = 0.0;
            for i in 0..len {
                mean += x[start + i];
            }
            mean /= len as f64;
            let mut var = 0.0;
            for i in 0..len {
                let d = x[start + i] - mean;
                var += d * d;
            }
            var /= len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..len {
                let ch = g * cg + i / plane;
                out[start + i] = (x[start + i] - mean) * inv * gain[ch] + shift[ch];
            }
        }
    }
    out
}

/// Differential divergence regularizer on `[b, t, c, h, w]` sequences:
/// forward differences along time, temperature softmax over each `(c,h,w)`
/// block, `KL(pred || target)` summed over time steps and averaged over the
/// batch. Uses explicit `exp`/`ln` of the normalized probabilities.
pub fn ddr(y_hat: &[f64], y: &[f64], shape: [usize; 5], tau: f64) -> f64 {
    let [b, t, c, h, w] = shape;
    let frame = c * h * w;
    let mut total = 0.0;
    for n in 0..b {
        for i in 0..t - 1 {
            let at = |v: &[f64], ti: usize, k: usize| v[(n * t + ti) * frame + k];
            let dp: Vec<f64> = (0..frame).map(|k| at(y_hat, i + 1, k) - at(y_hat, i, k)).collect();
            let dq: Vec<f64> = (0..frame).map(|k| at(y, i + 1, k) - at(y, i, k)).collect();
            let norm = |d: &[f64]| {
                let m = d.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v / tau));
                let e: Vec<f64> = d.iter().map(|&v| (v / tau - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect::<Vec<_>>()
            };
            let p = norm(&dp);
            let q = norm(&dq);
            for k in 0..frame {
                total += p[k] * (p[k].ln() - q[k].ln());
            }
        }
    }
    total / b as f64
}

/// Sum over time of squared error, divided by `b*c*h*w`.
pub fn reconstruction(y_hat: &[f64], y: &[f64], shape: [usize; 5]) -> f64 {
    let [b, _t, c, h, w] = shape;
    let mut s = 0.0;
    for i in 0..y.len() {
        let d = y_hat[i] - y[i];
        s += d * d;
    }
    s / (b * c * h * w) as f64
}

/// Per-frame pixel-sum squared error.
pub fn mse_sum(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

/// Per-frame pixel-sum absolute error.
pub fn mae_sum(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s
}

pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let mse = mse_sum(a, b) / a.len() as f64;
    10.0 * (peak * peak / mse).log10()
}

/// Gaussian-windowed SSIM with every window statistic recomputed directly
/// from the 2-D window at each valid position (no separable filtering).
pub fn ssim(a: &[f64], b: &[f64], shape: [usize; 3], window: usize, sigma: f64, peak: f64) -> f64 {
    let [c, h, w] = shape;
    let half = (window / 2) as f64;
    let mut kern = vec![0.0; window * window];
    let mut ksum = 0.0;
    for y in 0..window {
        for x in 0..window {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            kern[y * window + x] = v;
            ksum += v;
        }
    }
    for v in &mut kern {
        *v /= ksum;
    }
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for oy in 0..=h - window {
            for ox in 0..=w - window {
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..window {
                    for x in 0..window {
                        let k = kern[y * window + x];
                        let i = (ch * h + oy + y) * w + ox + x;
                        ma += k * a[i];
                        mb += k * b[i];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..window {
                    for x in 0..window {
                        let k = kern[y * window + x];
                        let i = (ch * h + oy + y) * w + ox + x;
                        va += k * (a[i] - ma) * (a[i] - ma);
                        vb += k * (b[i] - mb) * (b[i] - mb);
                        cov += k * (a[i] - ma) * (b[i] - mb);
                    }
                }
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Scalar AdamW trajectory with decoupled decay. Returns the parameter after
/// each step.
pub fn adamw_scalar(
    theta0: f64,
    grads: impl Fn(f64) -> f64,
    steps: usize,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    wd: f64,
) -> Vec<f64> {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = grads(theta);
        m = betas.0 * m + (1.0 - betas.0) * g;
        v = betas.1 * v + (1.0 - betas.1) * g * g;
        let mh = m / (1.0 - betas.0.powi(t as i32));
        let vh = v / (1.0 - betas.1.powi(t as i32));
        theta -= lr * (mh / (vh.sqrt() + eps) + wd * theta);
        out.push(theta);
    }
    out
}

/// Small deterministic generator for oracle inputs (SplitMix64).
pub struct CaseRng(u64);

impl CaseRng {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next_u64() % (hi - lo + 1) as u64) as usize
    }

    pub fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }
}
