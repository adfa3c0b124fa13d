//! Grouped, strided, dilated 2-D convolution and its transpose.
//!
//! Dense groups go through im2col + GEMM; pure depthwise convolutions
//! (one input and one output channel per group) use a direct kernel.
//! Convolution is cross-correlation (no kernel flip).

use serde::{Deserialize, Serialize};

use super::gemm::matmul;
use super::{Scalar, Tensor};
use crate::error::TensorError;

/// Hyperparameters of a 2-D convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, no padding, no dilation, one group.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Extent-preserving padding `dilation*(k-1)/2`; kernel must be odd.
    pub fn same(mut self) -> Self {
        self.padding = self.dilation * (self.kernel_h - 1) / 2;
        self
    }

    /// Depthwise, extent-preserving convolution over `channels`.
    pub fn depthwise(channels: usize, kernel: usize, dilation: usize) -> Self {
        Self::new(channels, channels, kernel)
            .with_groups(channels)
            .with_dilation(dilation)
            .same()
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride", self.stride),
            ("dilation", self.dilation),
            ("groups", self.groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TensorError::config("conv", format!("{name} must be positive")));
            }
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(TensorError::config(
                "conv",
                format!(
                    "channels ({} in, {} out) not divisible by groups {}",
                    self.in_channels, self.out_channels, self.groups
                ),
            ));
        }
        Ok(())
    }

    /// `[out, in/groups, kh, kw]`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    /// `[in, out/groups, kh, kw]` (transposed-convolution layout).
    pub fn transposed_weight_shape(&self) -> [usize; 4] {
        [
            self.in_channels,
            self.out_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    fn forward_extent(&self, axis: &str, input: usize, kernel: usize) -> Result<usize, TensorError> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(TensorError::config(
                "conv2d",
                format!("{axis}: padded extent {padded} smaller than dilated kernel {span}"),
            ));
        }
        if (padded - span) % self.stride != 0 {
            return Err(TensorError::config(
                "conv2d",
                format!(
                    "{axis}: ({input} + 2*{} - {span}) is not divisible by stride {}",
                    self.padding, self.stride
                ),
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }

    /// Output `(h, w)` of the forward convolution.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize), TensorError> {
        Ok((
            self.forward_extent("height", h, self.kernel_h)?,
            self.forward_extent("width", w, self.kernel_w)?,
        ))
    }

    fn transposed_axis(&self, axis: &str, input: usize, kernel: usize) -> Result<usize, TensorError> {
        let full = (input - 1) * self.stride + self.dilation * (kernel - 1) + 1;
        if full <= 2 * self.padding {
            return Err(TensorError::config(
                "conv_transpose2d",
                format!("{axis}: padding {} consumes the whole output", self.padding),
            ));
        }
        Ok(full - 2 * self.padding)
    }

    /// Output `(h, w)` of the transposed convolution:
    /// `(h-1)*stride - 2*padding + dilation*(k-1) + 1`.
    pub fn transposed_output_extent(&self, h: usize, w: usize) -> Result<(usize, usize), TensorError> {
        Ok((
            self.transposed_axis("height", h, self.kernel_h)?,
            self.transposed_axis("width", w, self.kernel_w)?,
        ))
    }
}

/// Gradients of a convolution with respect to its three operands.
#[derive(Clone, Debug)]
pub struct ConvGrads<T: Scalar> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Sliding-window geometry shared by im2col and col2im: an image of
/// `channels x h x w` seen through windows that produce `oh x ow` positions.
#[derive(Clone, Copy)]
struct Patches {
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Patches {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output positions `o` in `[lo, hi)` with `0 <= o*stride + offset < extent`.
    fn valid(&self, offset: isize, out: usize, extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        let hi = (extent as isize - offset + s - 1).div_euclid(s);
        let lo = lo.clamp(0, out as isize) as usize;
        let hi = hi.clamp(0, out as isize) as usize;
        (lo, hi.max(lo))
    }

    fn im2col<T: Scalar>(&self, img: &[T], col: &mut [T]) {
        let l = self.cols();
        for c in 0..self.channels {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let offy = (ky * self.dilation) as isize - self.padding as isize;
                let (ylo, yhi) = self.valid(offy, self.oh, self.h);
                for kx in 0..self.kw {
                    let offx = (kx * self.dilation) as isize - self.padding as isize;
                    let (xlo, xhi) = self.valid(offx, self.ow, self.w);
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * l..(row + 1) * l];
                    for oy in 0..self.oh {
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if oy < ylo || oy >= yhi {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let iy = (oy * self.stride) as isize + offy;
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out_row[..xlo].fill(T::zero());
                        out_row[xhi..].fill(T::zero());
                        for ox in xlo..xhi {
                            out_row[ox] = src[((ox * self.stride) as isize + offx) as usize];
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add columns back onto the image (adjoint of `im2col`).
    fn col2im<T: Scalar>(&self, col: &[T], img: &mut [T]) {
        let l = self.cols();
        for c in 0..self.channels {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let offy = (ky * self.dilation) as isize - self.padding as isize;
                let (ylo, yhi) = self.valid(offy, self.oh, self.h);
                for kx in 0..self.kw {
                    let offx = (kx * self.dilation) as isize - self.padding as isize;
                    let (xlo, xhi) = self.valid(offx, self.ow, self.w);
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * l..(row + 1) * l];
                    for oy in ylo..yhi {
                        let iy = ((oy * self.stride) as isize + offy) as usize;
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let in_row = &src[oy * self.ow..(oy + 1) * self.ow];
                        for ox in xlo..xhi {
                            dst[((ox * self.stride) as isize + offx) as usize] += in_row[ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_operands<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
    weight_shape: [usize; 4],
    bias_len: usize,
) -> Result<[usize; 4], TensorError> {
    spec.validate()?;
    let dims = input.dims4(op)?;
    if dims[1] != spec.in_channels {
        return Err(TensorError::shape(op, "input channels", spec.in_channels, dims[1]));
    }
    weight.expect_rank(op, 4)?;
    let names = ["weight axis 0", "weight axis 1", "kernel height", "kernel width"];
    for (i, name) in names.iter().enumerate() {
        if weight.shape()[i] != weight_shape[i] {
            return Err(TensorError::shape(op, *name, weight_shape[i], weight.shape()[i]));
        }
    }
    bias.expect_rank(op, 1)?;
    if bias.len() != bias_len {
        return Err(TensorError::shape(op, "bias", bias_len, bias.len()));
    }
    Ok(dims)
}

/// Grouped 2-D cross-correlation.
///
/// `input` is `[B, Cin, H, W]`, `weight` is `[Cout, Cin/groups, kh, kw]`,
/// `bias` is `[Cout]`. Output is `[B, Cout, H', W']` with
/// `H' = (H + 2p - d(kh-1) - 1)/stride + 1`, which must be integral.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, TensorError> {
    let [b, cin, h, w] = check_operands(
        "conv2d",
        input,
        weight,
        bias,
        spec,
        spec.weight_shape(),
        spec.out_channels,
    )?;
    let (oh, ow) = spec.output_extent(h, w)?;
    let cout = spec.out_channels;
    let g = spec.groups;
    let (cin_g, cout_g) = (cin / g, cout / g);
    let l = oh * ow;
    let mut out = vec![T::zero(); b * cout * l];
    let x = input.data();
    let wd = weight.data();

    if cin_g == 1 && cout_g == 1 {
        depthwise_forward(x, wd, &mut out, b * cin, cin, (h, w), (oh, ow), spec);
    } else {
        let geom = Patches {
            channels: cin_g,
            h,
            w,
            oh,
            ow,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
        };
        let k = geom.rows();
        let mut col = if spec.is_pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
        for n in 0..b {
            for gi in 0..g {
                let img = &x[(n * cin + gi * cin_g) * h * w..(n * cin + (gi + 1) * cin_g) * h * w];
                let wg = &wd[gi * cout_g * k..(gi + 1) * cout_g * k];
                let dst = &mut out[(n * cout + gi * cout_g) * l..(n * cout + (gi + 1) * cout_g) * l];
                if spec.is_pointwise() {
                    matmul(cout_g, k, l, wg, false, img, false, dst, false);
                } else {
                    geom.im2col(img, &mut col);
                    matmul(cout_g, k, l, wg, false, &col, false, dst, false);
                }
            }
        }
    }
    add_bias(&mut out, bias.data(), b, cout, l);
    Tensor::new([b, cout, oh, ow], out)
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], b: usize, c: usize, l: usize) {
    for n in 0..b {
        for (o, &bv) in bias.iter().enumerate().take(c) {
            out[(n * c + o) * l..(n * c + o + 1) * l]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
    }
}

fn bias_grad<T: Scalar>(gy: &[T], b: usize, c: usize, l: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); c];
    for n in 0..b {
        for (o, g) in gb.iter_mut().enumerate() {
            for &v in &gy[(n * c + o) * l..(n * c + o + 1) * l] {
                *g += v;
            }
        }
    }
    gb
}

/// Direct depthwise kernel: `planes` independent single-channel correlations.
#[allow(clippy::too_many_arguments)]
fn depthwise_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    out: &mut [T],
    planes: usize,
    channels: usize,
    (h, wd): (usize, usize),
    (oh, ow): (usize, usize),
    spec: &ConvSpec,
) {
    let geom = Patches {
        channels: 1,
        h,
        w: wd,
        oh,
        ow,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        padding: spec.padding,
        dilation: spec.dilation,
    };
    let kk = spec.kernel_h * spec.kernel_w;
    for p in 0..planes {
        let c = p % channels;
        let src = &x[p * h * wd..(p + 1) * h * wd];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for ky in 0..spec.kernel_h {
            let offy = (ky * spec.dilation) as isize - spec.padding as isize;
            let (ylo, yhi) = geom.valid(offy, oh, h);
            for kx in 0..spec.kernel_w {
                let offx = (kx * spec.dilation) as isize - spec.padding as isize;
                let (xlo, xhi) = geom.valid(offx, ow, wd);
                if xlo == xhi {
                    continue;
                }
                let wv = w[c * kk + ky * spec.kernel_w + kx];
                for oy in ylo..yhi {
                    let iy = ((oy * spec.stride) as isize + offy) as usize;
                    let row = &src[iy * wd..(iy + 1) * wd];
                    let orow = &mut dst[oy * ow..(oy + 1) * ow];
                    if spec.stride == 1 {
                        let start = (xlo as isize + offx) as usize;
                        for (o, &v) in orow[xlo..xhi].iter_mut().zip(&row[start..start + (xhi - xlo)]) {
                            *o += wv * v;
                        }
                    } else {
                        for ox in xlo..xhi {
                            orow[ox] += wv * row[((ox * spec.stride) as isize + offx) as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    gx: Option<&mut [T]>,
    gw: &mut [T],
    planes: usize,
    channels: usize,
    (h, wd): (usize, usize),
    (oh, ow): (usize, usize),
    spec: &ConvSpec,
) {
    let geom = Patches {
        channels: 1,
        h,
        w: wd,
        oh,
        ow,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        padding: spec.padding,
        dilation: spec.dilation,
    };
    let kk = spec.kernel_h * spec.kernel_w;
    let mut gx = gx;
    for p in 0..planes {
        let c = p % channels;
        let src = &x[p * h * wd..(p + 1) * h * wd];
        let g = &gy[p * oh * ow..(p + 1) * oh * ow];
        for ky in 0..spec.kernel_h {
            let offy = (ky * spec.dilation) as isize - spec.padding as isize;
            let (ylo, yhi) = geom.valid(offy, oh, h);
            for kx in 0..spec.kernel_w {
                let offx = (kx * spec.dilation) as isize - spec.padding as isize;
                let (xlo, xhi) = geom.valid(offx, ow, wd);
                if xlo == xhi {
                    continue;
                }
                let widx = c * kk + ky * spec.kernel_w + kx;
                let wv = w[widx];
                let mut acc = T::zero();
                for oy in ylo..yhi {
                    let iy = ((oy * spec.stride) as isize + offy) as usize;
                    let grow = &g[oy * ow..(oy + 1) * ow];
                    for ox in xlo..xhi {
                        let ix = ((ox * spec.stride) as isize + offx) as usize;
                        acc += grow[ox] * src[iy * wd + ix];
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let dst = &mut gx[p * h * wd + iy * wd..p * h * wd + (iy + 1) * wd];
                        for ox in xlo..xhi {
                            let ix = ((ox * spec.stride) as isize + offx) as usize;
                            dst[ix] += wv * grow[ox];
                        }
                    }
                }
                gw[widx] += acc;
            }
        }
    }
}

/// Gradients of [`conv2d`] given the upstream gradient `grad_out`.
/// The input gradient is only formed when `need_input` is set.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
    need_input: bool,
) -> Result<ConvGrads<T>, TensorError> {
    let [b, cin, h, w] = input.dims4("conv2d_backward")?;
    let (oh, ow) = spec.output_extent(h, w)?;
    let cout = spec.out_channels;
    if grad_out.shape() != [b, cout, oh, ow] {
        return Err(TensorError::config(
            "conv2d_backward",
            format!("upstream gradient shape {:?} != {:?}", grad_out.shape(), [b, cout, oh, ow]),
        ));
    }
    let g = spec.groups;
    let (cin_g, cout_g) = (cin / g, cout / g);
    let l = oh * ow;
    let x = input.data();
    let wd = weight.data();
    let gy = grad_out.data();
    let mut gw = vec![T::zero(); weight.len()];
    let mut gx = need_input.then(|| vec![T::zero(); input.len()]);

    if cin_g == 1 && cout_g == 1 {
        depthwise_backward(x, wd, gy, gx.as_deref_mut(), &mut gw, b * cin, cin, (h, w), (oh, ow), spec);
    } else {
        let geom = Patches {
            channels: cin_g,
            h,
            w,
            oh,
            ow,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
        };
        let k = geom.rows();
        let pointwise = spec.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * l] };
        let mut gcol = if pointwise || !need_input { Vec::new() } else { vec![T::zero(); k * l] };
        for n in 0..b {
            for gi in 0..g {
                let lo = (n * cin + gi * cin_g) * h * w;
                let hi = (n * cin + (gi + 1) * cin_g) * h * w;
                let img = &x[lo..hi];
                let gyg = &gy[(n * cout + gi * cout_g) * l..(n * cout + (gi + 1) * cout_g) * l];
                let wg = &wd[gi * cout_g * k..(gi + 1) * cout_g * k];
                let gwg = &mut gw[gi * cout_g * k..(gi + 1) * cout_g * k];
                if pointwise {
                    matmul(cout_g, l, k, gyg, false, img, true, gwg, true);
                    if let Some(gx) = gx.as_mut() {
                        matmul(k, cout_g, l, wg, true, gyg, false, &mut gx[lo..hi], true);
                    }
                } else {
                    geom.im2col(img, &mut col);
                    matmul(cout_g, l, k, gyg, false, &col, true, gwg, true);
                    if let Some(gx) = gx.as_mut() {
                        matmul(k, cout_g, l, wg, true, gyg, false, &mut gcol, false);
                        geom.col2im(&gcol, &mut gx[lo..hi]);
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gx.map(|v| Tensor::new(input.shape().to_vec(), v)).transpose()?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: Tensor::new([cout], bias_grad(gy, b, cout, l))?,
    })
}

/// Transposed convolution (the adjoint of [`conv2d`] with respect to its
/// input, plus bias).
///
/// `input` is `[B, Cin, H, W]`, `weight` is `[Cin, Cout/groups, kh, kw]`,
/// output is `[B, Cout, (H-1)*stride - 2p + d(kh-1) + 1, ...]`.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, TensorError> {
    let [b, cin, h, w] = check_operands(
        "conv_transpose2d",
        input,
        weight,
        bias,
        spec,
        spec.transposed_weight_shape(),
        spec.out_channels,
    )?;
    let (oh, ow) = spec.transposed_output_extent(h, w)?;
    let cout = spec.out_channels;
    let g = spec.groups;
    let (cin_g, cout_g) = (cin / g, cout / g);
    // The output plays the role of the image, the input the role of the
    // window positions.
    let geom = Patches {
        channels: cout_g,
        h: oh,
        w: ow,
        oh: h,
        ow: w,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        padding: spec.padding,
        dilation: spec.dilation,
    };
    let k = geom.rows();
    let l = h * w;
    let ol = oh * ow;
    let x = input.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); b * cout * ol];
    let pointwise = spec.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * l] };
    for n in 0..b {
        for gi in 0..g {
            let xg = &x[(n * cin + gi * cin_g) * l..(n * cin + (gi + 1) * cin_g) * l];
            let wg = &wd[gi * cin_g * k..(gi + 1) * cin_g * k];
            let dst = &mut out[(n * cout + gi * cout_g) * ol..(n * cout + (gi + 1) * cout_g) * ol];
            if pointwise {
                matmul(k, cin_g, l, wg, true, xg, false, dst, false);
            } else {
                matmul(k, cin_g, l, wg, true, xg, false, &mut col, false);
                geom.col2im(&col, dst);
            }
        }
    }
    add_bias(&mut out, bias.data(), b, cout, ol);
    Tensor::new([b, cout, oh, ow], out)
}

/// Gradients of [`conv_transpose2d`].
pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
    need_input: bool,
) -> Result<ConvGrads<T>, TensorError> {
    let [b, cin, h, w] = input.dims4("conv_transpose2d_backward")?;
    let (oh, ow) = spec.transposed_output_extent(h, w)?;
    let cout = spec.out_channels;
    if grad_out.shape() != [b, cout, oh, ow] {
        return Err(TensorError::config(
            "conv_transpose2d_backward",
            format!("upstream gradient shape {:?} != {:?}", grad_out.shape(), [b, cout, oh, ow]),
        ));
    }
    let g = spec.groups;
    let (cin_g, cout_g) = (cin / g, cout / g);
    let geom = Patches {
        channels: cout_g,
        h: oh,
        w: ow,
        oh: h,
        ow: w,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        padding: spec.padding,
        dilation: spec.dilation,
    };
    let k = geom.rows();
    let l = h * w;
    let ol = oh * ow;
    let x = input.data();
    let wd = weight.data();
    let gy = grad_out.data();
    let mut gw = vec![T::zero(); weight.len()];
    let mut gx = need_input.then(|| vec![T::zero(); input.len()]);
    let pointwise = spec.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * l] };
    for n in 0..b {
        for gi in 0..g {
            let lo = (n * cin + gi * cin_g) * l;
            let hi = (n * cin + (gi + 1) * cin_g) * l;
            let xg = &x[lo..hi];
            let wg = &wd[gi * cin_g * k..(gi + 1) * cin_g * k];
            let gwg = &mut gw[gi * cin_g * k..(gi + 1) * cin_g * k];
            let gyg = &gy[(n * cout + gi * cout_g) * ol..(n * cout + (gi + 1) * cout_g) * ol];
            let cols: &[T] = if pointwise {
                gyg
            } else {
                geom.im2col(gyg, &mut col);
                &col
            };
            matmul(cin_g, l, k, xg, false, cols, true, gwg, true);
            if let Some(gx) = gx.as_mut() {
                matmul(cin_g, k, l, wg, false, cols, false, &mut gx[lo..hi], true);
            }
        }
    }
    Ok(ConvGrads {
        input: gx.map(|v| Tensor::new(input.shape().to_vec(), v)).transpose()?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: Tensor::new([cout], bias_grad(gy, b, cout, ol))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use stpl_oracles::{CaseRng, ConvGeom};

    fn rand_tensor(rng: &mut CaseRng, shape: [usize; 4]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, rng.vec(n, -1.0, 1.0)).unwrap()
    }

    #[test]
    fn pointwise_identity_is_identity() {
        let x = Tensor::<f32>::from_fn([2, 3, 4, 5], |i| i as f32 * 0.01);
        let spec = ConvSpec::new(3, 3, 1);
        let w = Tensor::from_fn(spec.weight_shape(), |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, &Tensor::zeros([3]), &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let x = Tensor::<f32>::from_fn([1, 4, 6, 6], |i| (i as f32).sin());
        let spec = ConvSpec::depthwise(4, 3, 1);
        let w = Tensor::from_fn(spec.weight_shape(), |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, &Tensor::zeros([4]), &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dilated_case_matches_direct_loops() {
        let mut rng = CaseRng::new(7);
        let x = rand_tensor(&mut rng, [2, 3, 5, 5]);
        let spec = ConvSpec::new(3, 4, 3).with_padding(1).with_dilation(2);
        let w = rand_tensor(&mut rng, spec.weight_shape());
        let b = Tensor::new([4], rng.vec(4, -1.0, 1.0)).unwrap();
        let y = conv2d(&x, &w, &b, &spec).unwrap();
        let geom = ConvGeom { stride: 1, padding: 1, dilation: 2, groups: 1 };
        let (want, shape) = stpl_oracles::conv2d(x.data(), [2, 3, 5, 5], w.data(), spec.weight_shape(), b.data(), geom);
        assert_eq!(y.shape(), &shape);
        for (a, e) in y.data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn depthwise_taps_beyond_a_small_map() {
        // 7x7 dilation 3 spans 19 pixels; most taps miss a 4x3 map entirely
        let mut rng = CaseRng::new(17);
        let x = rand_tensor(&mut rng, [2, 3, 4, 3]);
        let spec = ConvSpec::depthwise(3, 7, 3);
        let w = rand_tensor(&mut rng, spec.weight_shape());
        let b = Tensor::new([3], rng.vec(3, -1.0, 1.0)).unwrap();
        let y = conv2d(&x, &w, &b, &spec).unwrap();
        let geom = ConvGeom { stride: 1, padding: 9, dilation: 3, groups: 3 };
        let (want, _) = stpl_oracles::conv2d(x.data(), [2, 3, 4, 3], w.data(), spec.weight_shape(), b.data(), geom);
        for (a, e) in y.data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
        let g = rand_tensor(&mut rng, [2, 3, 4, 3]);
        let grads = conv2d_backward(&x, &w, &g, &spec, true).unwrap();
        assert!(grads.input.unwrap().is_finite() && grads.weight.is_finite());
    }

    #[test]
    fn transposed_identity_and_single_tap_expansion() {
        let x = Tensor::<f32>::from_fn([1, 2, 3, 3], |i| i as f32);
        let spec = ConvSpec::new(2, 2, 1);
        let w = Tensor::from_fn(spec.transposed_weight_shape(), |i| if i / 2 == i % 2 { 1.0 } else { 0.0 });
        assert_eq!(conv_transpose2d(&x, &w, &Tensor::zeros([2]), &spec).unwrap(), x);

        let v = 3.5f32;
        let spec = ConvSpec::new(1, 1, 2).with_stride(2);
        let y = conv_transpose2d(
            &Tensor::full([1, 1, 1, 1], v),
            &Tensor::ones(spec.transposed_weight_shape()),
            &Tensor::zeros([1]),
            &spec,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[v; 4]);
    }

    #[test]
    fn transposed_matches_zero_insertion_oracle() {
        let mut rng = CaseRng::new(11);
        let spec = ConvSpec::new(4, 6, 3).with_stride(2).with_padding(1).with_groups(2);
        let x = rand_tensor(&mut rng, [2, 4, 4, 3]);
        let w = rand_tensor(&mut rng, spec.transposed_weight_shape());
        let b = Tensor::new([6], rng.vec(6, -1.0, 1.0)).unwrap();
        let y = conv_transpose2d(&x, &w, &b, &spec).unwrap();
        let geom = ConvGeom { stride: 2, padding: 1, dilation: 1, groups: 2 };
        let (want, shape) =
            stpl_oracles::conv_transpose2d(x.data(), [2, 4, 4, 3], w.data(), spec.transposed_weight_shape(), b.data(), geom);
        assert_eq!(y.shape(), &shape);
        assert_eq!(y.shape(), &[2, 6, 7, 5]);
        for (a, e) in y.data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let spec = ConvSpec::new(3, 4, 3).with_padding(1);
        let x = Tensor::<f32>::zeros([1, 2, 5, 5]);
        let err = conv2d(&x, &Tensor::zeros(spec.weight_shape()), &Tensor::zeros([4]), &spec).unwrap_err();
        assert_eq!(err, TensorError::shape("conv2d", "input channels", 3, 2));
        let x = Tensor::<f32>::zeros([1, 3, 5, 5]);
        let err = conv2d(&x, &Tensor::zeros([4, 3, 3, 2]), &Tensor::zeros([4]), &spec).unwrap_err();
        assert_eq!(err, TensorError::shape("conv2d", "kernel width", 3, 2));
    }

    #[test]
    fn non_integral_extent_is_config_error() {
        let spec = ConvSpec::new(1, 1, 3).with_stride(2).with_padding(1);
        let x = Tensor::<f32>::zeros([1, 1, 8, 8]);
        let err = conv2d(&x, &Tensor::zeros(spec.weight_shape()), &Tensor::zeros([1]), &spec).unwrap_err();
        assert!(matches!(err, TensorError::Config { .. }), "{err}");
        let spec = ConvSpec::new(2, 3, 1).with_groups(2);
        assert!(spec.validate().is_err());
    }
}
