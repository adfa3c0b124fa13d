//! The TAU video predictor.
//!
//! Frames are encoded independently (time folded into the batch axis), the
//! latent sequence is folded into channels and passed through a stack of
//! temporal attention blocks, then decoded frame by frame. A skip from the
//! first encoder activation feeds the last decoder layer.
//!
//! Layout (`TauModel`) and weights (`ParamStore`) are separate values so the
//! same network can be evaluated at 32 bits for training and at 64 bits for
//! gradient verification.

mod config;

pub use config::{Ablation, ModelConfig};

use rand::Rng as _;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ConvSpec, Scalar, Tensor};

const NORM_EPS: f64 = 1e-5;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    spec: ConvSpec,
    transposed: bool,
}

impl Conv {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        Ok(if self.transposed {
            tape.conv_transpose2d(x, w, b, &self.spec)?
        } else {
            tape.conv2d(x, w, b, &self.spec)?
        })
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    shift: ParamId,
    groups: usize,
}

impl Norm {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(params, self.gain);
        let s = tape.param(params, self.shift);
        Ok(tape.group_norm(x, g, s, self.groups, NORM_EPS)?)
    }
}

#[derive(Clone, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        Ok(tape.linear(x, w, b)?)
    }
}

/// conv → group norm → SiLU; the norm and activation are absent on the
/// decoder's output layer.
#[derive(Clone, Debug)]
struct Stage {
    conv: Conv,
    norm: Option<Norm>,
}

impl Stage {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.apply(tape, params, x)?;
        match &self.norm {
            Some(n) => {
                let y = n.apply(tape, params, y)?;
                Ok(tape.silu(y))
            }
            None => Ok(y),
        }
    }
}

/// One temporal attention block over `[B, T·C′, h, w]`.
#[derive(Clone, Debug)]
pub struct TauBlock {
    norm: Norm,
    dw: Conv,
    dwd: Conv,
    pw: Conv,
    fc1: Dense,
    fc2: Dense,
    use_sa: bool,
    use_da: bool,
}

impl TauBlock {
    pub fn dw_spec(&self) -> &ConvSpec {
        &self.dw.spec
    }

    pub fn dwd_spec(&self) -> &ConvSpec {
        &self.dwd.spec
    }

    pub fn pw_spec(&self) -> &ConvSpec {
        &self.pw.spec
    }

    /// Large-kernel spatial attention `pw(dwd(dw(norm(h))))`.
    fn statical<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, h: Var, normalize: bool) -> Result<Var> {
        let x = if normalize {
            self.norm.apply(tape, params, h)?
        } else {
            h
        };
        let x = self.dw.apply(tape, params, x)?;
        let x = self.dwd.apply(tape, params, x)?;
        self.pw.apply(tape, params, x)
    }

    /// Channel gate `sigmoid(fc2(silu(fc1(pool(h)))))`, shaped `[B, T·C′, 1, 1]`.
    fn dynamical<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, h: Var) -> Result<Var> {
        let [b, c, ..] = tape.value(h).dims4("tau_block")?;
        let pooled = tape.global_avg_pool(h)?;
        let flat = tape.reshape(pooled, [b, c])?;
        let z = self.fc1.apply(tape, params, flat)?;
        let z = tape.silu(z);
        let z = self.fc2.apply(tape, params, z)?;
        let gate = tape.sigmoid(z);
        Ok(tape.reshape(gate, [b, c, 1, 1])?)
    }

    /// `h + (SA ⊗ DA) ⊙ h`; a disabled branch acts as all-ones.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, h: Var) -> Result<Var> {
        let channels = tape.value(h).dims4("tau_block")?[1];
        let expected = self.norm_channels(params);
        if channels != expected {
            return Err(Error::Config(format!(
                "tau block expects {expected} channels, got {channels}"
            )));
        }
        let sa = if self.use_sa {
            Some(self.statical(tape, params, h, true)?)
        } else {
            None
        };
        let da = if self.use_da {
            Some(self.dynamical(tape, params, h)?)
        } else {
            None
        };
        let gated = match (sa, da) {
            (Some(sa), Some(da)) => {
                let att = tape.broadcast_mul(sa, da)?;
                tape.mul(att, h)?
            }
            (Some(sa), None) => tape.mul(sa, h)?,
            (None, Some(da)) => tape.broadcast_mul(h, da)?,
            (None, None) => h,
        };
        Ok(tape.add(h, gated)?)
    }

    fn norm_channels<T: Scalar>(&self, params: &ParamStore<T>) -> usize {
        params.get(self.norm.gain).len()
    }
}

#[derive(Clone, Debug)]
enum Temporal {
    Tau(TauBlock),
    Baseline(Stage),
}

/// Network layout: parameter handles and convolution geometry.
#[derive(Clone, Debug)]
pub struct TauModel {
    config: ModelConfig,
    encoder: Vec<Stage>,
    entry: Conv,
    blocks: Vec<Temporal>,
    exit: Conv,
    decoder: Vec<Stage>,
    /// `(id, shape, init)` in creation order.
    manifest: Vec<(String, Vec<usize>, Fill)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Fill {
    Uniform { fan_in: usize },
    One,
    Zero,
}

struct Builder {
    manifest: Vec<(String, Vec<usize>, Fill)>,
}

impl Builder {
    fn add(&mut self, id: String, shape: Vec<usize>, fill: Fill) -> ParamId {
        self.manifest.push((id, shape, fill));
        ParamId(self.manifest.len() - 1)
    }

    fn conv(&mut self, name: &str, spec: ConvSpec, transposed: bool) -> Conv {
        let shape = if transposed {
            spec.transposed_weight_shape()
        } else {
            spec.weight_shape()
        };
        let fan_in = shape[1] * shape[2] * shape[3];
        let out = if transposed { shape[1] * spec.groups } else { shape[0] };
        Conv {
            weight: self.add(format!("{name}.weight"), shape.to_vec(), Fill::Uniform { fan_in }),
            bias: self.add(format!("{name}.bias"), vec![out], Fill::Uniform { fan_in }),
            spec,
            transposed,
        }
    }

    fn norm(&mut self, name: &str, channels: usize, groups: usize) -> Norm {
        Norm {
            gain: self.add(format!("{name}.gain"), vec![channels], Fill::One),
            shift: self.add(format!("{name}.shift"), vec![channels], Fill::Zero),
            groups: gcd(groups, channels),
        }
    }

    fn dense(&mut self, name: &str, inputs: usize, outputs: usize) -> Dense {
        let fill = Fill::Uniform { fan_in: inputs };
        Dense {
            weight: self.add(format!("{name}.weight"), vec![outputs, inputs], fill),
            bias: self.add(format!("{name}.bias"), vec![outputs], fill),
        }
    }
}

/// Stride-2 layers use a 4×4 kernel with padding 1, which halves even
/// extents exactly; stride-1 layers use 3×3 with padding 1.
fn spatial_spec(cin: usize, cout: usize, stride: usize) -> ConvSpec {
    if stride == 2 {
        ConvSpec::new(cin, cout, 4).with_stride(2).with_padding(1)
    } else {
        ConvSpec::new(cin, cout, 3).with_padding(1)
    }
}

impl TauModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { manifest: Vec::new() };
        let cs = config.hidden_spatial;
        let strides = config.encoder_strides();

        let encoder = strides
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let cin = if i == 0 { config.in_channels } else { cs };
                Stage {
                    conv: b.conv(&format!("encoder.{i}.conv"), spatial_spec(cin, cs, s), false),
                    norm: Some(b.norm(&format!("encoder.{i}.norm"), cs, config.norm_groups)),
                }
            })
            .collect();

        let t = config.frames_in;
        let wide = t * config.hidden_temporal;
        let entry = b.conv("translator.entry", ConvSpec::new(t * cs, wide, 1), false);
        let blocks = (0..config.num_tau_blocks)
            .map(|k| {
                let name = format!("translator.block.{k}");
                match config.ablation {
                    Ablation::ConvBaseline => Temporal::Baseline(Stage {
                        conv: b.conv(&format!("{name}.conv"), ConvSpec::new(wide, wide, 3).same(), false),
                        norm: Some(b.norm(&format!("{name}.norm"), wide, config.norm_groups)),
                    }),
                    ab => {
                        let bottleneck = config.bottleneck();
                        Temporal::Tau(TauBlock {
                            norm: b.norm(&format!("{name}.norm"), wide, config.norm_groups),
                            dw: b.conv(
                                &format!("{name}.dw"),
                                ConvSpec::depthwise(wide, config.dw_kernel, 1),
                                false,
                            ),
                            dwd: b.conv(
                                &format!("{name}.dwd"),
                                ConvSpec::depthwise(wide, config.dwd_kernel, config.dwd_dilation),
                                false,
                            ),
                            pw: b.conv(&format!("{name}.pw"), ConvSpec::new(wide, wide, 1), false),
                            fc1: b.dense(&format!("{name}.fc1"), wide, bottleneck),
                            fc2: b.dense(&format!("{name}.fc2"), bottleneck, wide),
                            use_sa: ab != Ablation::NoSa,
                            use_da: ab != Ablation::NoDa,
                        })
                    }
                }
            })
            .collect();
        let exit = b.conv("translator.exit", ConvSpec::new(wide, t * cs, 1), false);

        let last = strides.len() - 1;
        let decoder = strides
            .iter()
            .rev()
            .enumerate()
            .map(|(i, &s)| {
                let name = format!("decoder.{i}");
                if i == last {
                    let spec = spatial_spec(cs, config.in_channels, s);
                    Stage {
                        conv: b.conv(&format!("{name}.conv"), spec, true),
                        norm: None,
                    }
                } else {
                    Stage {
                        conv: b.conv(&format!("{name}.conv"), spatial_spec(cs, cs, s), true),
                        norm: Some(b.norm(&format!("{name}.norm"), cs, config.norm_groups)),
                    }
                }
            })
            .collect();

        Ok(Self {
            config,
            encoder,
            entry,
            blocks,
            exit,
            decoder,
            manifest: b.manifest,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter ids and shapes in store order.
    pub fn parameter_shapes(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.manifest.iter().map(|(id, s, _)| (id.as_str(), s.as_slice()))
    }

    pub fn num_parameters(&self) -> usize {
        self.manifest.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    /// The temporal attention blocks (empty for the conv baseline).
    pub fn tau_blocks(&self) -> impl Iterator<Item = &TauBlock> {
        self.blocks.iter().filter_map(|b| match b {
            Temporal::Tau(t) => Some(t),
            Temporal::Baseline(_) => None,
        })
    }

    /// Fan-in-scaled uniform weights and biases, unit norm gains, zero shifts.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = rng::rng(seed);
        let mut store = ParamStore::new();
        for (id, shape, fill) in &self.manifest {
            let n: usize = shape.iter().product();
            let data = match *fill {
                Fill::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
                }
                Fill::One => vec![T::one(); n],
                Fill::Zero => vec![T::zero(); n],
            };
            store.push(id.clone(), Tensor::new(shape.clone(), data).expect("manifest shapes are consistent"));
        }
        store
    }

    /// Check that `params` has this layout's ids and shapes.
    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<()> {
        if params.len() != self.manifest.len() {
            return Err(Error::Config(format!(
                "model has {} parameters, store has {}",
                self.manifest.len(),
                params.len()
            )));
        }
        for ((id, shape, _), p) in self.manifest.iter().zip(params.iter()) {
            if p.id() != id || p.value().shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{}` {:?} does not match expected `{id}` {shape:?}",
                    p.id(),
                    p.value().shape()
                )));
            }
        }
        Ok(())
    }

    fn check_input<T: Scalar>(&self, tape: &Tape<T>, x: Var) -> Result<[usize; 5]> {
        let dims = tape.value(x).dims5("model")?;
        let [_, t, c, h, w] = dims;
        let cfg = &self.config;
        if t != cfg.frames_in {
            return Err(Error::Config(format!("model expects {} input frames, got {t}", cfg.frames_in)));
        }
        if c != cfg.in_channels {
            return Err(Error::Config(format!("model expects {} channels, got {c}", cfg.in_channels)));
        }
        let d = cfg.downsample_factor;
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "frame extent {h}x{w} is not divisible by the downsample factor {d}"
            )));
        }
        Ok(dims)
    }

    /// `[B, T, C, H, W]` → latent `[B, T, C_s, H/d, W/d]` and the skip
    /// activation `[B·T, C_s, H, W]`.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let [b, t, c, h, w] = self.check_input(tape, x)?;
        let mut z = tape.reshape(x, [b * t, c, h, w])?;
        let mut skip = None;
        for stage in &self.encoder {
            z = stage.apply(tape, params, z)?;
            skip.get_or_insert(z);
        }
        let [_, cs, hd, wd] = tape.value(z).dims4("encode")?;
        let z = tape.reshape(z, [b, t, cs, hd, wd])?;
        Ok((z, skip.expect("encoder has at least one stage")))
    }

    /// Apply one temporal block (by index) to `[B, T·C′, h, w]`.
    pub fn tau_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        block: usize,
        h: Var,
    ) -> Result<Var> {
        match &self.blocks[block] {
            Temporal::Tau(tb) => tb.forward(tape, params, h),
            Temporal::Baseline(stage) => stage.apply(tape, params, h),
        }
    }

    /// Latent `[B, T, C_s, h, w]` → `[B, T, C_s, h, w]` through the entry
    /// projection, the block stack, and the exit projection.
    fn translate<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, z: Var) -> Result<Var> {
        let [b, t, cs, h, w] = tape.value(z).dims5("translate")?;
        let folded = tape.reshape(z, [b, t * cs, h, w])?;
        let mut y = self.entry.apply(tape, params, folded)?;
        for k in 0..self.blocks.len() {
            y = self.tau_forward(tape, params, k, y)?;
        }
        let y = self.exit.apply(tape, params, y)?;
        Ok(tape.reshape(y, [b, t, cs, h, w])?)
    }

    fn decode<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, z: Var, skip: Var) -> Result<Var> {
        let [b, t, cs, h, w] = tape.value(z).dims5("decode")?;
        let mut y = tape.reshape(z, [b * t, cs, h, w])?;
        let last = self.decoder.len() - 1;
        for (i, stage) in self.decoder.iter().enumerate() {
            if i == last {
                y = tape.add(y, skip)?;
            }
            y = stage.apply(tape, params, y)?;
        }
        let [_, c, hh, ww] = tape.value(y).dims4("decode")?;
        Ok(tape.reshape(y, [b, t, c, hh, ww])?)
    }

    /// `[B, T, C, H, W]` → `[B, T′, C, H, W]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let (z, skip) = self.encode(tape, params, x)?;
        let z = self.translate(tape, params, z)?;
        self.decode(tape, params, z, skip)
    }

    /// Forward pass on a plain tensor without recording gradients.
    pub fn predict<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let v = tape.input(x.clone());
        let y = self.forward(&mut tape, params, v)?;
        Ok(tape.value(y).clone())
    }

    /// Roll the model forward `horizon` frames, feeding clamped predictions
    /// back as input. Returns the frames and the number of forward calls.
    pub fn predict_recursive<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        horizon: usize,
    ) -> Result<(Tensor<T>, usize)> {
        if horizon == 0 {
            return Err(Error::Config("prediction horizon must be at least 1".into()));
        }
        let t = self.config.frames_in;
        let mut window = x.clone();
        let mut produced: Vec<Tensor<T>> = Vec::new();
        let mut have = 0;
        let mut calls = 0;
        while have < horizon {
            let y = self.predict(params, &window)?.clamp(T::zero(), T::one());
            calls += 1;
            let tp = y.shape()[1];
            let keep = tp.min(horizon - have);
            produced.push(y.narrow(1, 0, keep)?);
            have += keep;
            if have < horizon {
                let joined = Tensor::concat(&[&window, &y], 1)?;
                let len = joined.shape()[1];
                window = joined.narrow(1, len - t, t)?;
            }
        }
        let parts: Vec<&Tensor<T>> = produced.iter().collect();
        Ok((Tensor::concat(&parts, 1)?, calls))
    }
}
