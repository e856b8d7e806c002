//! Declarative reconstruction networks: FourierNet, FourierUNet and UNet
//! variants assembled from a JSON-serializable layer list.
//!
//! Activations use the `[C, D, H, W]` layout. A network maps a camera image
//! `[H, W]` to a volume `[D, H, W]`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fourier;
use crate::io;
use crate::kernels::lower_median;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// Divide the input by `median / scale`; undone by `input_rescaling`.
    InputScaling { scale: f64 },
    FourierConv2d { channels: usize },
    /// Levels at crop factors 1, 2, 4, ...; each level is saved as skip
    /// `scale{i}` (1-based) and the coarsest continues as the stream.
    MultiscaleFourierConv2d {
        channels: usize,
        levels: usize,
        #[serde(default)]
        relu: bool,
        #[serde(default)]
        norm: bool,
    },
    /// Negative-side multiplier `|slope|`, so `0.01` and `-0.01` are the same layer.
    LeakyRelu { slope: f64 },
    Relu,
    Norm,
    Conv2d { channels: usize, kernel: [usize; 2] },
    Conv3d { channels: usize, kernel: [usize; 3] },
    Reshape2d3d { depth: usize },
    MaxPool2d { factor: usize },
    Upsample2d { factor: usize },
    SaveSkip { name: String },
    /// Channel concatenation `[stream, skip]`; a 2-D skip is reshaped to the
    /// stream depth first.
    ConcatSkip { name: String },
    InputRescaling { scale: f64 },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::InputScaling { .. } => "input_scaling",
            Layer::FourierConv2d { .. } => "fourier_conv2d",
            Layer::MultiscaleFourierConv2d { .. } => "multiscale_fourier_conv2d",
            Layer::LeakyRelu { .. } => "leaky_relu",
            Layer::Relu => "relu",
            Layer::Norm => "norm",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Conv3d { .. } => "conv3d",
            Layer::Reshape2d3d { .. } => "reshape2d3d",
            Layer::MaxPool2d { .. } => "max_pool2d",
            Layer::Upsample2d { .. } => "upsample2d",
            Layer::SaveSkip { .. } => "save_skip",
            Layer::ConcatSkip { .. } => "concat_skip",
            Layer::InputRescaling { .. } => "input_rescaling",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_hw: [usize; 2],
    pub layers: Vec<Layer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    FourierWeight,
    Kernel,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    /// Real degrees of freedom; complex entries count twice.
    pub fn real_count(&self) -> usize {
        let n: usize = self.shape.iter().product();
        if self.kind == ParamKind::FourierWeight {
            2 * n
        } else {
            n
        }
    }
}

fn build_err(index: usize, layer: &Layer, reason: impl Into<String>) -> Error {
    Error::Build {
        index,
        kind: layer.kind().to_string(),
        reason: reason.into(),
    }
}

/// Shape walk over the layer list; yields the parameter slots and the output shape.
pub fn infer(spec: &NetworkSpec) -> Result<(Vec<ParamSlot>, [usize; 4])> {
    let [h0, w0] = spec.input_hw;
    if h0 == 0 || w0 == 0 {
        return Err(Error::Build {
            index: 0,
            kind: "input".into(),
            reason: "input extent must be positive".into(),
        });
    }
    let mut shape = [1usize, 1, h0, w0];
    let mut slots = Vec::new();
    let mut skips: HashMap<String, [usize; 4]> = HashMap::new();
    let mut scaled = false;
    let mut last_compute = None;

    for (i, layer) in spec.layers.iter().enumerate() {
        let err = |r: String| build_err(i, layer, r);
        let mut slot = |suffix: &str, kind: ParamKind, s: Vec<usize>| {
            slots.push(ParamSlot {
                name: format!("{i}.{}.{suffix}", layer.kind()),
                kind,
                shape: s,
            })
        };
        let [c, d, h, w] = shape;
        match layer {
            Layer::InputScaling { scale } | Layer::InputRescaling { scale } => {
                if !(*scale > 0.0) {
                    return Err(err(format!("scale must be positive, got {scale}")));
                }
                let opening = matches!(layer, Layer::InputScaling { .. });
                if opening == scaled {
                    return Err(err("input scaling and rescaling must pair up".into()));
                }
                if opening && i != 0 {
                    return Err(err("input scaling must be the first layer".into()));
                }
                scaled = opening;
            }
            Layer::FourierConv2d { channels } => {
                if d != 1 {
                    return Err(err(format!("expects a 2-D stream, depth is {d}")));
                }
                if *channels == 0 {
                    return Err(err("zero output channels".into()));
                }
                slot("weight", ParamKind::FourierWeight, vec![*channels, c, 2 * h, 2 * w]);
                slot("bias", ParamKind::Bias, vec![*channels]);
                shape = [*channels, 1, h, w];
            }
            Layer::MultiscaleFourierConv2d {
                channels,
                levels,
                norm,
                ..
            } => {
                if d != 1 {
                    return Err(err(format!("expects a 2-D stream, depth is {d}")));
                }
                if *levels == 0 || *channels == 0 {
                    return Err(err("needs at least one level and channel".into()));
                }
                let coarsest = 1usize << (levels - 1);
                if h % coarsest != 0 || w % coarsest != 0 {
                    return Err(err(format!(
                        "crop factor {coarsest} does not divide {h}x{w}"
                    )));
                }
                for l in 0..*levels {
                    let f = 1usize << l;
                    let n = l + 1;
                    slot(
                        &format!("scale{n}.weight"),
                        ParamKind::FourierWeight,
                        vec![*channels, c, 2 * h / f, 2 * w / f],
                    );
                    slot(&format!("scale{n}.bias"), ParamKind::Bias, vec![*channels]);
                    if *norm {
                        slot(&format!("scale{n}.gamma"), ParamKind::NormScale, vec![*channels]);
                        slot(&format!("scale{n}.beta"), ParamKind::NormShift, vec![*channels]);
                    }
                    skips.insert(format!("scale{n}"), [*channels, 1, h / f, w / f]);
                }
                shape = [*channels, 1, h / coarsest, w / coarsest];
            }
            Layer::LeakyRelu { .. } | Layer::Relu => {}
            Layer::Norm => {
                slot("gamma", ParamKind::NormScale, vec![c]);
                slot("beta", ParamKind::NormShift, vec![c]);
            }
            Layer::Conv2d { channels, kernel } => {
                if kernel.iter().any(|k| k % 2 == 0) {
                    return Err(err(format!("kernel {kernel:?} must be odd")));
                }
                slot("weight", ParamKind::Kernel, vec![*channels, c, 1, kernel[0], kernel[1]]);
                slot("bias", ParamKind::Bias, vec![*channels]);
                shape = [*channels, d, h, w];
            }
            Layer::Conv3d { channels, kernel } => {
                if kernel.iter().any(|k| k % 2 == 0) {
                    return Err(err(format!("kernel {kernel:?} must be odd")));
                }
                let mut s = vec![*channels, c];
                s.extend_from_slice(kernel);
                slot("weight", ParamKind::Kernel, s);
                slot("bias", ParamKind::Bias, vec![*channels]);
                shape = [*channels, d, h, w];
            }
            Layer::Reshape2d3d { depth } => {
                if d != 1 || *depth == 0 || c % depth != 0 {
                    return Err(err(format!(
                        "cannot split {c} channels (depth {d}) into depth {depth}"
                    )));
                }
                shape = [c / depth, *depth, h, w];
            }
            Layer::MaxPool2d { factor } => {
                if *factor == 0 || h % factor != 0 || w % factor != 0 {
                    return Err(err(format!("factor {factor} does not divide {h}x{w}")));
                }
                shape = [c, d, h / factor, w / factor];
            }
            Layer::Upsample2d { factor } => {
                if *factor == 0 {
                    return Err(err("zero factor".into()));
                }
                shape = [c, d, h * factor, w * factor];
            }
            Layer::SaveSkip { name } => {
                skips.insert(name.clone(), shape);
            }
            Layer::ConcatSkip { name } => {
                let s = *skips
                    .get(name)
                    .ok_or_else(|| err(format!("no saved skip named {name:?}")))?;
                let s = if s[1] == 1 && d > 1 {
                    if s[0] % d != 0 {
                        return Err(err(format!(
                            "skip {name:?} has {} channels, not divisible by depth {d}",
                            s[0]
                        )));
                    }
                    [s[0] / d, d, s[2], s[3]]
                } else {
                    s
                };
                if s[1..] != shape[1..] {
                    return Err(err(format!(
                        "skip {name:?} shape {s:?} does not match stream {shape:?}"
                    )));
                }
                shape = [c + s[0], d, h, w];
            }
        }
        if !matches!(layer, Layer::InputRescaling { .. } | Layer::SaveSkip { .. }) {
            last_compute = Some((i, layer));
        }
    }
    if scaled {
        return Err(Error::Build {
            index: spec.layers.len(),
            kind: "input_scaling".into(),
            reason: "input scaling is never undone".into(),
        });
    }
    match last_compute {
        Some((_, Layer::Relu)) => {}
        Some((i, l)) => return Err(build_err(i, l, "the output head must end in relu")),
        None => {
            return Err(Error::Build {
                index: 0,
                kind: "network".into(),
                reason: "no layers".into(),
            })
        }
    }
    if shape[0] != 1 || shape[2..] != [h0, w0] {
        return Err(Error::Build {
            index: spec.layers.len() - 1,
            kind: "output".into(),
            reason: format!("output {shape:?} must be one channel at the input extent"),
        });
    }
    Ok((slots, shape))
}

impl NetworkSpec {
    pub fn output_depth(&self) -> Result<usize> {
        Ok(infer(self)?.1[1])
    }

    pub fn param_slots(&self) -> Result<Vec<ParamSlot>> {
        Ok(infer(self)?.0)
    }

    /// `(Fourier weight, all kernel)` real parameter counts; biases and norm
    /// affine parameters are excluded.
    pub fn kernel_param_counts(&self) -> Result<(usize, usize)> {
        let slots = self.param_slots()?;
        let fourier = slots
            .iter()
            .filter(|s| s.kind == ParamKind::FourierWeight)
            .map(ParamSlot::real_count)
            .sum::<usize>();
        let conv = slots
            .iter()
            .filter(|s| s.kind == ParamKind::Kernel)
            .map(ParamSlot::real_count)
            .sum::<usize>();
        Ok((fourier, fourier + conv))
    }

    pub fn total_params(&self) -> Result<usize> {
        Ok(self.param_slots()?.iter().map(ParamSlot::real_count).sum())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub slot: ParamSlot,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Param>,
}

fn init_param<R: Rng + ?Sized>(slot: &ParamSlot, rng: &mut R) -> Tensor {
    let s = &slot.shape;
    match slot.kind {
        ParamKind::FourierWeight => {
            fourier::init_weight(s[0], s[1], s[2] / 2, s[3] / 2, rng)
        }
        ParamKind::Kernel => {
            let fan_in: usize = s[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..s.iter().product::<usize>())
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::from_real(s, data).expect("shape")
        }
        ParamKind::Bias | ParamKind::NormShift => Tensor::zeros(s),
        ParamKind::NormScale => Tensor::ones(s),
    }
}

pub fn build_network<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Network> {
    let (slots, _) = infer(spec)?;
    let params = slots
        .into_iter()
        .map(|slot| Param {
            value: init_param(&slot, rng),
            slot,
        })
        .collect();
    Ok(Network {
        spec: spec.clone(),
        params,
    })
}

/// `median(c) / scale`, falling back to the mean and then to 1 when the
/// statistic is not positive. Differentiable through the selected statistic.
pub fn scaling_factor(tape: &mut Tape, c: Var, scale: f64) -> Result<Var> {
    let v = tape.value(c).real()?;
    let (median, _) = lower_median(v);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let stat = if median > 0.0 {
        tape.median(c)?
    } else if mean > 0.0 {
        tape.mean(c)?
    } else {
        return Ok(tape.constant(Tensor::scalar(1.0)));
    };
    tape.scale(stat, 1.0 / scale)
}

fn divide_by(tape: &mut Tape, x: Var, m: Var) -> Result<Var> {
    let r = tape.unary(m, crate::autodiff::Unary::Recip)?;
    tape.mul_scalar(x, r)
}

/// `m * net(c / m)` with `m = median(c) / scale`, for a network spec that does
/// not carry its own scaling layers.
pub fn input_scaled_forward(
    net: &Network,
    tape: &mut Tape,
    params: &[Var],
    c: Var,
    scale: f64,
) -> Result<Var> {
    let m = scaling_factor(tape, c, scale)?;
    let x = divide_by(tape, c, m)?;
    let y = net.forward(tape, params, x)?;
    tape.mul_scalar(y, m)
}

/// Pure relabelling `[C*D, H, W] -> [C, D, H, W]`.
pub fn reshape_2d3d(t: &Tensor, depth: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 || depth == 0 || !s[0].is_multiple_of(depth) {
        return Err(Error::shape(format!(
            "cannot reshape {s:?} to depth {depth}"
        )));
    }
    t.reshape(&[s[0] / depth, depth, s[1], s[2]])
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_param_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "{} values for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if v.shape() != p.value.shape() || v.dtype() != p.value.dtype() {
                return Err(Error::shape(format!(
                    "parameter {} expects {:?}",
                    p.slot.name,
                    p.value.shape()
                )));
            }
            p.value = v;
        }
        Ok(())
    }

    /// Register every parameter on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect()
    }

    /// Image `[H, W]` to volume `[D, H, W]`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], image: Var) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::invalid("parameter binding does not match the network"));
        }
        let [h, w] = self.spec.input_hw;
        if tape.shape(image) != [h, w] {
            return Err(Error::shape(format!(
                "network expects a {h}x{w} image, got {:?}",
                tape.shape(image)
            )));
        }
        let mut x = tape.reshape(image, &[1, 1, h, w])?;
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("slots counted at build");
        let mut skips: HashMap<String, Var> = HashMap::new();
        let mut m = None;

        for layer in &self.spec.layers {
            x = match layer {
                Layer::InputScaling { scale } => {
                    let flat = tape.reshape(x, &[h * w])?;
                    let f = scaling_factor(tape, flat, *scale)?;
                    m = Some(f);
                    divide_by(tape, x, f)?
                }
                Layer::InputRescaling { .. } => {
                    let f = m.take().expect("paired at build");
                    tape.mul_scalar(x, f)?
                }
                Layer::FourierConv2d { .. } => {
                    let (wt, b) = (take(), take());
                    let s = tape.shape(x).to_vec();
                    let x3 = tape.reshape(x, &[s[0], s[2], s[3]])?;
                    let y = fourier::fourier_conv2d(tape, x3, wt, Some(b))?;
                    let ys = tape.shape(y).to_vec();
                    tape.reshape(y, &[ys[0], 1, ys[1], ys[2]])?
                }
                Layer::MultiscaleFourierConv2d {
                    levels, relu, norm, ..
                } => {
                    let s = tape.shape(x).to_vec();
                    let x3 = tape.reshape(x, &[s[0], s[2], s[3]])?;
                    let mut weights = Vec::new();
                    let mut biases = Vec::new();
                    let mut affine = Vec::new();
                    for _ in 0..*levels {
                        weights.push(take());
                        biases.push(Some(take()));
                        if *norm {
                            affine.push((take(), take()));
                        }
                    }
                    let factors: Vec<usize> = (0..*levels).map(|l| 1 << l).collect();
                    let outs =
                        fourier::multiscale_fourier_conv(tape, x3, &weights, &biases, &factors)?;
                    let mut last = None;
                    for (l, y) in outs.into_iter().enumerate() {
                        let mut y = y;
                        if *relu {
                            y = tape.relu(y)?;
                        }
                        if *norm {
                            let (g, b) = affine[l];
                            y = tape.instance_norm(y, g, b, NORM_EPS)?;
                        }
                        let ys = tape.shape(y).to_vec();
                        let y = tape.reshape(y, &[ys[0], 1, ys[1], ys[2]])?;
                        skips.insert(format!("scale{}", l + 1), y);
                        last = Some(y);
                    }
                    last.expect("at least one level")
                }
                Layer::LeakyRelu { slope } => tape.leaky_relu(x, slope.abs())?,
                Layer::Relu => tape.relu(x)?,
                Layer::Norm => {
                    let (g, b) = (take(), take());
                    tape.instance_norm(x, g, b, NORM_EPS)?
                }
                Layer::Conv2d { .. } | Layer::Conv3d { .. } => {
                    let (wt, b) = (take(), take());
                    tape.conv(x, wt, Some(b))?
                }
                Layer::Reshape2d3d { depth } => {
                    let s = tape.shape(x).to_vec();
                    tape.reshape(x, &[s[0] / depth, *depth, s[2], s[3]])?
                }
                Layer::MaxPool2d { factor } => tape.max_pool2(x, *factor)?,
                Layer::Upsample2d { factor } => tape.upsample2(x, *factor)?,
                Layer::SaveSkip { name } => {
                    skips.insert(name.clone(), x);
                    x
                }
                Layer::ConcatSkip { name } => {
                    let skip = skips[name];
                    let (s, k) = (tape.shape(x).to_vec(), tape.shape(skip).to_vec());
                    let skip = if k[1] == 1 && s[1] > 1 {
                        tape.reshape(skip, &[k[0] / s[1], s[1], k[2], k[3]])?
                    } else {
                        skip
                    };
                    tape.concat(&[x, skip])?
                }
            };
        }
        let s = tape.shape(x).to_vec();
        tape.reshape(x, &[s[1], s[2], s[3]])
    }

    /// Gradient-free reconstruction of a single image.
    pub fn reconstruct(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let c = tape.constant(image.clone());
        let y = self.forward(&mut tape, &params, c)?;
        Ok(tape.value(y).clone())
    }

    /// Writes `manifest.json` plus one FOT1 file per parameter.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            let file = format!("{i:03}.fot");
            io::write_tensor(dir.join(&file), &p.value)?;
            entries.push(ManifestEntry {
                name: p.slot.name.clone(),
                file,
                shape: p.slot.shape.clone(),
            });
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            params: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let (slots, _) = infer(&manifest.spec)?;
        if slots.len() != manifest.params.len() {
            return Err(Error::invalid("manifest parameter list does not match the spec"));
        }
        let mut params = Vec::with_capacity(slots.len());
        for (slot, entry) in slots.into_iter().zip(manifest.params) {
            let value = io::read_tensor(dir.join(&entry.file))?;
            let complex = slot.kind == ParamKind::FourierWeight;
            if entry.name != slot.name || value.shape() != slot.shape || value.is_complex() != complex {
                return Err(Error::invalid(format!(
                    "checkpoint entry {} does not match slot {}",
                    entry.name, slot.name
                )));
            }
            params.push(Param { slot, value });
        }
        Ok(Network {
            spec: manifest.spec,
            params,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: NetworkSpec,
    params: Vec<ManifestEntry>,
}

// ---- presets ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Fouriernet2d,
    Fouriernet3d,
    Fourierunet3d,
    Unet2d,
    Unet3d,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Fouriernet2d,
        Preset::Fouriernet3d,
        Preset::Fourierunet3d,
        Preset::Unet2d,
        Preset::Unet3d,
    ];

    /// Sizes from the published architecture tables (256x256 camera, 12 planes).
    pub fn full(self) -> NetworkSpec {
        match self {
            Preset::Fouriernet2d => fouriernet2d(256, 8, 11),
            Preset::Fouriernet3d => fouriernet3d(256, 12, 5, [11, 7, 7]),
            Preset::Fourierunet3d => fourierunet3d(256, 12, 5, 4, [11, 7, 7]),
            Preset::Unet2d => unet2d(256, 12, 24, 8, 7),
            Preset::Unet3d => unet3d(256, 12, [30, 60], 5, 4, 7, [11, 7, 7]),
        }
    }

    /// Same topology at 32x32 with 4 planes and narrower layers.
    pub fn desk(self) -> NetworkSpec {
        match self {
            Preset::Fouriernet2d => fouriernet2d(32, 4, 11),
            Preset::Fouriernet3d => fouriernet3d(32, 4, 2, [3, 5, 5]),
            Preset::Fourierunet3d => fourierunet3d(32, 4, 2, 4, [3, 5, 5]),
            Preset::Unet2d => unet2d(32, 3, 6, 5, 7),
            Preset::Unet3d => unet3d(32, 4, [4, 8], 2, 4, 7, [3, 5, 5]),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown network preset {s:?}")))
    }
}

const INPUT_SCALE: f64 = 0.01;

fn wrap(name: &str, hw: usize, mut body: Vec<Layer>) -> NetworkSpec {
    let mut layers = vec![Layer::InputScaling { scale: INPUT_SCALE }];
    layers.append(&mut body);
    layers.push(Layer::InputRescaling { scale: INPUT_SCALE });
    NetworkSpec {
        name: name.to_string(),
        input_hw: [hw, hw],
        layers,
    }
}

/// Replace the input-scaling constant of a wrapped spec.
pub fn with_input_scale(mut spec: NetworkSpec, scale: f64) -> NetworkSpec {
    for l in &mut spec.layers {
        if let Layer::InputScaling { scale: s } | Layer::InputRescaling { scale: s } = l {
            *s = scale;
        }
    }
    spec
}

/// Retarget a single-plane 2-D spec at `planes` output planes: the final
/// convolution emits one channel per plane, relabelled as depth.
pub fn planes_head(mut spec: NetworkSpec, planes: usize) -> Result<NetworkSpec> {
    let relu = spec
        .layers
        .iter()
        .rposition(|l| matches!(l, Layer::Relu))
        .ok_or_else(|| Error::invalid("spec has no output relu"))?;
    match relu.checked_sub(1).map(|i| &mut spec.layers[i]) {
        Some(Layer::Conv2d { channels, .. }) if *channels == 1 => *channels = planes,
        _ => return Err(Error::invalid("spec does not end in a single-channel 2-D conv")),
    }
    spec.layers.insert(relu, Layer::Reshape2d3d { depth: planes });
    spec.name = format!("{}x{planes}", spec.name);
    infer(&spec)?;
    Ok(spec)
}

/// Fourier conv -> LeakyReLU -> norm -> conv -> ReLU.
pub fn fouriernet2d(hw: usize, channels: usize, kernel: usize) -> NetworkSpec {
    wrap(
        "fouriernet2d",
        hw,
        vec![
            Layer::FourierConv2d { channels },
            Layer::LeakyRelu { slope: 0.01 },
            Layer::Norm,
            Layer::Conv2d {
                channels: 1,
                kernel: [kernel, kernel],
            },
            Layer::Relu,
        ],
    )
}

pub fn fouriernet3d(hw: usize, depth: usize, channels3d: usize, kernel: [usize; 3]) -> NetworkSpec {
    wrap(
        "fouriernet3d",
        hw,
        vec![
            Layer::FourierConv2d {
                channels: channels3d * depth,
            },
            Layer::LeakyRelu { slope: 0.01 },
            Layer::Norm,
            Layer::Reshape2d3d { depth },
            Layer::Conv3d {
                channels: channels3d,
                kernel,
            },
            Layer::LeakyRelu { slope: 0.01 },
            Layer::Norm,
            Layer::Conv3d { channels: 1, kernel },
            Layer::Relu,
        ],
    )
}

fn conv3d_block(channels: usize, kernel: [usize; 3]) -> [Layer; 3] {
    [Layer::Conv3d { channels, kernel }, Layer::Relu, Layer::Norm]
}

fn conv2d_block(channels: usize, kernel: usize) -> [Layer; 3] {
    [
        Layer::Conv2d {
            channels,
            kernel: [kernel, kernel],
        },
        Layer::Relu,
        Layer::Norm,
    ]
}

/// 3-D decoder shared by the U-shaped 3-D presets: per finer scale, upsample,
/// concatenate the reshaped encoder skip, two conv blocks; then a 1x1x1 head.
fn decoder3d(scales: usize, channels3d: usize, kernel: [usize; 3], skip: impl Fn(usize) -> String) -> Vec<Layer> {
    let mut layers = Vec::new();
    for s in (1..scales).rev() {
        layers.push(Layer::Upsample2d { factor: 2 });
        layers.push(Layer::ConcatSkip { name: skip(s) });
        layers.extend(conv3d_block(channels3d, kernel));
        layers.extend(conv3d_block(channels3d, kernel));
    }
    layers.push(Layer::Conv3d {
        channels: 1,
        kernel: [1, 1, 1],
    });
    layers.push(Layer::Relu);
    layers
}

pub fn fourierunet3d(
    hw: usize,
    depth: usize,
    channels3d: usize,
    scales: usize,
    kernel: [usize; 3],
) -> NetworkSpec {
    let mut body = vec![
        Layer::MultiscaleFourierConv2d {
            channels: channels3d * depth,
            levels: scales,
            relu: true,
            norm: true,
        },
        Layer::Reshape2d3d { depth },
    ];
    body.extend(decoder3d(scales, channels3d, kernel, |s| format!("scale{s}")));
    wrap("fourierunet3d", hw, body)
}

pub fn unet2d(hw: usize, first: usize, channels: usize, scales: usize, kernel: usize) -> NetworkSpec {
    let mut body = Vec::new();
    body.extend(conv2d_block(first, kernel));
    body.extend(conv2d_block(channels, kernel));
    for s in 2..=scales {
        body.push(Layer::SaveSkip {
            name: format!("enc{}", s - 1),
        });
        body.push(Layer::MaxPool2d { factor: 2 });
        body.extend(conv2d_block(channels, kernel));
        body.extend(conv2d_block(channels, kernel));
    }
    for s in (1..scales).rev() {
        body.push(Layer::Upsample2d { factor: 2 });
        body.push(Layer::ConcatSkip {
            name: format!("enc{s}"),
        });
        body.extend(conv2d_block(channels, kernel));
        body.extend(conv2d_block(channels, kernel));
    }
    body.push(Layer::Conv2d {
        channels: 1,
        kernel: [1, 1],
    });
    body.push(Layer::Relu);
    wrap("unet2d", hw, body)
}

pub fn unet3d(
    hw: usize,
    depth: usize,
    channels2d: [usize; 2],
    channels3d: usize,
    scales: usize,
    kernel2d: usize,
    kernel3d: [usize; 3],
) -> NetworkSpec {
    let mut body = Vec::new();
    body.extend(conv2d_block(channels2d[0], kernel2d));
    body.extend(conv2d_block(channels2d[1], kernel2d));
    for s in 2..=scales {
        body.push(Layer::SaveSkip {
            name: format!("enc{}", s - 1),
        });
        body.push(Layer::MaxPool2d { factor: 2 });
        body.extend(conv2d_block(channels2d[1], kernel2d));
        body.extend(conv2d_block(channels2d[1], kernel2d));
    }
    body.push(Layer::Reshape2d3d { depth });
    body.extend(decoder3d(scales, channels3d, kernel3d, |s| format!("enc{s}")));
    wrap("unet3d", hw, body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_shapes() {
        let s = Preset::Fouriernet2d.full();
        let slots = s.param_slots().unwrap();
        assert_eq!(slots[0].shape, vec![8, 1, 512, 512]);
        assert_eq!(s.output_depth().unwrap(), 1);
        assert_eq!(Preset::Fouriernet3d.full().output_depth().unwrap(), 12);
        assert_eq!(Preset::Fourierunet3d.full().output_depth().unwrap(), 12);
        assert_eq!(Preset::Unet3d.full().output_depth().unwrap(), 12);
        assert_eq!(Preset::Unet2d.full().output_depth().unwrap(), 1);
        // as tabulated: 2 + 2 * 7 encoder, 2 * 7 decoder, 1x1 head
        let convs = Preset::Unet2d
            .full()
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv2d { .. }))
            .count();
        assert_eq!(convs, 31);
    }

    #[test]
    fn fourier_layer_dominates_kernel_params() {
        let (f, all) = Preset::Fouriernet2d.full().kernel_param_counts().unwrap();
        assert!(f as f64 / all as f64 >= 0.99);
    }

    #[test]
    fn build_errors_name_the_layer() {
        let mut s = fouriernet2d(16, 2, 3);
        s.layers[4] = Layer::Conv2d {
            channels: 1,
            kernel: [4, 4],
        };
        match infer(&s) {
            Err(Error::Build { index, kind, .. }) => {
                assert_eq!(index, 4);
                assert_eq!(kind, "conv2d");
            }
            other => panic!("{other:?}"),
        }
        let mut s = fouriernet2d(16, 2, 3);
        s.layers.remove(5);
        assert!(matches!(infer(&s), Err(Error::Build { .. })));
        let mut s = fouriernet3d(16, 3, 2, [3, 3, 3]);
        s.layers[4] = Layer::Reshape2d3d { depth: 4 };
        assert!(infer(&s).is_err());
    }

    #[test]
    fn reshape_relabels() {
        let t = Tensor::from_real(&[6, 1, 2], (0..12).map(f64::from).collect()).unwrap();
        let r = reshape_2d3d(&t, 3).unwrap();
        assert_eq!(r.shape(), &[2, 3, 1, 2]);
        assert_eq!(r.re(), t.re());
        assert_eq!(r.reshape(t.shape()).unwrap(), t);
        assert!(reshape_2d3d(&t, 4).is_err());
        let big = Tensor::zeros(&[60, 4, 4]);
        assert_eq!(reshape_2d3d(&big, 12).unwrap().shape(), &[5, 12, 4, 4]);
    }

    #[test]
    fn spec_json_round_trip() {
        let s = Preset::Fourierunet3d.desk();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"kind\":\"multiscale_fourier_conv2d\""));
        let back: NetworkSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!("unet3d".parse::<Preset>().unwrap(), Preset::Unet3d);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = build_network(&fouriernet2d(8, 2, 3), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path()).unwrap();
        let back = Network::load(dir.path()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn scaled_forward_is_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = build_network(&Preset::Fouriernet2d.desk(), &mut rng).unwrap();
        let c = Tensor::uniform(&[32, 32], 0.5, 2.0, &mut rng);
        let a = net.reconstruct(&c).unwrap();
        let b = net.reconstruct(&c.map_real(|v| 2.0 * v).unwrap()).unwrap();
        let twice = a.map_real(|v| 2.0 * v).unwrap();
        assert!(b.max_abs_diff(&twice).unwrap() <= 1e-9 * (1.0 + a.max()));
        let z = net.reconstruct(&Tensor::zeros(&[32, 32])).unwrap();
        assert!(z.all_finite());
    }

    #[test]
    fn planes_head_emits_depth() {
        let s = planes_head(fouriernet2d(8, 2, 3), 4).unwrap();
        assert_eq!(s.output_depth().unwrap(), 4);
        let u = planes_head(unet2d(8, 2, 2, 2, 3), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = build_network(&u, &mut rng).unwrap();
        assert_eq!(net.reconstruct(&Tensor::ones(&[8, 8])).unwrap().shape(), &[3, 8, 8]);
        assert!(planes_head(fouriernet3d(8, 2, 1, [1, 3, 3]), 2).is_err());
    }
}
