//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records every primitive as a node holding its value and the
//! inputs it was computed from. Node ids increase monotonically, so the
//! recording order is already topological and `backward` is a single reverse
//! sweep.
//!
//! Gradients of a real loss with respect to a complex node are stored as the
//! complex number `dL/dRe + i dL/dIm` (the conjugate Wirtinger gradient, i.e.
//! the two real channels packed together). For a holomorphic map `y = f(z)`
//! the chain rule is then `g_z = conj(f'(z)) g_y`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kernels::{self, NormCache, SpectralCrop, Window};
use crate::tensor::{numel, DType, Data, Tensor};

/// Handle to a node on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Sqrt,
    Square,
    Recip,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Fft2 {
        x: Var,
        inverse: bool,
    },
    Roll {
        x: Var,
        dh: isize,
        dw: isize,
    },
    Window {
        x: Var,
        window: Window,
    },
    SpectralCrop {
        x: Var,
        crop: SpectralCrop,
    },
    SumPool {
        x: Var,
        factor: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    ExpI {
        x: Var,
    },
    AbsSq {
        x: Var,
    },
    RealPart {
        x: Var,
    },
    ToComplex {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    ChannelMix {
        x: Var,
        w: Var,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumLeading {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Stack {
        parts: Vec<Var>,
    },
    Index0 {
        x: Var,
        index: usize,
    },
    Median {
        x: Var,
        index: usize,
    },
    ShotNoise {
        mu: Var,
        eps: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Fft2 { .. } => "fft2",
            Op::Roll { .. } => "roll",
            Op::Window { .. } => "window",
            Op::SpectralCrop { .. } => "spectral_crop",
            Op::SumPool { .. } => "sum_pool",
            Op::MaxPool { .. } => "max_pool",
            Op::Upsample { .. } => "upsample",
            Op::Conv { .. } => "conv",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Unary { .. } => "unary",
            Op::ExpI { .. } => "exp_i",
            Op::AbsSq { .. } => "abs_sq",
            Op::RealPart { .. } => "real_part",
            Op::ToComplex { .. } => "to_complex",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::MulScalar { .. } => "mul_scalar",
            Op::ChannelMix { .. } => "channel_mix",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumLeading { .. } => "sum_leading",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Stack { .. } => "stack",
            Op::Index0 { .. } => "index0",
            Op::Median { .. } => "median",
            Op::ShotNoise { .. } => "shot_noise",
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Fft2 { x, .. }
        | Op::Roll { x, .. }
        | Op::Window { x, .. }
        | Op::SpectralCrop { x, .. }
        | Op::SumPool { x, .. }
        | Op::MaxPool { x, .. }
        | Op::Upsample { x, .. }
        | Op::Unary { x, .. }
        | Op::ExpI { x }
        | Op::AbsSq { x }
        | Op::RealPart { x }
        | Op::ToComplex { x }
        | Op::Sum { x }
        | Op::Mean { x }
        | Op::SumLeading { x }
        | Op::Reshape { x }
        | Op::Index0 { x, .. }
        | Op::Median { x, .. } => vec![*x],
        Op::ShotNoise { mu, .. } => vec![*mu],
        Op::Conv { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::InstanceNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::MulScalar { x, s } => vec![*x, *s],
        Op::ChannelMix { x, w } => vec![*x, *w],
        Op::AddChannelBias { x, b } => vec![*x, *b],
        Op::Concat { parts } | Op::Stack { parts } => parts.clone(),
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape and dtype when `v` was not reached.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| zeros_like(like))
    }
}

fn zeros_like(t: &Tensor) -> Tensor {
    match t.dtype() {
        DType::F64 => Tensor::zeros(t.shape()),
        DType::C128 => Tensor::complex_zeros(t.shape()),
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn zip_real(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let v = a.re().iter().zip(b.re()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_real(a.shape(), v).expect("same shape")
}

fn zip_complex(a: &Tensor, b: &Tensor, f: impl Fn(Complex64, Complex64) -> Complex64) -> Tensor {
    let a = a.to_complex();
    let b = b.to_complex();
    let v = a
        .complex()
        .expect("complex")
        .iter()
        .zip(b.complex().expect("complex"))
        .map(|(x, y)| f(*x, *y))
        .collect();
    Tensor::from_complex(a.shape(), v).expect("same shape")
}

fn add_into(acc: &mut Option<Tensor>, g: Tensor) {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            let sum = match (a.data(), g.data()) {
                (Data::Real(_), Data::Real(_)) => zip_real(a, &g, |x, y| x + y),
                _ => zip_complex(a, &g, |x, y| x + y),
            };
            *a = sum;
        }
    }
}

/// Cast an incoming gradient to the dtype of the node it flows into.
fn match_dtype(g: Tensor, like: &Tensor) -> Tensor {
    match (like.dtype(), g.dtype()) {
        (DType::F64, DType::C128) => g.real_part(),
        (DType::C128, DType::F64) => g.to_complex(),
        _ => g,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of recorded nodes of the given primitive kind (e.g. `"fft2"`).
    pub fn count_ops(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    /// Whether `target` was computed (transitively) from `source`.
    pub fn depends_on(&self, target: Var, source: Var) -> bool {
        if target.0 < source.0 {
            return false;
        }
        let mut reach = vec![false; target.0 + 1];
        reach[target.0] = true;
        for id in (source.0..=target.0).rev() {
            if !reach[id] {
                continue;
            }
            if id == source.0 {
                return true;
            }
            for input in op_inputs(&self.nodes[id].op) {
                if input.0 >= source.0 {
                    reach[input.0] = true;
                }
            }
        }
        false
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- primitives ------------------------------------------------------

    pub fn fft2(&mut self, x: Var, inverse: bool) -> Result<Var> {
        let y = kernels::fft2(self.value(x), inverse)?;
        Ok(self.push(y, Op::Fft2 { x, inverse }))
    }

    pub fn roll2(&mut self, x: Var, dh: isize, dw: isize) -> Result<Var> {
        let y = kernels::roll2(self.value(x), dh, dw)?;
        Ok(self.push(y, Op::Roll { x, dh, dw }))
    }

    pub fn fftshift2(&mut self, x: Var) -> Result<Var> {
        let (h, w) = self.value(x).hw()?;
        self.roll2(x, (h / 2) as isize, (w / 2) as isize)
    }

    pub fn ifftshift2(&mut self, x: Var) -> Result<Var> {
        let (h, w) = self.value(x).hw()?;
        self.roll2(x, -((h / 2) as isize), -((w / 2) as isize))
    }

    pub fn window(&mut self, x: Var, window: Window) -> Result<Var> {
        let y = window.apply(self.value(x))?;
        Ok(self.push(y, Op::Window { x, window }))
    }

    pub fn pad_crop(
        &mut self,
        x: Var,
        th: usize,
        tw: usize,
        mode: kernels::PadMode,
    ) -> Result<Var> {
        let window = kernels::pad_crop_window(self.value(x).hw()?, (th, tw), mode)?;
        self.window(x, window)
    }

    pub fn spectral_crop(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let crop = SpectralCrop::new(self.value(x).hw()?, (out_h, out_w))?;
        let y = crop.apply(self.value(x))?;
        Ok(self.push(y, Op::SpectralCrop { x, crop }))
    }

    pub fn sum_pool2(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = kernels::sum_pool2(self.value(x), factor)?;
        Ok(self.push(y, Op::SumPool { x, factor }))
    }

    pub fn max_pool2(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (y, argmax) = kernels::max_pool2(self.value(x), factor)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn upsample2(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = kernels::upsample_nearest2(self.value(x), factor)?;
        Ok(self.push(y, Op::Upsample { x, factor }))
    }

    pub fn pool_resample(&mut self, x: Var, factor: usize, mode: kernels::PoolMode) -> Result<Var> {
        match mode {
            kernels::PoolMode::SumPool => self.sum_pool2(x, factor),
            kernels::PoolMode::NearestUpsample => self.upsample2(x, factor),
        }
    }

    /// "Same"-padded cross-correlation, `x: [C, D, H, W]`, `w: [Co, Ci, KD, KH, KW]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Conv { x, w, b }))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, cache) =
            kernels::instance_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            y,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                cache,
            },
        ))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let xv = self.value(x);
        let y = match kind {
            Unary::Scale(s) => match xv.data() {
                Data::Real(v) => Tensor::from_real(xv.shape(), v.iter().map(|a| a * s).collect())?,
                Data::Complex(v) => {
                    Tensor::from_complex(xv.shape(), v.iter().map(|a| a * s).collect())?
                }
            },
            Unary::AddScalar(s) => xv.map_real(|a| a + s)?,
            Unary::Relu => xv.map_real(|a| if a >= 0.0 { a } else { 0.0 })?,
            Unary::LeakyRelu(slope) => xv.map_real(|a| if a >= 0.0 { a } else { slope * a })?,
            Unary::Square => xv.map_real(|a| a * a)?,
            Unary::Recip => {
                if xv.real()?.contains(&0.0) {
                    return Err(Error::Numerical("reciprocal of zero".into()));
                }
                xv.map_real(|a| 1.0 / a)?
            }
            Unary::Sqrt => {
                if xv.real()?.iter().any(|&a| a < 0.0) {
                    return Err(Error::Numerical("sqrt of a negative value".into()));
                }
                xv.map_real(f64::sqrt)?
            }
        };
        Ok(self.push(y, Op::Unary { x, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(s))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    /// `exp(i x)` of a real tensor.
    pub fn exp_i(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let y = Tensor::from_complex(
            xv.shape(),
            xv.real()?
                .iter()
                .map(|&p| Complex64::new(p.cos(), p.sin()))
                .collect(),
        )?;
        Ok(self.push(y, Op::ExpI { x }))
    }

    /// `|z|^2` of a complex tensor.
    pub fn abs_sq(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let y = Tensor::from_real(
            xv.shape(),
            xv.complex()?.iter().map(|z| z.norm_sqr()).collect(),
        )?;
        Ok(self.push(y, Op::AbsSq { x }))
    }

    pub fn real_part(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).real_part();
        Ok(self.push(y, Op::RealPart { x }))
    }

    pub fn to_complex(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).to_complex();
        Ok(self.push(y, Op::ToComplex { x }))
    }

    fn check_binary(&self, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "binary op on {:?} and {:?} (only scalar broadcasting via mul_scalar)",
                av.shape(),
                bv.shape()
            )));
        }
        if av.dtype() != bv.dtype() {
            return Err(Error::DType("binary op operands must share a dtype".into()));
        }
        Ok(())
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        fr: impl Fn(f64, f64) -> f64,
        fc: impl Fn(Complex64, Complex64) -> Complex64,
    ) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        match av.dtype() {
            DType::F64 => zip_real(av, bv, fr),
            DType::C128 => zip_complex(av, bv, fc),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_binary(a, b)?;
        let y = self.binary(a, b, |x, y| x + y, |x, y| x + y);
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_binary(a, b)?;
        let y = self.binary(a, b, |x, y| x - y, |x, y| x - y);
        Ok(self.push(y, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_binary(a, b)?;
        let y = self.binary(a, b, |x, y| x * y, |x, y| x * y);
        Ok(self.push(y, Op::Mul { a, b }))
    }

    /// Multiply every element of `x` by the single-element real tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape("mul_scalar expects a single-element scale"));
        }
        let k = sv.real()?[0];
        let xv = self.value(x);
        let y = match xv.data() {
            Data::Real(v) => Tensor::from_real(xv.shape(), v.iter().map(|a| a * k).collect())?,
            Data::Complex(v) => {
                Tensor::from_complex(xv.shape(), v.iter().map(|a| a * k).collect())?
            }
        };
        Ok(self.push(y, Op::MulScalar { x, s }))
    }

    /// Spectral channel mixing: `y[o] = sum_i w[o, i] * x[i]` elementwise,
    /// with `x: [Ci, H, W]` and `w: [Co, Ci, H, W]`, both complex.
    pub fn channel_mix(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2..] != xs[1..] {
            return Err(Error::shape(format!(
                "channel_mix of x {xs:?} with w {ws:?}"
            )));
        }
        let (ci, co, plane) = (xs[0], ws[0], xs[1] * xs[2]);
        let xd = xv.complex()?;
        let wd = wv.complex()?;
        let mut out = vec![Complex64::new(0.0, 0.0); co * plane];
        for o in 0..co {
            let y = &mut out[o * plane..(o + 1) * plane];
            for i in 0..ci {
                let wk = &wd[(o * ci + i) * plane..(o * ci + i + 1) * plane];
                let xk = &xd[i * plane..(i + 1) * plane];
                for ((yv, a), b) in y.iter_mut().zip(wk).zip(xk) {
                    *yv += a * b;
                }
            }
        }
        let y = Tensor::from_complex(&[co, xs[1], xs[2]], out)?;
        Ok(self.push(y, Op::ChannelMix { x, w }))
    }

    /// Adds `b[c]` to every element of channel `c` of `x: [C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.shape()[0];
        if bv.len() != c {
            return Err(Error::shape(format!(
                "bias of {} for {c} channels",
                bv.len()
            )));
        }
        let n = xv.len() / c;
        let bs = bv.real()?;
        let y: Vec<f64> = xv
            .real()?
            .iter()
            .enumerate()
            .map(|(k, v)| v + bs[k / n])
            .collect();
        let y = Tensor::from_real(xv.shape(), y)?;
        Ok(self.push(y, Op::AddChannelBias { x, b }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).real()?.iter().sum());
        Ok(self.push(y, Op::Sum { x }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let y = Tensor::scalar(xv.real()?.iter().sum::<f64>() / xv.len() as f64);
        Ok(self.push(y, Op::Mean { x }))
    }

    /// Sum over the leading axis: `[Z, ...] -> [...]`.
    pub fn sum_leading(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() < 2 {
            return Err(Error::shape("sum_leading needs rank >= 2"));
        }
        let inner = numel(&shape[1..]);
        fn fold<T: Copy + Default + std::ops::AddAssign>(v: &[T], inner: usize) -> Vec<T> {
            let mut out = vec![T::default(); inner];
            for chunk in v.chunks_exact(inner) {
                for (o, &v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            out
        }
        let data = match xv.data() {
            Data::Real(v) => Data::Real(fold(v, inner)),
            Data::Complex(v) => Data::Complex(fold(v, inner)),
        };
        let y = Tensor::new(&shape[1..], data)?;
        Ok(self.push(y, Op::SumLeading { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }))
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(
            *parts
                .first()
                .ok_or_else(|| Error::shape("concat of nothing"))?,
        );
        let tail = first.shape()[1..].to_vec();
        let dtype = first.dtype();
        let mut lead = 0;
        for p in parts {
            let v = self.value(*p);
            if v.shape()[1..] != tail[..] || v.dtype() != dtype {
                return Err(Error::shape(format!(
                    "concat of {:?} onto {:?}",
                    v.shape(),
                    tail
                )));
            }
            lead += v.shape()[0];
        }
        let mut shape = vec![lead];
        shape.extend(&tail);
        let data = match dtype {
            DType::F64 => Data::Real(
                parts
                    .iter()
                    .flat_map(|p| self.value(*p).re().to_vec())
                    .collect(),
            ),
            DType::C128 => Data::Complex(
                parts
                    .iter()
                    .flat_map(|p| self.value(*p).complex().expect("dtype checked").to_vec())
                    .collect(),
            ),
        };
        let y = Tensor::new(&shape, data)?;
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|p| self.value(*p).clone()).collect();
        let y = Tensor::stack(&values)?;
        Ok(self.push(
            y,
            Op::Stack {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Select one slice of the leading axis (dropping that axis).
    pub fn index0(&mut self, x: Var, index: usize) -> Result<Var> {
        let y = self.value(x).index0(index)?;
        Ok(self.push(y, Op::Index0 { x, index }))
    }

    /// Lower median of all elements; the gradient flows to the selected element.
    pub fn median(&mut self, x: Var) -> Result<Var> {
        let (m, index) = kernels::lower_median(self.value(x).real()?);
        Ok(self.push(Tensor::scalar(m), Op::Median { x, index }))
    }

    /// Rectified Gaussian shot noise `max(mu + sqrt(mu) eps, 0)` with the
    /// standard normal draws `eps` supplied by the caller.
    ///
    /// Round-off negatives no larger than `1e-9 * max|mu|` are read as zero.
    pub fn shot_noise(&mut self, mu: Var, eps: Vec<f64>) -> Result<Var> {
        let mv = self.value(mu);
        if eps.len() != mv.len() {
            return Err(Error::shape("noise draws must match the image"));
        }
        let m = mv.real()?;
        let tol = 1e-9 * m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if let Some(bad) = m.iter().find(|&&v| v < -tol) {
            return Err(Error::invalid(format!(
                "negative expected photon count {bad}"
            )));
        }
        let y: Vec<f64> = m
            .iter()
            .zip(&eps)
            .map(|(&u, &e)| {
                let u = u.max(0.0);
                (u + u.sqrt() * e).max(0.0)
            })
            .collect();
        let y = Tensor::from_real(mv.shape(), y)?;
        Ok(self.push(y, Op::ShotNoise { mu, eps }))
    }

    // ---- backward --------------------------------------------------------

    /// Backpropagate from a real scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if lv.is_complex() {
            return Err(Error::Autodiff("loss must be real".into()));
        }
        self.backward_from(loss, Tensor::from_real(lv.shape(), vec![1.0])?)
    }

    /// Vector-Jacobian product: backpropagate the upstream gradient `seed`
    /// attached to `output`. Allowed once per recording.
    pub fn backward_from(&mut self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Autodiff("backward already ran on this tape".into()));
        }
        let ov = self.value(output);
        if seed.shape() != ov.shape() {
            return Err(Error::shape(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                ov.shape()
            )));
        }
        let seed = match_dtype(seed, ov);
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = self.node_backward(id, &g)?;
            grads[id] = Some(g);
            for (input, gi) in contributions {
                if self.nodes[input.0].requires_grad {
                    let gi = match_dtype(gi, &self.nodes[input.0].value);
                    add_into(&mut grads[input.0], gi);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf => vec![],
            // unitary transform: adjoint is the opposite-direction transform
            Op::Fft2 { x, inverse } => vec![(*x, kernels::fft2(g, !inverse)?)],
            Op::Roll { x, dh, dw } => vec![(*x, kernels::roll2(g, -dh, -dw)?)],
            Op::Window { x, window } => vec![(*x, window.adjoint(g)?)],
            Op::SpectralCrop { x, crop } => vec![(*x, crop.adjoint(&g.to_complex())?)],
            Op::SumPool { x, factor } => vec![(*x, kernels::upsample_nearest2(g, *factor)?)],
            Op::Upsample { x, factor } => vec![(*x, kernels::sum_pool2(g, *factor)?)],
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (gv, &src) in g.re().iter().zip(argmax) {
                    gx[src] += gv;
                }
                vec![(*x, Tensor::from_real(self.shape(*x), gx)?)]
            }
            Op::Conv { x, w, b } => {
                let (gx, gw, gb) = kernels::conv_backward(self.value(*x), self.value(*w), g)?;
                let mut v = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    v.push((*b, gb.reshape(self.shape(*b))?));
                }
                v
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (gx, gg, gb) = kernels::instance_norm_backward(cache, self.value(*gamma), g)?;
                vec![
                    (*x, gx),
                    (*gamma, gg.reshape(self.shape(*gamma))?),
                    (*beta, gb.reshape(self.shape(*beta))?),
                ]
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x);
                let gx = match *kind {
                    Unary::Scale(s) => match g.data() {
                        Data::Real(v) => {
                            Tensor::from_real(g.shape(), v.iter().map(|a| a * s).collect())?
                        }
                        Data::Complex(v) => {
                            Tensor::from_complex(g.shape(), v.iter().map(|a| a * s).collect())?
                        }
                    },
                    Unary::AddScalar(_) => g.clone(),
                    // derivative taken as 1 at exactly zero
                    Unary::Relu => zip_real(g, xv, |gv, a| if a >= 0.0 { gv } else { 0.0 }),
                    Unary::LeakyRelu(slope) => {
                        zip_real(g, xv, |gv, a| if a >= 0.0 { gv } else { slope * gv })
                    }
                    Unary::Square => zip_real(g, xv, |gv, a| 2.0 * a * gv),
                    Unary::Recip => zip_real(g, y, |gv, r| -gv * r * r),
                    Unary::Sqrt => zip_real(g, y, |gv, r| gv * 0.5 / r),
                };
                vec![(*x, gx)]
            }
            Op::ExpI { x } => {
                // dL/dphi = Re(conj(g) * i y)
                let v = g
                    .complex()?
                    .iter()
                    .zip(y.complex()?)
                    .map(|(gv, yv)| (gv.conj() * Complex64::i() * yv).re)
                    .collect();
                vec![(*x, Tensor::from_real(g.shape(), v)?)]
            }
            Op::AbsSq { x } => {
                let v = g
                    .re()
                    .iter()
                    .zip(self.value(*x).complex()?)
                    .map(|(gv, z)| z * (2.0 * gv))
                    .collect();
                vec![(*x, Tensor::from_complex(g.shape(), v)?)]
            }
            Op::RealPart { x } => vec![(*x, g.to_complex())],
            Op::ToComplex { x } => vec![(*x, g.real_part())],
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub { a, b } => {
                let neg = match g.data() {
                    Data::Real(v) => Tensor::from_real(g.shape(), v.iter().map(|a| -a).collect())?,
                    Data::Complex(v) => {
                        Tensor::from_complex(g.shape(), v.iter().map(|a| -a).collect())?
                    }
                };
                vec![(*a, g.clone()), (*b, neg)]
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                match av.dtype() {
                    DType::F64 => vec![
                        (*a, zip_real(g, bv, |x, y| x * y)),
                        (*b, zip_real(g, av, |x, y| x * y)),
                    ],
                    DType::C128 => vec![
                        (*a, zip_complex(g, bv, |x, y| x * y.conj())),
                        (*b, zip_complex(g, av, |x, y| x * y.conj())),
                    ],
                }
            }
            Op::MulScalar { x, s } => {
                let k = self.value(*s).re()[0];
                let xv = self.value(*x);
                let (gx, gs) = match (g.data(), xv.data()) {
                    (Data::Real(gd), Data::Real(xd)) => (
                        Tensor::from_real(g.shape(), gd.iter().map(|a| a * k).collect())?,
                        gd.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>(),
                    ),
                    _ => {
                        let gc = g.to_complex();
                        let xc = xv.to_complex();
                        let gd = gc.complex()?;
                        (
                            Tensor::from_complex(g.shape(), gd.iter().map(|a| a * k).collect())?,
                            gd.iter()
                                .zip(xc.complex()?)
                                .map(|(a, b)| (a.conj() * b).re)
                                .sum::<f64>(),
                        )
                    }
                };
                vec![(*x, gx), (*s, Tensor::from_real(self.shape(*s), vec![gs])?)]
            }
            Op::ChannelMix { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (ci, co) = (xv.shape()[0], wv.shape()[0]);
                let plane = xv.len() / ci;
                let (xd, wd, gd) = (xv.complex()?, wv.complex()?, g.complex()?);
                let mut gx = vec![Complex64::new(0.0, 0.0); xd.len()];
                let mut gw = vec![Complex64::new(0.0, 0.0); wd.len()];
                for o in 0..co {
                    let go = &gd[o * plane..(o + 1) * plane];
                    for i in 0..ci {
                        let base = (o * ci + i) * plane;
                        for k in 0..plane {
                            gx[i * plane + k] += go[k] * wd[base + k].conj();
                            gw[base + k] = go[k] * xd[i * plane + k].conj();
                        }
                    }
                }
                vec![
                    (*x, Tensor::from_complex(xv.shape(), gx)?),
                    (*w, Tensor::from_complex(wv.shape(), gw)?),
                ]
            }
            Op::AddChannelBias { x, b } => {
                let c = self.value(*b).len();
                let n = g.len() / c;
                let gb: Vec<f64> = g.re().chunks_exact(n).map(|ch| ch.iter().sum()).collect();
                vec![
                    (*x, g.clone()),
                    (*b, Tensor::from_real(self.shape(*b), gb)?),
                ]
            }
            Op::Sum { x } => vec![(*x, Tensor::full(self.shape(*x), g.re()[0]))],
            Op::Mean { x } => {
                let n = self.value(*x).len() as f64;
                vec![(*x, Tensor::full(self.shape(*x), g.re()[0] / n))]
            }
            Op::SumLeading { x } => {
                let lead = self.shape(*x)[0];
                let parts = vec![g.clone(); lead];
                vec![(*x, Tensor::stack(&parts)?)]
            }
            Op::Reshape { x } => vec![(*x, g.reshape(self.shape(*x))?)],
            Op::Concat { parts } => {
                let mut at = 0;
                let inner = g.len() / g.shape()[0];
                let mut v = Vec::with_capacity(parts.len());
                for p in parts {
                    let shape = self.shape(*p).to_vec();
                    let n = shape[0] * inner;
                    let data = match g.data() {
                        Data::Real(d) => Data::Real(d[at..at + n].to_vec()),
                        Data::Complex(d) => Data::Complex(d[at..at + n].to_vec()),
                    };
                    v.push((*p, Tensor::new(&shape, data)?));
                    at += n;
                }
                v
            }
            Op::Stack { parts } => parts
                .iter()
                .enumerate()
                .map(|(k, p)| Ok((*p, g.index0(k)?)))
                .collect::<Result<Vec<_>>>()?,
            Op::Index0 { x, index } => {
                let xv = self.value(*x);
                let mut gx = zeros_like(xv);
                let n = g.len();
                match (gx.data(), g.data()) {
                    (Data::Real(_), Data::Real(gd)) => {
                        gx.real_mut()?[index * n..(index + 1) * n].copy_from_slice(gd)
                    }
                    _ => {
                        let gc = g.to_complex();
                        gx.complex_mut()?[index * n..(index + 1) * n].copy_from_slice(gc.complex()?)
                    }
                }
                vec![(*x, gx)]
            }
            Op::Median { x, index } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                gx.real_mut()?[*index] = g.re()[0];
                vec![(*x, gx)]
            }
            Op::ShotNoise { mu, eps } => {
                let m = self.value(*mu).re();
                let v = g
                    .re()
                    .iter()
                    .zip(m)
                    .zip(eps)
                    .zip(y.re())
                    .map(|(((gv, &u), &e), &c)| {
                        if c > 0.0 {
                            gv * (1.0 + e / (2.0 * (u.max(0.0) + 1e-12).sqrt()))
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(*mu, Tensor::from_real(g.shape(), v)?)]
            }
        };
        Ok(out)
    }
}
