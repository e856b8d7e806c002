//! Forward kernels and their adjoints, free of any gradient bookkeeping.
//!
//! Everything that acts on "the last two axes" treats the leading axes as a
//! batch. FFTs use orthonormal scaling in both directions.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, Data, Tensor};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// In-place orthonormal 2-D DFT over a batch of `h x w` row-major planes.
pub fn fft2_inplace(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let plane = h * w;
    let row_fft = plan(w, inverse);
    let col_fft = plan(h, inverse);
    let scale = 1.0 / (plane as f64).sqrt();
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    let mut scratch = vec![
        Complex64::new(0.0, 0.0);
        row_fft
            .get_inplace_scratch_len()
            .max(col_fft.get_inplace_scratch_len())
    ];
    for p in buf.chunks_exact_mut(plane) {
        for row in p.chunks_exact_mut(w) {
            row_fft.process_with_scratch(row, &mut scratch);
        }
        for j in 0..w {
            for i in 0..h {
                col[i] = p[i * w + j];
            }
            col_fft.process_with_scratch(&mut col, &mut scratch);
            for i in 0..h {
                p[i * w + j] = col[i] * scale;
            }
        }
    }
}

/// Orthonormal 2-D DFT over the last two axes. Real input is promoted.
pub fn fft2(t: &Tensor, inverse: bool) -> Result<Tensor> {
    let (h, w) = t.hw()?;
    let mut out = t.to_complex();
    fft2_inplace(out.complex_mut()?, h, w, inverse);
    Ok(out)
}

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Circular shift of the last two axes: `out[i, j] = in[i - dh, j - dw]`.
pub fn roll2(t: &Tensor, dh: isize, dw: isize) -> Result<Tensor> {
    let (h, w) = t.hw()?;
    let index: Vec<usize> = (0..h * w)
        .map(|k| {
            let (i, j) = ((k / w) as isize, (k % w) as isize);
            wrap(i - dh, h) * w + wrap(j - dw, w)
        })
        .collect();
    Ok(gather_planes(t, h * w, h * w, &index, t.shape().to_vec()))
}

/// Moves the zero frequency from index 0 to the centre `(h/2, w/2)`.
pub fn fftshift2(t: &Tensor) -> Result<Tensor> {
    let (h, w) = t.hw()?;
    roll2(t, (h / 2) as isize, (w / 2) as isize)
}

/// Inverse of [`fftshift2`], also for odd extents.
pub fn ifftshift2(t: &Tensor) -> Result<Tensor> {
    let (h, w) = t.hw()?;
    roll2(t, -((h / 2) as isize), -((w / 2) as isize))
}

/// Per-plane gather: `out_plane[k] = in_plane[index[k]]`, `usize::MAX` yields zero.
fn gather_planes(
    t: &Tensor,
    in_plane: usize,
    out_plane: usize,
    index: &[usize],
    out_shape: Vec<usize>,
) -> Tensor {
    let batches = t.len() / in_plane;
    let data = match t.data() {
        Data::Real(v) => {
            let mut out = vec![0.0; batches * out_plane];
            for b in 0..batches {
                let src = &v[b * in_plane..(b + 1) * in_plane];
                let dst = &mut out[b * out_plane..(b + 1) * out_plane];
                for (d, &k) in dst.iter_mut().zip(index) {
                    if k != usize::MAX {
                        *d = src[k];
                    }
                }
            }
            Data::Real(out)
        }
        Data::Complex(v) => {
            let mut out = vec![Complex64::new(0.0, 0.0); batches * out_plane];
            for b in 0..batches {
                let src = &v[b * in_plane..(b + 1) * in_plane];
                let dst = &mut out[b * out_plane..(b + 1) * out_plane];
                for (d, &k) in dst.iter_mut().zip(index) {
                    if k != usize::MAX {
                        *d = src[k];
                    }
                }
            }
            Data::Complex(out)
        }
    };
    Tensor::new(&out_shape, data).expect("gather shape is consistent")
}

/// Adjoint of [`gather_planes`]: scatter-add back into planes of `in_plane` elements.
fn scatter_planes(
    g: &Tensor,
    in_plane: usize,
    out_plane: usize,
    index: &[usize],
    in_shape: Vec<usize>,
) -> Tensor {
    let batches = g.len() / out_plane;
    let data = match g.data() {
        Data::Real(v) => {
            let mut out = vec![0.0; batches * in_plane];
            for b in 0..batches {
                let src = &v[b * out_plane..(b + 1) * out_plane];
                let dst = &mut out[b * in_plane..(b + 1) * in_plane];
                for (s, &k) in src.iter().zip(index) {
                    if k != usize::MAX {
                        dst[k] += s;
                    }
                }
            }
            Data::Real(out)
        }
        Data::Complex(v) => {
            let mut out = vec![Complex64::new(0.0, 0.0); batches * in_plane];
            for b in 0..batches {
                let src = &v[b * out_plane..(b + 1) * out_plane];
                let dst = &mut out[b * in_plane..(b + 1) * in_plane];
                for (s, &k) in src.iter().zip(index) {
                    if k != usize::MAX {
                        dst[k] += s;
                    }
                }
            }
            Data::Complex(out)
        }
    };
    Tensor::new(&in_shape, data).expect("scatter shape is consistent")
}

fn with_hw(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let r = s.len();
    s[r - 2] = h;
    s[r - 1] = w;
    s
}

/// Index map of a rectangular window: `out[i, j] = in[i + off_h, j + off_w]`,
/// zero where the source falls outside the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub offset: (isize, isize),
}

impl Window {
    fn index(&self) -> Vec<usize> {
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        (0..oh * ow)
            .map(|k| {
                let i = (k / ow) as isize + self.offset.0;
                let j = (k % ow) as isize + self.offset.1;
                if i < 0 || j < 0 || i >= ih as isize || j >= iw as isize {
                    usize::MAX
                } else {
                    i as usize * iw + j as usize
                }
            })
            .collect()
    }

    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let hw = t.hw()?;
        if hw != self.in_hw {
            return Err(Error::shape(format!(
                "window expects {:?}, got {hw:?}",
                self.in_hw
            )));
        }
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        Ok(gather_planes(
            t,
            ih * iw,
            oh * ow,
            &self.index(),
            with_hw(t.shape(), oh, ow),
        ))
    }

    pub fn adjoint(&self, g: &Tensor) -> Result<Tensor> {
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        Ok(scatter_planes(
            g,
            ih * iw,
            oh * ow,
            &self.index(),
            with_hw(g.shape(), ih, iw),
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    ZeroPad,
    CenterCrop,
}

/// Centred zero-pad or centred crop window for the last two axes. The offset
/// is `floor((big - small) / 2)` either way, so a pad followed by the matching
/// crop is the identity.
pub fn pad_crop_window(
    in_hw: (usize, usize),
    target: (usize, usize),
    mode: PadMode,
) -> Result<Window> {
    let (h, w) = in_hw;
    let (th, tw) = target;
    let offset = match mode {
        PadMode::ZeroPad => {
            if th < h || tw < w {
                return Err(Error::shape(format!(
                    "cannot pad {in_hw:?} down to {target:?}"
                )));
            }
            (-(((th - h) / 2) as isize), -(((tw - w) / 2) as isize))
        }
        PadMode::CenterCrop => {
            if th > h || tw > w {
                return Err(Error::shape(format!(
                    "cannot crop {in_hw:?} up to {target:?}"
                )));
            }
            (((h - th) / 2) as isize, ((w - tw) / 2) as isize)
        }
    };
    if th == 0 || tw == 0 {
        return Err(Error::shape("empty target extent"));
    }
    Ok(Window {
        in_hw,
        out_hw: target,
        offset,
    })
}

pub fn pad_crop_spatial(t: &Tensor, th: usize, tw: usize, mode: PadMode) -> Result<Tensor> {
    pad_crop_window(t.hw()?, (th, tw), mode)?.apply(t)
}

/// Low-pass crop of a DFT-ordered spectrum. Output bin `a` keeps the signed
/// frequency `((a + o/2) mod o) - o/2`, which is the centred crop of the
/// fftshifted spectrum, and is rescaled by `sqrt(o_h o_w / (h w))` so the
/// inverse transform is the mean-preserving downsampled signal.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCrop {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

impl SpectralCrop {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Result<Self> {
        if out_hw.0 > in_hw.0 || out_hw.1 > in_hw.1 || out_hw.0 == 0 || out_hw.1 == 0 {
            return Err(Error::shape(format!(
                "spectral crop {in_hw:?} -> {out_hw:?} must shrink"
            )));
        }
        Ok(SpectralCrop { in_hw, out_hw })
    }

    pub fn scale(&self) -> f64 {
        ((self.out_hw.0 * self.out_hw.1) as f64 / (self.in_hw.0 * self.in_hw.1) as f64).sqrt()
    }

    fn index(&self) -> Vec<usize> {
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let src = |a: usize, o: usize, n: usize| {
            let f = ((a + o / 2) % o) as isize - (o / 2) as isize;
            wrap(f, n)
        };
        (0..oh * ow)
            .map(|k| src(k / ow, oh, ih) * iw + src(k % ow, ow, iw))
            .collect()
    }

    pub fn apply(&self, spectrum: &Tensor) -> Result<Tensor> {
        let hw = spectrum.hw()?;
        if hw != self.in_hw {
            return Err(Error::shape(format!(
                "spectral crop expects {:?}, got {hw:?}",
                self.in_hw
            )));
        }
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let mut out = gather_planes(
            &spectrum.to_complex(),
            ih * iw,
            oh * ow,
            &self.index(),
            with_hw(spectrum.shape(), oh, ow),
        );
        let s = self.scale();
        out.complex_mut()?.iter_mut().for_each(|z| *z *= s);
        Ok(out)
    }

    pub fn adjoint(&self, g: &Tensor) -> Result<Tensor> {
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let mut out = scatter_planes(
            g,
            ih * iw,
            oh * ow,
            &self.index(),
            with_hw(g.shape(), ih, iw),
        );
        let s = self.scale();
        out.complex_mut()?.iter_mut().for_each(|z| *z *= s);
        Ok(out)
    }
}

pub fn spectral_crop(spectrum: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    SpectralCrop::new(spectrum.hw()?, (out_h, out_w))?.apply(spectrum)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    SumPool,
    NearestUpsample,
}

fn check_divisible(t: &Tensor, factor: usize) -> Result<(usize, usize)> {
    let (h, w) = t.hw()?;
    if factor == 0 {
        return Err(Error::invalid("pool factor must be positive"));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "extent {h}x{w} not divisible by {factor}"
        )));
    }
    Ok((h, w))
}

/// Source index of each input element's pool block, for sum-pool and its adjoint.
fn pool_index(h: usize, w: usize, factor: usize) -> Vec<usize> {
    let ow = w / factor;
    (0..h * w)
        .map(|k| (k / w / factor) * ow + (k % w) / factor)
        .collect()
}

pub fn sum_pool2(t: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w) = check_divisible(t, factor)?;
    let (oh, ow) = (h / factor, w / factor);
    // summing the input plane into its block is the adjoint of block replication
    Ok(scatter_planes(
        t,
        oh * ow,
        h * w,
        &pool_index(h, w, factor),
        with_hw(t.shape(), oh, ow),
    ))
}

pub fn upsample_nearest2(t: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w) = t.hw()?;
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be positive"));
    }
    let (oh, ow) = (h * factor, w * factor);
    Ok(gather_planes(
        t,
        h * w,
        oh * ow,
        &pool_index(oh, ow, factor),
        with_hw(t.shape(), oh, ow),
    ))
}

pub fn pool_resample(t: &Tensor, factor: usize, mode: PoolMode) -> Result<Tensor> {
    match mode {
        PoolMode::SumPool => sum_pool2(t, factor),
        PoolMode::NearestUpsample => upsample_nearest2(t, factor),
    }
}

/// Max pool over `factor x factor` blocks; also returns the flat argmax of each output.
pub fn max_pool2(t: &Tensor, factor: usize) -> Result<(Tensor, Vec<usize>)> {
    let (h, w) = check_divisible(t, factor)?;
    let (oh, ow) = (h / factor, w / factor);
    let x = t.real()?;
    let batches = t.len() / (h * w);
    let mut out = vec![f64::NEG_INFINITY; batches * oh * ow];
    let mut arg = vec![0usize; batches * oh * ow];
    for b in 0..batches {
        for i in 0..h {
            for j in 0..w {
                let src = b * h * w + i * w + j;
                let dst = b * oh * ow + (i / factor) * ow + j / factor;
                if x[src] > out[dst] {
                    out[dst] = x[src];
                    arg[dst] = src;
                }
            }
        }
    }
    Ok((Tensor::from_real(&with_hw(t.shape(), oh, ow), out)?, arg))
}

/// Geometry of a "same"-padded cross-correlation over `[C, D, H, W]` inputs
/// with `[C_out, C_in, KD, KH, KW]` kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub dhw: [usize; 3],
    pub kernel: [usize; 3],
}

impl ConvGeometry {
    pub fn infer(x: &[usize], w: &[usize]) -> Result<Self> {
        if x.len() != 4 || w.len() != 5 {
            return Err(Error::shape(format!(
                "conv expects x [C,D,H,W] and w [Co,Ci,KD,KH,KW], got {x:?} and {w:?}"
            )));
        }
        if w[1] != x[0] {
            return Err(Error::shape(format!(
                "kernel expects {} input channels, input has {}",
                w[1], x[0]
            )));
        }
        let kernel = [w[2], w[3], w[4]];
        if kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::shape(format!(
                "kernel extents {kernel:?} must be odd"
            )));
        }
        Ok(ConvGeometry {
            c_in: x[0],
            c_out: w[0],
            dhw: [x[1], x[2], x[3]],
            kernel,
        })
    }

    /// For kernel tap `k` on an axis of length `n`, the output range whose
    /// source `o + k - centre` stays inside `[0, n)`.
    fn valid(n: usize, k: usize, kn: usize) -> (usize, usize, isize) {
        let shift = k as isize - (kn / 2) as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (n as isize - shift).min(n as isize).max(0) as usize;
        (lo, hi.max(lo), shift)
    }
}

/// Column range and source shift of every `kw` tap along the last axis.
fn column_taps(g: &ConvGeometry) -> Vec<(usize, usize, isize)> {
    (0..g.kernel[2])
        .map(|kw| ConvGeometry::valid(g.dhw[2], kw, g.kernel[2]))
        .collect()
}

/// Runs `f(out_row, src_row, tap_base)` for every output row of a `[D, H, W]`
/// block and every `(kd, kh)` tap whose source row lies inside the block.
/// Offsets are element indices of row starts; `tap_base` indexes `(kd, kh, 0)`.
fn for_each_row_pair(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let [d, h, w] = g.dhw;
    let [kdn, khn, kwn] = g.kernel;
    for od in 0..d {
        for oh in 0..h {
            let out_row = (od * h + oh) * w;
            for kd in 0..kdn {
                let id = od as isize + kd as isize - (kdn / 2) as isize;
                if id < 0 || id >= d as isize {
                    continue;
                }
                for kh in 0..khn {
                    let ih = oh as isize + kh as isize - (khn / 2) as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src_row = (id as usize * h + ih as usize) * w;
                    f(out_row, src_row, (kd * khn + kh) * kwn);
                }
            }
        }
    }
}

pub fn conv_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let g = ConvGeometry::infer(x.shape(), w.shape())?;
    let xs = x.real()?;
    let ws = w.real()?;
    let block = numel(&g.dhw);
    let taps = numel(&g.kernel);
    let width = g.dhw[2];
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(Error::shape(format!(
                "bias has {} entries for {} channels",
                b.len(),
                g.c_out
            )));
        }
    }
    let cols = column_taps(&g);
    let mut out = vec![0.0; g.c_out * block];
    for o in 0..g.c_out {
        let y = &mut out[o * block..(o + 1) * block];
        if let Some(b) = bias {
            y.iter_mut().for_each(|v| *v = b.re()[o]);
        }
        for i in 0..g.c_in {
            let xi = &xs[i * block..(i + 1) * block];
            let wk = &ws[(o * g.c_in + i) * taps..(o * g.c_in + i + 1) * taps];
            // one output row at a time keeps it resident across all taps
            for_each_row_pair(&g, |out_row, src_row, tap| {
                let yrow = &mut y[out_row..out_row + width];
                let xrow = &xi[src_row..src_row + width];
                for (kw, &(w0, w1, sw)) in cols.iter().enumerate() {
                    let wv = wk[tap + kw];
                    if wv == 0.0 || w1 <= w0 {
                        continue;
                    }
                    let src = &xrow[(w0 as isize + sw) as usize..(w1 as isize + sw) as usize];
                    for (yv, xv) in yrow[w0..w1].iter_mut().zip(src) {
                        *yv += wv * xv;
                    }
                }
            });
        }
    }
    let shape = [g.c_out, g.dhw[0], g.dhw[1], g.dhw[2]];
    Tensor::from_real(&shape, out)
}

/// Gradients of [`conv_forward`] with respect to input, kernel and bias.
pub fn conv_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::infer(x.shape(), w.shape())?;
    let xs = x.real()?;
    let ws = w.real()?;
    let gys = gy.real()?;
    let block = numel(&g.dhw);
    let taps = numel(&g.kernel);
    let width = g.dhw[2];
    let cols = column_taps(&g);
    let mut gx = vec![0.0; g.c_in * block];
    let mut gw = vec![0.0; ws.len()];
    let mut gb = vec![0.0; g.c_out];
    for o in 0..g.c_out {
        let gyo = &gys[o * block..(o + 1) * block];
        gb[o] = gyo.iter().sum();
        for i in 0..g.c_in {
            let xi = &xs[i * block..(i + 1) * block];
            let gxi = &mut gx[i * block..(i + 1) * block];
            let base = (o * g.c_in + i) * taps;
            let (wk, gwk) = (&ws[base..base + taps], &mut gw[base..base + taps]);
            for_each_row_pair(&g, |out_row, src_row, tap| {
                let grow = &gyo[out_row..out_row + width];
                let xrow = &xi[src_row..src_row + width];
                let gxrow = &mut gxi[src_row..src_row + width];
                for (kw, &(w0, w1, sw)) in cols.iter().enumerate() {
                    if w1 <= w0 {
                        continue;
                    }
                    let (s0, s1) = ((w0 as isize + sw) as usize, (w1 as isize + sw) as usize);
                    let gseg = &grow[w0..w1];
                    gwk[tap + kw] += gseg.iter().zip(&xrow[s0..s1]).map(|(a, b)| a * b).sum::<f64>();
                    let wv = wk[tap + kw];
                    for (gxv, gv) in gxrow[s0..s1].iter_mut().zip(gseg) {
                        *gxv += wv * gv;
                    }
                }
            });
        }
    }
    Ok((
        Tensor::from_real(x.shape(), gx)?,
        Tensor::from_real(w.shape(), gw)?,
        Tensor::from_real(&[g.c_out], gb)?,
    ))
}

/// Cached forward quantities of an instance norm, needed by the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Per-channel normalisation over all non-leading axes followed by a
/// per-channel affine map.
pub fn instance_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let c = x.shape()[0];
    let n = x.len() / c;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "norm affine params must have {c} entries"
        )));
    }
    let xs = x.real()?;
    let mut out = vec![0.0; xs.len()];
    let mut normalized = vec![0.0; xs.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let seg = &xs[ch * n..(ch + 1) * n];
        let mean = seg.iter().sum::<f64>() / n as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[ch] = is;
        let (gm, bt) = (gamma.re()[ch], beta.re()[ch]);
        for k in 0..n {
            let z = (seg[k] - mean) * is;
            normalized[ch * n + k] = z;
            out[ch * n + k] = gm * z + bt;
        }
    }
    Ok((
        Tensor::from_real(x.shape(), out)?,
        NormCache {
            normalized,
            inv_std,
        },
    ))
}

pub fn instance_norm_backward(
    cache: &NormCache,
    gamma: &Tensor,
    gy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let c = gamma.len();
    let gys = gy.real()?;
    let n = gys.len() / c;
    let mut gx = vec![0.0; gys.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ch in 0..c {
        let g = &gys[ch * n..(ch + 1) * n];
        let z = &cache.normalized[ch * n..(ch + 1) * n];
        let sum_g: f64 = g.iter().sum();
        let sum_gz: f64 = g.iter().zip(z).map(|(a, b)| a * b).sum();
        gb[ch] = sum_g;
        gg[ch] = sum_gz;
        let k = gamma.re()[ch] * cache.inv_std[ch];
        let (mg, mgz) = (sum_g / n as f64, sum_gz / n as f64);
        for i in 0..n {
            gx[ch * n + i] = k * (g[i] - mg - z[i] * mgz);
        }
    }
    Ok((
        Tensor::from_real(gy.shape(), gx)?,
        Tensor::from_real(&[c], gg)?,
        Tensor::from_real(&[c], gb)?,
    ))
}

/// Lower median (deterministic for even counts) and the flat index it came from.
pub fn lower_median(values: &[f64]) -> (f64, usize) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let k = idx[(values.len() - 1) / 2];
    (values[k], k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fft2_of_ones_is_scaled_dc() {
        let t = fft2(&Tensor::ones(&[2, 2]), false).unwrap();
        let z = t.complex().unwrap();
        assert!((z[0].re - 2.0).abs() < 1e-15);
        assert!(z[1..].iter().all(|v| v.norm() < 1e-15));
    }

    #[test]
    fn fft2_of_impulse_is_flat() {
        let mut d = Tensor::zeros(&[2, 2]);
        d.real_mut().unwrap()[0] = 1.0;
        let t = fft2(&d, false).unwrap();
        assert!(t
            .complex()
            .unwrap()
            .iter()
            .all(|v| (v.re - 0.5).abs() < 1e-15 && v.im.abs() < 1e-15));
    }

    #[test]
    fn fft2_round_trip_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 8, 8], 1.0, &mut rng);
        let f = fft2(&x, false).unwrap();
        assert!((f.norm() - x.norm()).abs() < 1e-10 * x.norm());
        let back = fft2(&f, true).unwrap();
        assert!(back.max_abs_diff(&x.to_complex()).unwrap() < 1e-12);
    }

    #[test]
    fn fft2_handles_non_power_of_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let back = fft2(&fft2(&x, false).unwrap(), true).unwrap();
        assert!(back.max_abs_diff(&x.to_complex()).unwrap() < 1e-12);
    }

    #[test]
    fn shift_pairs_are_inverse_for_odd_sizes() {
        let x = Tensor::from_real(&[3, 5], (0..15).map(f64::from).collect()).unwrap();
        let y = ifftshift2(&fftshift2(&x).unwrap()).unwrap();
        assert_eq!(x, y);
        let s = fftshift2(&x).unwrap();
        // zero frequency lands at (h/2, w/2)
        assert_eq!(s.re()[5 + 2], 0.0);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 5, 6], 1.0, &mut rng);
        let p = pad_crop_spatial(&x, 10, 12, PadMode::ZeroPad).unwrap();
        assert!((p.sum() - x.sum()).abs() < 1e-12);
        let c = pad_crop_spatial(&p, 5, 6, PadMode::CenterCrop).unwrap();
        assert_eq!(c, x);
        assert!(pad_crop_spatial(&x, 6, 6, PadMode::CenterCrop).is_err());
        assert!(pad_crop_spatial(&x, 4, 6, PadMode::ZeroPad).is_err());
    }

    #[test]
    fn pad_ones_sum() {
        let p = pad_crop_spatial(&Tensor::ones(&[2, 2]), 4, 4, PadMode::ZeroPad).unwrap();
        assert_eq!(p.sum(), 4.0);
    }

    #[test]
    fn sum_pool_blocks() {
        let t = Tensor::from_real(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(sum_pool2(&t, 2).unwrap().re(), &[10.0]);
        assert!(sum_pool2(&Tensor::ones(&[3, 4]), 2).is_err());
    }

    #[test]
    fn nearest_upsample_replicates() {
        let t = Tensor::from_real(&[1, 1], vec![7.0]).unwrap();
        assert_eq!(upsample_nearest2(&t, 2).unwrap().re(), &[7.0; 4]);
        let t = Tensor::from_real(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(
            upsample_nearest2(&t, 2).unwrap().re(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]
        );
    }

    #[test]
    fn max_pool_picks_block_max() {
        let t = Tensor::from_real(&[2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 6.0]).unwrap();
        let (m, arg) = max_pool2(&t, 2).unwrap();
        assert_eq!(m.re(), &[5.0, 6.0]);
        assert_eq!(arg, vec![1, 7]);
    }

    #[test]
    fn spectral_crop_identity_when_sizes_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[6, 6], 1.0, &mut rng);
        let f = fft2(&x, false).unwrap();
        assert_eq!(spectral_crop(&f, 6, 6).unwrap(), f);
        assert!(spectral_crop(&f, 7, 6).is_err());
    }

    #[test]
    fn spectral_crop_preserves_constant() {
        let f = fft2(&Tensor::full(&[8, 8], 3.5), false).unwrap();
        let back = fft2(&spectral_crop(&f, 4, 4).unwrap(), true).unwrap();
        assert!(
            back.max_abs_diff(&Tensor::full(&[4, 4], 3.5).to_complex())
                .unwrap()
                < 1e-12
        );
    }

    #[test]
    fn conv_identity_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[1, 1, 6, 6], 1.0, &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 1, 3, 3]);
        k.real_mut().unwrap()[4] = 1.0;
        assert!(
            conv_forward(&x, &k, None)
                .unwrap()
                .max_abs_diff(&x)
                .unwrap()
                < 1e-15
        );
        let two = Tensor::full(&[1, 1, 1, 1, 1], 2.0);
        let y = conv_forward(&x, &two, Some(&Tensor::zeros(&[1]))).unwrap();
        assert!(y.max_abs_diff(&x.map_real(|v| 2.0 * v).unwrap()).unwrap() < 1e-15);
        assert!(conv_forward(&x, &Tensor::zeros(&[1, 1, 1, 2, 3]), None).is_err());
    }

    #[test]
    fn instance_norm_of_constant_is_zero() {
        let x = Tensor::full(&[2, 1, 3, 3], 4.0);
        let (y, _) = instance_norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-5).unwrap();
        assert!(y.re().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn lower_median_even() {
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), (2.0, 3));
        assert_eq!(lower_median(&[5.0]), (5.0, 0));
    }
}
