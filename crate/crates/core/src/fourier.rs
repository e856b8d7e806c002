//! Global convolutions evaluated in the Fourier domain.
//!
//! Inputs are zero-padded to twice their extent before the transform so the
//! circular product acts as a linear convolution. Weights `W` live on the
//! padded grid, `[C_out, C_in, 2H, 2W]`; the equivalent spatial kernel is
//! `Re(F^-1 W) / sqrt(4HW)` with its origin at index `(0, 0)`.

use num_complex::Complex64;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, PadMode};
use crate::tensor::Tensor;

fn check_input(tape: &Tape, x: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(format!("Fourier conv expects [C, H, W], got {s:?}"))),
    }
}

/// `F{pad(x)}` for `x: [C, H, W]`, giving `[C, 2H, 2W]`.
pub fn padded_spectrum(tape: &mut Tape, x: Var) -> Result<Var> {
    let (_, h, w) = check_input(tape, x)?;
    let p = tape.pad_crop(x, 2 * h, 2 * w, PadMode::ZeroPad)?;
    let p = tape.to_complex(p)?;
    tape.fft2(p, false)
}

/// `Re(F^-1(W . spectrum))`, centre-cropped to `out_hw`, plus bias.
fn apply_weight(
    tape: &mut Tape,
    spectrum: Var,
    w: Var,
    bias: Option<Var>,
    out_hw: (usize, usize),
) -> Result<Var> {
    let y = tape.channel_mix(spectrum, w)?;
    let y = tape.fft2(y, true)?;
    let y = tape.real_part(y)?;
    let y = tape.pad_crop(y, out_hw.0, out_hw.1, PadMode::CenterCrop)?;
    match bias {
        Some(b) => tape.add_channel_bias(y, b),
        None => Ok(y),
    }
}

/// `x: [C_in, H, W]`, `w: [C_out, C_in, 2H, 2W]` complex, `bias: [C_out]`.
pub fn fourier_conv2d(tape: &mut Tape, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let (ci, h, wd) = check_input(tape, x)?;
    let ws = tape.shape(w);
    if ws.len() != 4 || ws[1] != ci || ws[2] != 2 * h || ws[3] != 2 * wd {
        return Err(Error::shape(format!(
            "Fourier weight {ws:?} does not fit input [{ci}, {h}, {wd}] (expected [_, {ci}, {}, {}])",
            2 * h,
            2 * wd
        )));
    }
    let s = padded_spectrum(tape, x)?;
    apply_weight(tape, s, w, bias, (h, wd))
}

/// Band-limited outputs at successively coarser scales from one spectrum.
///
/// Level `i` crops the padded spectrum by `factors[i]`, so its output has
/// extent `(H / f, W / f)`. `weights[i]` is `[C_out, C_in, 2H / f, 2W / f]`.
pub fn multiscale_fourier_conv(
    tape: &mut Tape,
    x: Var,
    weights: &[Var],
    biases: &[Option<Var>],
    factors: &[usize],
) -> Result<Vec<Var>> {
    let (_, h, w) = check_input(tape, x)?;
    if weights.len() != factors.len() || biases.len() != factors.len() || factors.is_empty() {
        return Err(Error::invalid("one weight and bias per crop factor"));
    }
    if factors.windows(2).any(|p| p[1] <= p[0]) || factors[0] == 0 {
        return Err(Error::invalid(format!(
            "crop factors {factors:?} must be positive and strictly increasing"
        )));
    }
    for &f in factors {
        if h % f != 0 || w % f != 0 {
            return Err(Error::invalid(format!(
                "crop factor {f} does not divide the {h}x{w} input"
            )));
        }
    }
    let spectrum = padded_spectrum(tape, x)?;
    let mut out = Vec::with_capacity(factors.len());
    for ((&f, &wt), &b) in factors.iter().zip(weights).zip(biases) {
        let s = if f == 1 {
            spectrum
        } else {
            tape.spectral_crop(spectrum, 2 * h / f, 2 * w / f)?
        };
        out.push(apply_weight(tape, s, wt, b, (h / f, w / f))?);
    }
    Ok(out)
}

/// Weights whose spatial kernel is a unit impulse at the origin: all ones.
pub fn identity_weight(c: usize, h: usize, w: usize) -> Tensor {
    let mut data = vec![Complex64::new(0.0, 0.0); c * c * 4 * h * w];
    let plane = 4 * h * w;
    for i in 0..c {
        data[(i * c + i) * plane..(i * c + i + 1) * plane].fill(Complex64::new(1.0, 0.0));
    }
    Tensor::from_complex(&[c, c, 2 * h, 2 * w], data).expect("shape")
}

/// Weights of a Gaussian random spatial kernel supported on the `h x w`
/// window around the circular origin, variance `2 / (C_in h w)`.
pub fn init_weight<R: Rng + ?Sized>(c_out: usize, c_in: usize, h: usize, w: usize, rng: &mut R) -> Tensor {
    let (ph, pw) = (2 * h, 2 * w);
    let std = (2.0 / (c_in * h * w) as f64).sqrt();
    let mut k = Tensor::complex_zeros(&[c_out, c_in, ph, pw]);
    {
        let kd = k.complex_mut().expect("complex");
        for pair in kd.chunks_exact_mut(ph * pw) {
            for a in 0..h {
                for b in 0..w {
                    let i = (a + ph - h / 2) % ph;
                    let j = (b + pw - w / 2) % pw;
                    pair[i * pw + j] = Complex64::new(std * rng.sample::<f64, _>(rand_distr::StandardNormal), 0.0);
                }
            }
        }
    }
    spatial_to_weight(&k)
}

/// `W = sqrt(P) F{k}` for spatial kernels `k` on the padded grid.
pub fn spatial_to_weight(k: &Tensor) -> Tensor {
    let (h, w) = k.hw().expect("rank >= 2");
    let mut out = kernels::fft2(k, false).expect("fft");
    let s = ((h * w) as f64).sqrt();
    out.complex_mut().expect("complex").iter_mut().for_each(|z| *z *= s);
    out
}

/// Real spatial kernel `Re(F^-1 W) / sqrt(P)` equivalent to `W`.
pub fn weight_to_spatial(w: &Tensor) -> Result<Tensor> {
    let (h, wd) = w.hw()?;
    let k = kernels::fft2(w, true)?;
    let s = 1.0 / ((h * wd) as f64).sqrt();
    k.real_part().map_real(|v| v * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(x: &Tensor, w: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = fourier_conv2d(&mut tape, xv, wv, None).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn identity_weight_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 8, 6], 1.0, &mut rng);
        let y = run(&x, &identity_weight(2, 8, 6));
        assert!(y.max_abs_diff(&x).unwrap() < 1e-10);
    }

    #[test]
    fn rejects_unpadded_weight() {
        let x = Tensor::zeros(&[1, 8, 8]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(Tensor::complex_zeros(&[1, 1, 8, 8]));
        assert!(fourier_conv2d(&mut tape, xv, wv, None).is_err());
    }

    #[test]
    fn init_round_trips_through_spatial_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = init_weight(3, 2, 4, 4, &mut rng);
        assert_eq!(w.shape(), &[3, 2, 8, 8]);
        let k = weight_to_spatial(&w).unwrap();
        // support limited to the 4x4 window around the origin
        for (idx, v) in k.re().iter().enumerate() {
            let (i, j) = ((idx / 8) % 8, idx % 8);
            let inside = !(2..6).contains(&i) && !(2..6).contains(&j);
            if !inside {
                assert!(v.abs() < 1e-12);
            }
        }
        let back = spatial_to_weight(&k.to_complex());
        assert!(back.max_abs_diff(&w).unwrap() < 1e-12);
    }

    #[test]
    fn no_wraparound_for_compact_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // random kernel supported within 3 px of the origin on the 32x32 grid
        let mut k = Tensor::complex_zeros(&[1, 1, 32, 32]);
        for di in -3i32..=3 {
            for dj in -3i32..=3 {
                let (a, b) = (di.rem_euclid(32) as usize, dj.rem_euclid(32) as usize);
                k.complex_mut().unwrap()[a * 32 + b] = Complex64::new(rng.random_range(-1.0..1.0), 0.0);
            }
        }
        let mut x = Tensor::zeros(&[1, 16, 16]);
        x.real_mut().unwrap()[0] = 1.0;
        let y = run(&x, &spatial_to_weight(&k));
        for i in 0..16 {
            for j in 0..16 {
                if i > 3 || j > 3 {
                    assert!(y.re()[i * 16 + j].abs() < 1e-12, "leak at ({i}, {j})");
                }
            }
        }
        assert!(y.re()[0].abs() > 0.0);
    }

    #[test]
    fn multiscale_constant_input_stays_constant() {
        let x = Tensor::full(&[1, 8, 8], 3.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let ws: Vec<Var> = [1usize, 2, 4]
            .iter()
            .map(|&f| {
                // DC-only spectrum: a flat kernel
                let n = 16 / f;
                let mut w = Tensor::complex_zeros(&[1, 1, n, n]);
                w.complex_mut().unwrap()[0] = Complex64::new(1.0, 0.0);
                tape.constant(w)
            })
            .collect();
        let ys = multiscale_fourier_conv(&mut tape, xv, &ws, &[None, None, None], &[1, 2, 4]).unwrap();
        for (y, n) in ys.iter().zip([8, 4, 2]) {
            let v = tape.value(*y);
            assert_eq!(v.shape(), &[1, n, n]);
            let m = v.mean();
            assert!(v.re().iter().all(|a| (a - m).abs() < 1e-10));
        }
        assert!(multiscale_fourier_conv(&mut tape, xv, &ws, &[None, None, None], &[1, 4, 2]).is_err());
    }
}
