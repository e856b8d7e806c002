//! Reconstruction quality metrics.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::loss::{self, LossConfig};
use crate::tensor::Tensor;

/// Standard per-scale exponents of the five-scale MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn finite_or_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    /// `+inf` (serialized as `"inf"`) for identical inputs.
    #[serde(serialize_with = "finite_or_inf")]
    pub psnr: f64,
    pub ms_ssim: f64,
    pub l_hnmse: f64,
}

fn check_pair(v: &Tensor, vhat: &Tensor) -> Result<()> {
    if v.shape() != vhat.shape() {
        return Err(Error::shape(format!(
            "metric of {:?} against {:?}",
            vhat.shape(),
            v.shape()
        )));
    }
    v.real()?;
    vhat.real()?;
    Ok(())
}

/// `10 log10(max(v)^2 / MSE)`, `+inf` when `vhat == v`.
pub fn psnr(v: &Tensor, vhat: &Tensor) -> Result<f64> {
    check_pair(v, vhat)?;
    let mse = v
        .re()
        .iter()
        .zip(vhat.re())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / v.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = v.max();
    if !(peak > 0.0) {
        return Err(Error::invalid("PSNR needs a positive peak in the reference"));
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gauss(n: usize) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Separable "valid" Gaussian filter; the window shrinks to fit small images.
fn filter(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (kh, kw) = (WINDOW.min(h), WINDOW.min(w));
    let (gh, gw) = (gauss(kh), gauss(kw));
    let ow = w - kw + 1;
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..kw).map(|t| gw[t] * img[i * w + j + t]).sum();
        }
    }
    let oh = h - kh + 1;
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..kh).map(|t| gh[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_cs(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> (f64, f64) {
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (mu_a, _, _) = filter(a, h, w);
    let (mu_b, _, _) = filter(b, h, w);
    let (aa, _, _) = filter(&prod(a, a), h, w);
    let (bb, _, _) = filter(&prod(b, b), h, w);
    let (ab, _, _) = filter(&prod(a, b), h, w);
    let n = mu_a.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        cs += c;
        ssim += c * (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    }
    (ssim / n, cs / n)
}

fn avg_pool2(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let s = img[2 * i * w + 2 * j]
                + img[2 * i * w + 2 * j + 1]
                + img[(2 * i + 1) * w + 2 * j]
                + img[(2 * i + 1) * w + 2 * j + 1];
            out[i * ow + j] = s / 4.0;
        }
    }
    (out, oh, ow)
}

/// Five-scale MS-SSIM of one `h x w` image pair with dynamic range `range`.
pub fn ms_ssim_2d(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> Result<f64> {
    let levels = MS_SSIM_WEIGHTS.len();
    if h >> (levels - 1) == 0 || w >> (levels - 1) == 0 {
        return Err(Error::invalid(format!(
            "MS-SSIM needs planes of at least {0}x{0}, got {h}x{w}",
            1 << (levels - 1)
        )));
    }
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    let (mut h, mut w) = (h, w);
    let mut out = 1.0;
    for (level, weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (ssim, cs) = ssim_cs(&a, &b, h, w, range);
        let term = if level + 1 == levels { ssim } else { cs };
        out *= term.max(0.0).powf(*weight);
        if level + 1 < levels {
            let pa = avg_pool2(&a, h, w);
            let pb = avg_pool2(&b, h, w);
            a = pa.0;
            b = pb.0;
            (h, w) = (pa.1, pa.2);
        }
    }
    Ok(out)
}

/// Mean of per-plane MS-SSIM over a `[Z, Y, X]` volume. The dynamic range is
/// that of the reference `v`.
pub fn ms_ssim(v: &Tensor, vhat: &Tensor) -> Result<f64> {
    check_pair(v, vhat)?;
    let (h, w) = v.hw()?;
    let plane = h * w;
    let mut range = v.max() - v.min();
    if !(range > 0.0) {
        range = 1.0;
    }
    let planes = v.len() / plane;
    let mut acc = 0.0;
    for z in 0..planes {
        let s = z * plane..(z + 1) * plane;
        acc += ms_ssim_2d(&v.re()[s.clone()], &vhat.re()[s], h, w, range)?;
    }
    Ok(acc / planes as f64)
}

/// High-pass normalized MSE: the training loss with `beta = 0`.
pub fn l_hnmse(v: &Tensor, vhat: &Tensor) -> Result<f64> {
    let cfg = LossConfig {
        beta: 0.0,
        ..LossConfig::default()
    };
    Ok(loss::loss(v, vhat, &cfg)?.1)
}

pub fn metrics_eval(v: &Tensor, vhat: &Tensor) -> Result<Metrics> {
    check_pair(v, vhat)?;
    if v.rank() != 3 {
        return Err(Error::shape(format!("expected [Z, Y, X] volumes, got {:?}", v.shape())));
    }
    Ok(Metrics {
        psnr: psnr(v, vhat)?,
        ms_ssim: ms_ssim(v, vhat)?,
        l_hnmse: l_hnmse(v, vhat)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn phantom() -> Tensor {
        let mut p = PhantomParams::toy(3, 32, 5);
        p.background = 0.05;
        generate_phantom(&p).unwrap()
    }

    #[test]
    fn identical_inputs() {
        let v = phantom();
        let m = metrics_eval(&v, &v).unwrap();
        assert_eq!(m.psnr, f64::INFINITY);
        assert!((m.ms_ssim - 1.0).abs() < 1e-12);
        assert_eq!(m.l_hnmse, 0.0);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""), "{json}");
    }

    #[test]
    fn psnr_matches_analytic_noise_level() {
        let v = phantom();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sigma = 0.01;
        let noise = Tensor::randn(v.shape(), 1.0, &mut rng);
        // rescale the draw so its empirical variance is exactly sigma^2
        let n = noise.len() as f64;
        let scale = sigma / (noise.norm_sq() / n).sqrt();
        let vhat: Vec<f64> = v.re().iter().zip(noise.re()).map(|(a, e)| a + scale * e).collect();
        let vhat = Tensor::from_real(v.shape(), vhat).unwrap();
        let expect = 10.0 * (v.max() * v.max() / (sigma * sigma)).log10();
        assert!((psnr(&v, &vhat).unwrap() - expect).abs() < 0.1);
    }

    #[test]
    fn ms_ssim_ordering_and_range() {
        let v = phantom();
        let inv = v.map_real(|x| v.max() - x).unwrap();
        let s = ms_ssim(&v, &inv).unwrap();
        assert!((-1.0..1.0).contains(&s));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy = Tensor::uniform(v.shape(), -0.02, 0.02, &mut rng);
        let noisy: Vec<f64> = v.re().iter().zip(noisy.re()).map(|(a, e)| a + e).collect();
        let n = ms_ssim(&v, &Tensor::from_real(v.shape(), noisy).unwrap()).unwrap();
        assert!(n < 1.0 && n > s);
        assert!(ms_ssim(&Tensor::zeros(&[1, 8, 8]), &Tensor::zeros(&[1, 8, 8])).is_err());
    }
}
