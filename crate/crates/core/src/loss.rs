//! High-pass-weighted normalized reconstruction loss.
//!
//! `L = E[(H v - H v^)^2] / E[(H v)^2] + beta E[(v - v^)^2] / E[v^2]`
//! with `H v = v - G_sigma * v` applied per plane.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub highpass_sigma_px: f64,
    pub eps_norm: f64,
    /// Replace the high-pass filter by the identity (test hook).
    pub identity_highpass: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.1,
            highpass_sigma_px: 2.0,
            eps_norm: 1e-12,
            identity_highpass: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.highpass_sigma_px > 0.0) || !(self.eps_norm > 0.0) {
            return Err(Error::config(
                "loss needs beta >= 0, sigma > 0 and a positive normaliser guard",
            ));
        }
        Ok(())
    }
}

/// Normalised 1-D Gaussian truncated at `4 sigma`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// `v - G_sigma * v` per plane of `v: [D, H, W]`, zero-padded boundary.
pub fn high_pass_on(tape: &mut Tape, v: Var, sigma: f64) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("high-pass expects [D, H, W], got {s:?}")));
    }
    let taps = gaussian_taps(sigma);
    let k = taps.len();
    let x = tape.reshape(v, &[1, s[0], s[1], s[2]])?;
    let row = tape.constant(Tensor::from_real(&[1, 1, 1, 1, k], taps.clone())?);
    let col = tape.constant(Tensor::from_real(&[1, 1, 1, k, 1], taps)?);
    let b = tape.conv(x, row, None)?;
    let b = tape.conv(b, col, None)?;
    let b = tape.reshape(b, &s)?;
    tape.sub(v, b)
}

pub fn high_pass(v: &Tensor, sigma: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(v.clone());
    let y = high_pass_on(&mut tape, x, sigma)?;
    Ok(tape.value(y).clone())
}

fn filtered(tape: &mut Tape, v: Var, cfg: &LossConfig) -> Result<Var> {
    if cfg.identity_highpass {
        Ok(v)
    } else {
        high_pass_on(tape, v, cfg.highpass_sigma_px)
    }
}

/// Shared denominators `E[(H v)^2]` and `E[v^2]` of the two loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizers {
    pub mu_hv: f64,
    pub mu_v: f64,
}

impl Normalizers {
    pub fn of(v: &Tensor, cfg: &LossConfig) -> Result<Self> {
        let hv = if cfg.identity_highpass {
            v.clone()
        } else {
            high_pass(v, cfg.highpass_sigma_px)?
        };
        let n = v.len() as f64;
        Ok(Normalizers {
            mu_hv: (hv.norm_sq() / n).max(cfg.eps_norm),
            mu_v: (v.norm_sq() / n).max(cfg.eps_norm),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub hnmse: Var,
    pub nmse: Var,
}

/// Loss of reconstruction `vhat` against constant truth `v`, both `[D, H, W]`.
pub fn loss_on(
    tape: &mut Tape,
    v: Var,
    vhat: Var,
    cfg: &LossConfig,
    norms: Normalizers,
) -> Result<LossTerms> {
    if tape.shape(v) != tape.shape(vhat) {
        return Err(Error::shape(format!(
            "loss of {:?} against {:?}",
            tape.shape(vhat),
            tape.shape(v)
        )));
    }
    let hv = filtered(tape, v, cfg)?;
    let hvh = filtered(tape, vhat, cfg)?;
    let d = tape.sub(hv, hvh)?;
    let d = tape.square(d)?;
    let d = tape.mean(d)?;
    let hnmse = tape.scale(d, 1.0 / norms.mu_hv.max(cfg.eps_norm))?;
    let e = tape.sub(v, vhat)?;
    let e = tape.square(e)?;
    let e = tape.mean(e)?;
    let nmse = tape.scale(e, 1.0 / norms.mu_v.max(cfg.eps_norm))?;
    let weighted = tape.scale(nmse, cfg.beta)?;
    let total = tape.add(hnmse, weighted)?;
    Ok(LossTerms { total, hnmse, nmse })
}

/// `(total, hnmse, nmse)` with normalisers taken from `v`.
pub fn loss(v: &Tensor, vhat: &Tensor, cfg: &LossConfig) -> Result<(f64, f64, f64)> {
    let norms = Normalizers::of(v, cfg)?;
    let mut tape = Tape::new();
    let a = tape.constant(v.clone());
    let b = tape.constant(vhat.clone());
    let t = loss_on(&mut tape, a, b, cfg, norms)?;
    let get = |x: Var| tape.value(x).re()[0];
    Ok((get(t.total), get(t.hnmse), get(t.nmse)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn taps_are_normalised_and_truncated() {
        let t = gaussian_taps(2.0);
        assert_eq!(t.len(), 17);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn high_pass_basics() {
        let z = Tensor::zeros(&[2, 8, 8]);
        assert_eq!(high_pass(&z, 2.0).unwrap(), z);
        let c = Tensor::full(&[1, 24, 24], 3.0);
        let h = high_pass(&c, 2.0).unwrap();
        // interior at least 4 sigma from every edge
        let mut interior = Vec::new();
        for i in 8..16 {
            for j in 8..16 {
                interior.push(h.re()[i * 24 + j]);
            }
        }
        assert!(interior.iter().all(|v| v.abs() < 1e-10));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[1, 8, 8], 1.0, &mut rng);
        let b = Tensor::randn(&[1, 8, 8], 1.0, &mut rng);
        let mix: Vec<f64> = a.re().iter().zip(b.re()).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
        let lhs = high_pass(&Tensor::from_real(&[1, 8, 8], mix).unwrap(), 2.0).unwrap();
        let (ha, hb) = (high_pass(&a, 2.0).unwrap(), high_pass(&b, 2.0).unwrap());
        let rhs: Vec<f64> = ha.re().iter().zip(hb.re()).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
        assert!(lhs.max_abs_diff(&Tensor::from_real(&[1, 8, 8], rhs).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn loss_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = LossConfig::default();
        let v = Tensor::uniform(&[2, 12, 12], 0.1, 1.0, &mut rng);
        let vh = Tensor::uniform(&[2, 12, 12], 0.0, 1.0, &mut rng);
        assert_eq!(loss(&v, &v, &cfg).unwrap().0, 0.0);
        let l = loss(&v, &vh, &cfg).unwrap().0;
        let s = |t: &Tensor| t.map_real(|x| 7.0 * x).unwrap();
        assert!((loss(&s(&v), &s(&vh), &cfg).unwrap().0 - l).abs() < 1e-10 * l);

        let id = LossConfig {
            identity_highpass: true,
            ..cfg
        };
        let zero = Tensor::zeros(v.shape());
        assert!((loss(&v, &zero, &id).unwrap().0 - 1.1).abs() < 1e-12);
        assert!(loss(&v, &Tensor::zeros(&[2, 12, 11]), &cfg).is_err());
    }
}
