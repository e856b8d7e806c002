//! Adam with bias correction. Complex parameters are updated as independent
//! real and imaginary parts.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Data, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of `p` in place; `t` is the 1-based step count.
pub fn adam_step(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], cfg: &AdamConfig, t: u64) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let step = cfg.lr / bc1;
    let root_bc2 = bc2.sqrt();
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let denom = v[i].sqrt() / root_bc2 + cfg.eps;
        p[i] -= step * m[i] / denom;
    }
}

fn flat(t: &Tensor) -> Vec<f64> {
    match t.data() {
        Data::Real(v) => v.clone(),
        Data::Complex(v) => v.iter().flat_map(|z| [z.re, z.im]).collect(),
    }
}

fn unflat(like: &Tensor, f: Vec<f64>) -> Tensor {
    match like.data() {
        Data::Real(_) => Tensor::from_real(like.shape(), f).expect("shape"),
        Data::Complex(_) => {
            let z = f.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
            Tensor::from_complex(like.shape(), z).expect("shape")
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam over a fixed list of parameter tensors. Parameters whose gradient is
/// `None` in a step are skipped entirely, state included.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        let slots = params
            .iter()
            .map(|p| {
                let n = flat(p).len();
                Slot {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                }
            })
            .collect();
        Adam { cfg, slots }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::invalid(format!(
                "optimizer holds {} parameters, got {} values and {} gradients",
                self.slots.len(),
                params.len(),
                grads.len()
            )));
        }
        // validate everything before touching any state
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() || g.dtype() != p.dtype() {
                    return Err(Error::shape(format!(
                        "gradient {:?} for parameter {i} of shape {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
                if !g.all_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient for parameter {i}")));
                }
            }
        }
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            let Some(g) = g else { continue };
            slot.t += 1;
            let mut pf = flat(p);
            adam_step(&mut pf, &flat(g), &mut slot.m, &mut slot.v, &self.cfg, slot.t);
            *p = unflat(p, pf);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_signed_lr() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut p = vec![Tensor::from_real(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let g = Tensor::from_real(&[3], vec![3.0, -1e-3, 0.0]).unwrap();
        let mut opt = Adam::new(cfg, &p);
        opt.step(&mut p, &[Some(g)]).unwrap();
        let r = p[0].re();
        assert!((r[0] - (1.0 - 0.01)).abs() < 1e-8);
        assert!((r[1] - (-2.0 + 0.01)).abs() < 1e-7);
        assert_eq!(r[2], 0.5);
    }

    #[test]
    fn matches_scalar_reference_on_parabola() {
        // independent textbook form: m_hat / (sqrt(v_hat) + eps)
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            trace.push(x);
        }
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = Adam::new(AdamConfig::with_lr(lr), &p);
        for want in trace {
            let g = Tensor::scalar(2.0 * p[0].re()[0]);
            opt.step(&mut p, &[Some(g)]).unwrap();
            assert!((p[0].re()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn complex_parts_are_independent() {
        let mut p = vec![Tensor::complex_zeros(&[1])];
        let g = Tensor::from_complex(&[1], vec![Complex64::new(2.0, -5.0)]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.5), &p);
        opt.step(&mut p, &[Some(g)]).unwrap();
        let z = p[0].complex().unwrap()[0];
        assert!((z.re + 0.5).abs() < 1e-8 && (z.im - 0.5).abs() < 1e-8);
    }

    #[test]
    fn skips_missing_and_rejects_nan() {
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &p);
        opt.step(&mut p, &[None, Some(Tensor::scalar(0.0))]).unwrap();
        assert_eq!(p[0].re()[0], 1.0);
        assert_eq!(p[1].re()[0], 2.0);
        let err = opt.step(&mut p, &[Some(Tensor::scalar(f64::NAN)), None]).unwrap_err();
        assert!(err.is_numerical());
        assert_eq!(p[0].re()[0], 1.0);
    }
}
