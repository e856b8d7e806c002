//! Gradient verification suite: every tape primitive, the Fourier layers,
//! and the full mask -> PSF -> image -> noise -> network -> loss pipeline,
//! checked against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Unary, Var};
use crate::error::Result;
use crate::fourier;
use crate::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use crate::kernels::{PadMode, Window};
use crate::loss::{loss_on, LossConfig, Normalizers};
use crate::network::{build_network, fouriernet2d};
use crate::optics::{image_on, noise_draws, Microscope, OpticsConfig};
use crate::tensor::Tensor;

type Check = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    f: Check,
    inputs: Vec<Tensor>,
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { name, f: Box::new(f), inputs }
}

/// Uniform values in `[lo, hi]` with random sign, kept away from zero.
fn signed(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let t = Tensor::uniform(shape, lo, hi, rng);
    let s = Tensor::uniform(shape, -1.0, 1.0, rng);
    let v = t.re().iter().zip(s.re()).map(|(a, s)| a * s.signum()).collect();
    Tensor::from_real(shape, v).expect("shape")
}

fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = |s: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(s, 1.0, rng);
    let c = |s: &[usize], rng: &mut ChaCha8Rng| Tensor::complex_randn(s, 1.0, rng);
    let pos = |s: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(s, 0.5, 2.0, rng);
    vec![
        case("fft2", vec![c(&[2, 4, 6], &mut rng)], |t, x| t.fft2(x[0], false)),
        case("ifft2", vec![c(&[4, 4], &mut rng)], |t, x| t.fft2(x[0], true)),
        case("roll2", vec![r(&[3, 5], &mut rng)], |t, x| t.roll2(x[0], 2, -1)),
        case("fftshift2", vec![c(&[5, 4], &mut rng)], |t, x| t.fftshift2(x[0])),
        case("ifftshift2", vec![r(&[5, 5], &mut rng)], |t, x| t.ifftshift2(x[0])),
        case("window", vec![r(&[2, 6, 6], &mut rng)], |t, x| {
            t.window(x[0], Window { in_hw: (6, 6), out_hw: (4, 8), offset: (1, -1) })
        }),
        case("zero_pad", vec![r(&[3, 3], &mut rng)], |t, x| t.pad_crop(x[0], 6, 7, PadMode::ZeroPad)),
        case("center_crop", vec![c(&[6, 6], &mut rng)], |t, x| t.pad_crop(x[0], 3, 4, PadMode::CenterCrop)),
        case("spectral_crop", vec![c(&[2, 8, 8], &mut rng)], |t, x| t.spectral_crop(x[0], 4, 4)),
        case("sum_pool2", vec![r(&[2, 4, 6], &mut rng)], |t, x| t.sum_pool2(x[0], 2)),
        case("max_pool2", vec![r(&[4, 4], &mut rng)], |t, x| t.max_pool2(x[0], 2)),
        case("upsample2", vec![r(&[2, 3], &mut rng)], |t, x| t.upsample2(x[0], 2)),
        case("conv2d", vec![r(&[2, 1, 5, 5], &mut rng), r(&[3, 2, 1, 3, 3], &mut rng), r(&[3], &mut rng)], |t, x| {
            t.conv(x[0], x[1], Some(x[2]))
        }),
        case("conv3d", vec![r(&[1, 3, 4, 4], &mut rng), r(&[2, 1, 3, 3, 1], &mut rng)], |t, x| {
            t.conv(x[0], x[1], None)
        }),
        case("instance_norm", vec![r(&[2, 2, 3, 3], &mut rng), pos(&[2], &mut rng), r(&[2], &mut rng)], |t, x| {
            t.instance_norm(x[0], x[1], x[2], 1e-5)
        }),
        case("relu", vec![signed(&[10], 0.1, 1.0, &mut rng)], |t, x| t.relu(x[0])),
        case("leaky_relu", vec![signed(&[10], 0.1, 1.0, &mut rng)], |t, x| t.leaky_relu(x[0], 0.1)),
        case("sqrt", vec![pos(&[6], &mut rng)], |t, x| t.unary(x[0], Unary::Sqrt)),
        case("square", vec![r(&[6], &mut rng)], |t, x| t.square(x[0])),
        case("recip", vec![pos(&[6], &mut rng)], |t, x| t.unary(x[0], Unary::Recip)),
        case("scale_complex", vec![c(&[4], &mut rng)], |t, x| t.scale(x[0], -1.7)),
        case("add_scalar", vec![r(&[4], &mut rng)], |t, x| t.unary(x[0], Unary::AddScalar(3.0))),
        case("exp_i", vec![r(&[3, 3], &mut rng)], |t, x| t.exp_i(x[0])),
        case("abs_sq", vec![c(&[3, 3], &mut rng)], |t, x| t.abs_sq(x[0])),
        case("real_part", vec![c(&[5], &mut rng)], |t, x| t.real_part(x[0])),
        case("to_complex", vec![r(&[5], &mut rng)], |t, x| t.to_complex(x[0])),
        case("add", vec![c(&[4], &mut rng), c(&[4], &mut rng)], |t, x| t.add(x[0], x[1])),
        case("sub", vec![r(&[4], &mut rng), r(&[4], &mut rng)], |t, x| t.sub(x[0], x[1])),
        case("mul_real", vec![r(&[4], &mut rng), r(&[4], &mut rng)], |t, x| t.mul(x[0], x[1])),
        case("mul_complex", vec![c(&[4], &mut rng), c(&[4], &mut rng)], |t, x| t.mul(x[0], x[1])),
        case("mul_scalar", vec![r(&[2, 3], &mut rng), r(&[1], &mut rng)], |t, x| t.mul_scalar(x[0], x[1])),
        case("channel_mix", vec![c(&[2, 3, 3], &mut rng), c(&[3, 2, 3, 3], &mut rng)], |t, x| {
            t.channel_mix(x[0], x[1])
        }),
        case("add_channel_bias", vec![r(&[2, 3, 3], &mut rng), r(&[2], &mut rng)], |t, x| {
            t.add_channel_bias(x[0], x[1])
        }),
        case("sum", vec![r(&[3, 2], &mut rng)], |t, x| t.sum(x[0])),
        case("mean", vec![r(&[3, 2], &mut rng)], |t, x| t.mean(x[0])),
        case("sum_leading", vec![c(&[3, 2, 2], &mut rng)], |t, x| t.sum_leading(x[0])),
        case("reshape", vec![r(&[2, 6], &mut rng)], |t, x| t.reshape(x[0], &[3, 4])),
        case("concat", vec![r(&[1, 3], &mut rng), r(&[2, 3], &mut rng)], |t, x| t.concat(&[x[0], x[1]])),
        case("stack", vec![r(&[2, 2], &mut rng), r(&[2, 2], &mut rng)], |t, x| t.stack(&[x[0], x[1]])),
        case("index0", vec![r(&[3, 2, 2], &mut rng)], |t, x| t.index0(x[0], 1)),
        case("median", vec![r(&[7], &mut rng)], |t, x| t.median(x[0])),
        case("shot_noise", vec![Tensor::uniform(&[4, 4], 5.0, 50.0, &mut rng)], |t, x| {
            let eps = noise_draws(16, 3);
            t.shot_noise(x[0], eps)
        }),
    ]
}

fn layer_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
    let w = Tensor::complex_randn(&[3, 2, 8, 8], 0.3, &mut rng);
    let b = Tensor::randn(&[3], 1.0, &mut rng);
    let w1 = Tensor::complex_randn(&[1, 2, 8, 8], 0.3, &mut rng);
    let w2 = Tensor::complex_randn(&[1, 2, 4, 4], 0.3, &mut rng);
    let v = Tensor::uniform(&[2, 8, 8], 0.0, 1.0, &mut rng);
    let vh = Tensor::uniform(&[2, 8, 8], 0.0, 1.0, &mut rng);
    let s = Tensor::uniform(&[2, 6, 6], 0.0, 1.0, &mut rng);
    let vol = Tensor::uniform(&[2, 5, 7], 0.0, 1.0, &mut rng);
    vec![
        case("fourier_conv2d", vec![x.clone(), w, b], |t, a| fourier::fourier_conv2d(t, a[0], a[1], Some(a[2]))),
        case("multiscale_fourier_conv", vec![x, w1, w2], |t, a| {
            let ys = fourier::multiscale_fourier_conv(t, a[0], &[a[1], a[2]], &[None, None], &[1, 2])?;
            let y0 = t.sum(ys[0])?;
            let y1 = t.square(ys[1])?;
            let y1 = t.sum(y1)?;
            t.add(y0, y1)
        }),
        case("image", vec![s, vol], |t, a| image_on(t, a[0], a[1])),
        case("loss", vec![v.clone(), vh], move |t, a| {
            let cfg = LossConfig::default();
            let norms = Normalizers::of(&v, &cfg)?;
            Ok(loss_on(t, a[0], a[1], &cfg, norms)?.total)
        }),
    ]
}

/// Full pipeline on the tiny optics toy: phase mask, a fixed sample, fixed
/// noise draws and one 2-D network per plane. Inputs are the mask followed
/// by every network parameter.
fn composite_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ocfg = OpticsConfig::tiny(2);
    let scope = Microscope::new(ocfg)?;
    let phi = Tensor::uniform(&[16, 16], -1.0, 1.0, &mut rng);
    let sample = Tensor::uniform(&[2, 8, 8], 0.2, 1.0, &mut rng);
    let truth = Tensor::uniform(&[2, 8, 8], 0.0, 1.0, &mut rng);
    let nets = (0..2)
        .map(|_| build_network(&fouriernet2d(8, 2, 3), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<usize> = nets.iter().map(|n| n.params().len()).collect();
    let mut inputs = vec![phi];
    for n in &nets {
        inputs.extend(n.param_values());
    }
    let eps = noise_draws(64, seed ^ 0x90);
    let f = move |t: &mut Tape, a: &[Var]| -> Result<Var> {
        let s = scope.psf_planes(t, a[0], &[0, 1])?;
        let v = t.constant(sample.clone());
        let mu = image_on(t, s, v)?;
        let c = t.shot_noise(mu, eps.clone())?;
        let mut outs = Vec::new();
        let mut at = 1;
        for (net, k) in nets.iter().zip(&counts) {
            outs.push(net.forward(t, &a[at..at + k], c)?);
            at += k;
        }
        let recon = t.concat(&outs)?;
        let cfg = LossConfig::default();
        let norms = Normalizers::of(&truth, &cfg)?;
        let tv = t.constant(truth.clone());
        Ok(loss_on(t, tv, recon, &cfg, norms)?.total)
    };
    Ok(case("pipeline", inputs, f))
}

/// Names of every check in the suite, in run order.
pub fn check_names() -> Vec<&'static str> {
    let mut names: Vec<&'static str> = primitive_cases(0).iter().map(|c| c.name).collect();
    names.extend(layer_cases(0).iter().map(|c| c.name));
    names.push("pipeline");
    names
}

/// Run every check (or those whose name contains `filter`).
pub fn run_suite(seed: u64, cfg: GradcheckConfig, filter: Option<&str>) -> Result<Vec<GradcheckReport>> {
    let mut cases = primitive_cases(seed);
    cases.extend(layer_cases(seed));
    cases.push(composite_case(seed)?);
    cases
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| {
            log::debug!("gradcheck {}", c.name);
            gradcheck(c.name, &c.f, &c.inputs, cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let reports = run_suite(1, GradcheckConfig::default(), None).unwrap();
        assert_eq!(reports.len(), check_names().len());
        for r in &reports {
            assert!(r.passed(), "{}: {}", r.name, r.worst());
        }
    }
}
