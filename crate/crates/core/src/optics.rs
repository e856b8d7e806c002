//! Differentiable 4f forward model: phase mask -> per-plane PSFs -> camera image.
//!
//! The pupil lives on a centred frequency grid `k_i = (i - N/2) / (N dx)`.
//! PRFs come back centred too, so the unaberrated focus sits at pixel
//! `(N/2, N/2)` and, after crop and pooling, at camera pixel `(H/2, W/2)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{PadMode, Window};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticsConfig {
    pub wavelength_um: f64,
    pub na: f64,
    pub refractive_index: f64,
    pub mask_pixels: usize,
    pub mask_pixel_um: f64,
    pub camera_pixels: [usize; 2],
    pub camera_pixel_um: f64,
    pub z_planes_um: Vec<f64>,
    pub taper_width_px: f64,
    pub oversim_factor: f64,
    /// Expected photons collected from a point source of unit intensity.
    pub photon_budget: f64,
}

impl OpticsConfig {
    /// Small Nyquist-consistent setup used throughout the tests.
    pub fn toy() -> Self {
        OpticsConfig {
            wavelength_um: 0.532,
            na: 0.8,
            refractive_index: 1.33,
            mask_pixels: 64,
            mask_pixel_um: 0.325,
            camera_pixels: [32, 32],
            camera_pixel_um: 0.325,
            z_planes_um: vec![-6.0, -2.0, 2.0, 6.0],
            taper_width_px: 5.0,
            oversim_factor: 1.5,
            photon_budget: 1000.0,
        }
    }

    /// `N = 16` mask, `8 x 8` camera and `planes` planes spread over +-3 um;
    /// small enough for finite-difference checks.
    pub fn tiny(planes: usize) -> Self {
        let z = (0..planes)
            .map(|i| if planes == 1 { 0.0 } else { -3.0 + 6.0 * i as f64 / (planes - 1) as f64 })
            .collect();
        OpticsConfig {
            mask_pixels: 16,
            camera_pixels: [8, 8],
            z_planes_um: z,
            taper_width_px: 2.0,
            ..Self::toy()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: OpticsConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn nyquist_pixel_um(&self) -> f64 {
        self.wavelength_um / (2.0 * self.na)
    }

    /// Integer ratio between camera and mask pixel pitch.
    pub fn pool_factor(&self) -> Result<usize> {
        let r = self.camera_pixel_um / self.mask_pixel_um;
        let k = r.round();
        if k < 1.0 || (r - k).abs() > 1e-9 * r {
            return Err(Error::config(format!(
                "camera pixel {} um is not an integer multiple of mask pixel {} um",
                self.camera_pixel_um, self.mask_pixel_um
            )));
        }
        Ok(k as usize)
    }

    /// Extent of the cropped PSF window in mask pixels.
    pub fn crop_pixels(&self) -> Result<(usize, usize)> {
        let r = self.pool_factor()?;
        Ok((self.camera_pixels[0] * r, self.camera_pixels[1] * r))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("wavelength_um", self.wavelength_um),
            ("na", self.na),
            ("refractive_index", self.refractive_index),
            ("mask_pixel_um", self.mask_pixel_um),
            ("camera_pixel_um", self.camera_pixel_um),
            ("taper_width_px", self.taper_width_px),
            ("photon_budget", self.photon_budget),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.na > self.refractive_index {
            return Err(Error::config(format!(
                "na {} exceeds refractive index {}",
                self.na, self.refractive_index
            )));
        }
        if self.mask_pixel_um > self.nyquist_pixel_um() * (1.0 + 1e-12) {
            return Err(Error::config(format!(
                "mask pixel {} um exceeds the Nyquist pitch {} um",
                self.mask_pixel_um,
                self.nyquist_pixel_um()
            )));
        }
        if !(self.oversim_factor >= 1.0) {
            return Err(Error::config("oversim_factor must be at least 1"));
        }
        if self.mask_pixels == 0 || self.camera_pixels.contains(&0) {
            return Err(Error::config("grid extents must be positive"));
        }
        if self.z_planes_um.is_empty() || self.z_planes_um.iter().any(|z| !z.is_finite()) {
            return Err(Error::config("z_planes_um must list finite plane offsets"));
        }
        let (ch, cw) = self.crop_pixels()?;
        let n = self.mask_pixels;
        for c in [ch, cw] {
            if (n as f64) < self.oversim_factor * c as f64 - 1e-9 {
                return Err(Error::config(format!(
                    "mask grid {n} is smaller than {} x the {c} px field of view",
                    self.oversim_factor
                )));
            }
            if !(n - c).is_multiple_of(2) {
                return Err(Error::config(format!(
                    "mask grid {n} and crop {c} must share parity"
                )));
            }
        }
        Ok(())
    }
}

/// Nyquist pixel size `lambda / (2 NA)` and the pixel count covering `fov_um`.
pub fn nyquist_params(na: f64, wavelength_um: f64, fov_um: f64) -> Result<(f64, usize)> {
    if !(na > 0.0 && wavelength_um > 0.0 && fov_um > 0.0) {
        return Err(Error::invalid("na, wavelength and field of view must be positive"));
    }
    let dx = wavelength_um / (2.0 * na);
    // guard against 823 / 0.3325 landing a hair above an integer
    let n = (fov_um / dx * (1.0 - 1e-12)).ceil() as usize;
    Ok((dx, n))
}

/// Centred frequency coordinates `(ky, kx)` in cycles/um, row-major.
fn frequency_grid(cfg: &OpticsConfig) -> impl Iterator<Item = (f64, f64)> + '_ {
    let n = cfg.mask_pixels;
    let dk = 1.0 / (n as f64 * cfg.mask_pixel_um);
    let half = (n / 2) as f64;
    (0..n * n).map(move |i| {
        let ky = ((i / n) as f64 - half) * dk;
        let kx = ((i % n) as f64 - half) * dk;
        (ky, kx)
    })
}

/// Axial wavenumber `sqrt((n/lambda)^2 - |k|^2)`, `None` for evanescent modes.
fn axial(cfg: &OpticsConfig, ky: f64, kx: f64) -> Option<f64> {
    let r = (cfg.refractive_index / cfg.wavelength_um).powi(2) - ky * ky - kx * kx;
    (r >= 0.0).then(|| r.sqrt())
}

/// Field of a point source at depth `z_um` entering the pupil plane.
pub fn point_source_spectrum(cfg: &OpticsConfig, z_um: f64) -> Tensor {
    let n = cfg.mask_pixels;
    let data = frequency_grid(cfg)
        .map(|(ky, kx)| match axial(cfg, ky, kx) {
            Some(kz) => Complex64::from_polar(1.0, 2.0 * PI * z_um * kz),
            None => Complex64::new(0.0, 0.0),
        })
        .collect();
    Tensor::from_complex(&[n, n], data).expect("grid shape")
}

/// Binary NA disc, boundary included.
pub fn pupil_amplitude(cfg: &OpticsConfig) -> Tensor {
    let n = cfg.mask_pixels;
    let cut = cfg.na / cfg.wavelength_um;
    let data = frequency_grid(cfg)
        .map(|(ky, kx)| {
            if (ky * ky + kx * kx).sqrt() <= cut * (1.0 + 1e-12) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_real(&[n, n], data).expect("grid shape")
}

/// `t = 2 sigmoid(d / width) - 1` with `d` the distance to the nearest edge.
pub fn taper_mask(h: usize, w: usize, width_px: f64) -> Result<Tensor> {
    if !(width_px > 0.0) || h == 0 || w == 0 {
        return Err(Error::invalid("taper needs a positive width and extent"));
    }
    let data = (0..h * w)
        .map(|k| {
            let (i, j) = (k / w, k % w);
            let d = i.min(j).min(h - 1 - i).min(w - 1 - j) as f64;
            2.0 / (1.0 + (-d / width_px).exp()) - 1.0
        })
        .collect();
    Tensor::from_real(&[h, w], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMask(Tensor);

impl PhaseMask {
    pub fn new(phi: Tensor, cfg: &OpticsConfig) -> Result<Self> {
        let n = cfg.mask_pixels;
        if phi.shape() != [n, n] || phi.is_complex() {
            return Err(Error::shape(format!(
                "phase mask must be a real {n}x{n} tensor, got {:?}",
                phi.shape()
            )));
        }
        Ok(PhaseMask(phi))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsfStack(Tensor);

impl PsfStack {
    pub fn new(s: Tensor) -> Result<Self> {
        if s.rank() != 3 || s.is_complex() {
            return Err(Error::shape("PSF stack must be a real [Z, H, W] tensor"));
        }
        Ok(PsfStack(s))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn planes(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Precomputed constants of one microscope configuration.
#[derive(Clone, Debug)]
pub struct Microscope {
    cfg: OpticsConfig,
    /// `u_point(z) * a` per plane.
    fields: Vec<Tensor>,
    taper: Tensor,
    crop: Window,
    pool: usize,
    /// Converts a raw PRF to photons per unit source intensity.
    gain: f64,
}

impl Microscope {
    pub fn new(cfg: OpticsConfig) -> Result<Self> {
        cfg.validate()?;
        let amplitude = pupil_amplitude(&cfg);
        let disc = amplitude.sum();
        let fields = cfg
            .z_planes_um
            .iter()
            .map(|&z| {
                let u = point_source_spectrum(&cfg, z);
                let data = u
                    .complex()
                    .expect("complex")
                    .iter()
                    .zip(amplitude.re())
                    .map(|(u, a)| u * a)
                    .collect();
                Tensor::from_complex(u.shape(), data).expect("grid shape")
            })
            .collect();
        let (ch, cw) = cfg.crop_pixels()?;
        let n = cfg.mask_pixels;
        let crop = crate::kernels::pad_crop_window((n, n), (ch, cw), PadMode::CenterCrop)?;
        let taper = taper_mask(ch, cw, cfg.taper_width_px)?;
        Ok(Microscope {
            pool: cfg.pool_factor()?,
            gain: cfg.photon_budget / disc,
            cfg,
            fields,
            taper,
            crop,
        })
    }

    pub fn config(&self) -> &OpticsConfig {
        &self.cfg
    }

    pub fn planes(&self) -> usize {
        self.fields.len()
    }

    pub fn taper(&self) -> &Tensor {
        &self.taper
    }

    /// Number of pupil pixels inside the NA disc.
    pub fn disc_pixels(&self) -> f64 {
        self.cfg.photon_budget / self.gain
    }

    /// `a * exp(i phi)` on the tape.
    pub fn pupil(&self, tape: &mut Tape, phi: Var) -> Result<Var> {
        self.check_phi(tape, phi)?;
        let a = pupil_amplitude(&self.cfg).to_complex();
        let a = tape.constant(a);
        let e = tape.exp_i(phi)?;
        tape.mul(a, e)
    }

    fn check_phi(&self, tape: &Tape, phi: Var) -> Result<()> {
        let n = self.cfg.mask_pixels;
        if tape.shape(phi) != [n, n] {
            return Err(Error::shape(format!(
                "phase mask {:?} does not match the {n}x{n} grid",
                tape.shape(phi)
            )));
        }
        Ok(())
    }

    /// Raw intensity `|F{u_point a exp(i phi)}|^2` for plane `plane`, centred.
    pub fn prf(&self, tape: &mut Tape, phi: Var, plane: usize) -> Result<Var> {
        let e = self.phase_factor(tape, phi)?;
        self.prf_from_phase(tape, e, plane)
    }

    fn phase_factor(&self, tape: &mut Tape, phi: Var) -> Result<Var> {
        self.check_phi(tape, phi)?;
        tape.exp_i(phi)
    }

    fn prf_from_phase(&self, tape: &mut Tape, e: Var, plane: usize) -> Result<Var> {
        let field = self
            .fields
            .get(plane)
            .ok_or_else(|| Error::invalid(format!("no plane {plane}")))?;
        let f = tape.constant(field.clone());
        let u = tape.mul(f, e)?;
        let u = tape.ifftshift2(u)?;
        let u = tape.fft2(u, false)?;
        let u = tape.fftshift2(u)?;
        tape.abs_sq(u)
    }

    /// PSFs for the listed planes: crop, taper, sum-pool, photon scaling.
    /// Returns `[planes.len(), H, W]`.
    pub fn psf_planes(&self, tape: &mut Tape, phi: Var, planes: &[usize]) -> Result<Var> {
        if planes.is_empty() {
            return Err(Error::invalid("no planes requested"));
        }
        let e = self.phase_factor(tape, phi)?;
        let taper = tape.constant(self.taper.clone());
        let mut out = Vec::with_capacity(planes.len());
        for &z in planes {
            let s = self.prf_from_phase(tape, e, z)?;
            let s = tape.window(s, self.crop.clone())?;
            let s = tape.mul(s, taper)?;
            let s = tape.sum_pool2(s, self.pool)?;
            out.push(tape.scale(s, self.gain)?);
        }
        tape.stack(&out)
    }

    pub fn psf_stack(&self, phi: &PhaseMask) -> Result<PsfStack> {
        let all: Vec<usize> = (0..self.planes()).collect();
        self.psf_subset(phi, &all)
    }

    pub fn psf_subset(&self, phi: &PhaseMask, planes: &[usize]) -> Result<PsfStack> {
        let mut tape = Tape::new();
        let p = tape.constant(phi.tensor().clone());
        let s = self.psf_planes(&mut tape, p, planes)?;
        PsfStack::new(tape.value(s).clone())
    }
}

pub fn compute_prf(phi: &PhaseMask, z_um: f64, cfg: &OpticsConfig) -> Result<Tensor> {
    let mut single = cfg.clone();
    single.z_planes_um = vec![z_um];
    let scope = Microscope::new(single)?;
    let mut tape = Tape::new();
    let p = tape.constant(phi.tensor().clone());
    let s = scope.prf(&mut tape, p, 0)?;
    Ok(tape.value(s).clone())
}

pub fn pupil_function(phi: &PhaseMask, cfg: &OpticsConfig) -> Result<Tensor> {
    let scope = Microscope::new(cfg.clone())?;
    let mut tape = Tape::new();
    let p = tape.constant(phi.tensor().clone());
    let u = scope.pupil(&mut tape, p)?;
    Ok(tape.value(u).clone())
}

pub fn compute_psf_stack(phi: &PhaseMask, cfg: &OpticsConfig) -> Result<PsfStack> {
    Microscope::new(cfg.clone())?.psf_stack(phi)
}

/// `mu(x) = sum_z (v_z * s_z)(x)` as a zero-padded linear convolution; a
/// unit voxel at `(Y/2, X/2)` of plane `z` images to exactly `s_z`.
///
/// `s: [Z, H, W]`, `v: [Z, Y, X]`, result `[H, W]`.
pub fn image_on(tape: &mut Tape, s: Var, v: Var) -> Result<Var> {
    let (ss, vs) = (tape.shape(s).to_vec(), tape.shape(v).to_vec());
    if ss.len() != 3 || vs.len() != 3 {
        return Err(Error::shape(format!(
            "imaging expects [Z, H, W] PSFs and [Z, Y, X] volume, got {ss:?} and {vs:?}"
        )));
    }
    if ss[0] != vs[0] {
        return Err(Error::shape(format!(
            "{} PSF planes but {} volume planes",
            ss[0], vs[0]
        )));
    }
    let (h, w, y, x) = (ss[1], ss[2], vs[1], vs[2]);
    let (ph, pw) = (h + y, w + x);
    let place = |hw: (usize, usize)| Window {
        in_hw: hw,
        out_hw: (ph, pw),
        offset: (0, 0),
    };
    let sp = tape.window(s, place((h, w)))?;
    let vp = tape.window(v, place((y, x)))?;
    let sp = tape.to_complex(sp)?;
    let vp = tape.to_complex(vp)?;
    let sf = tape.fft2(sp, false)?;
    let vf = tape.fft2(vp, false)?;
    let prod = tape.mul(sf, vf)?;
    let total = tape.sum_leading(prod)?;
    let full = tape.fft2(total, true)?;
    let full = tape.real_part(full)?;
    let full = tape.scale(full, ((ph * pw) as f64).sqrt())?;
    tape.window(
        full,
        Window {
            in_hw: (ph, pw),
            out_hw: (h, w),
            offset: ((y / 2) as isize, (x / 2) as isize),
        },
    )
}

pub fn image_volume(s: &PsfStack, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.tensor().clone());
    let vv = tape.constant(v.clone());
    let mu = image_on(&mut tape, sv, vv)?;
    // FFT round-off can leave tiny negatives; the model is non-negative
    tape.value(mu).map_real(|m| m.max(0.0))
}

/// Standard normal draws for the noise path, reproducible per seed.
pub fn noise_draws(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn shot_noise_on(tape: &mut Tape, mu: Var, seed: u64) -> Result<Var> {
    let eps = noise_draws(tape.value(mu).len(), seed);
    tape.shot_noise(mu, eps)
}

/// `c = max(mu + sqrt(mu) eps, 0)` with seeded standard normal `eps`.
pub fn apply_shot_noise(mu: &Tensor, seed: u64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let m = tape.constant(mu.clone());
    let c = shot_noise_on(&mut tape, m, seed)?;
    Ok(tape.value(c).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskInit {
    Zeros,
    PencilsHex,
    Helix,
}

impl std::str::FromStr for MaskInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(MaskInit::Zeros),
            "pencils_hex" => Ok(MaskInit::PencilsHex),
            "helix" => Ok(MaskInit::Helix),
            other => Err(Error::invalid(format!("unknown phase mask initializer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskParams {
    /// Lateral distance of each focus from the optical axis, um.
    pub offset_um: f64,
    /// Wedge count for the helix; the hexagonal pattern always uses six.
    pub helix_wedges: usize,
    /// Depth range covered by the foci; defaults to the config's plane span.
    pub depth_range_um: Option<(f64, f64)>,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            offset_um: 2.5,
            helix_wedges: 12,
            depth_range_um: None,
        }
    }
}

/// A focus `(y, x, z)` per wedge; wedge `m` covers pupil angles around `2 pi m / K`.
#[derive(Clone, Debug, PartialEq)]
pub struct WedgeFoci(pub Vec<[f64; 3]>);

impl WedgeFoci {
    pub fn hexagon(cfg: &OpticsConfig, p: &MaskParams) -> Self {
        let (lo, hi) = depth_range(cfg, p);
        // interleaved so neighbouring wedges do not sit at neighbouring depths
        const ORDER: [usize; 6] = [0, 3, 1, 4, 2, 5];
        let foci = (0..6)
            .map(|m| {
                let a = 2.0 * PI * m as f64 / 6.0;
                let z = lo + (hi - lo) * ORDER[m] as f64 / 5.0;
                [p.offset_um * a.sin(), p.offset_um * a.cos(), z]
            })
            .collect();
        WedgeFoci(foci)
    }

    pub fn helix(cfg: &OpticsConfig, p: &MaskParams) -> Self {
        let (lo, hi) = depth_range(cfg, p);
        let k = p.helix_wedges.max(2);
        let foci = (0..k)
            .map(|m| {
                let t = m as f64 / (k - 1) as f64;
                let a = 2.0 * PI * m as f64 / k as f64;
                [p.offset_um * a.sin(), p.offset_um * a.cos(), lo + (hi - lo) * t]
            })
            .collect();
        WedgeFoci(foci)
    }

    /// Tilt plus exact defocus compensation per wedge.
    pub fn mask(&self, cfg: &OpticsConfig) -> Tensor {
        let n = cfg.mask_pixels;
        let k = self.0.len();
        let sector = 2.0 * PI / k as f64;
        let data = frequency_grid(cfg)
            .map(|(ky, kx)| {
                let ang = ky.atan2(kx).rem_euclid(2.0 * PI);
                let m = (((ang + sector / 2.0) / sector).floor() as usize) % k;
                let [y, x, z] = self.0[m];
                let kz = axial(cfg, ky, kx).unwrap_or(0.0);
                2.0 * PI * (ky * y + kx * x) - 2.0 * PI * z * kz
            })
            .collect();
        Tensor::from_real(&[n, n], data).expect("grid shape")
    }
}

fn depth_range(cfg: &OpticsConfig, p: &MaskParams) -> (f64, f64) {
    p.depth_range_um.unwrap_or_else(|| {
        let lo = cfg.z_planes_um.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = cfg.z_planes_um.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    })
}

pub fn init_phase_mask(kind: MaskInit, cfg: &OpticsConfig, params: &MaskParams) -> Result<PhaseMask> {
    let n = cfg.mask_pixels;
    let phi = match kind {
        MaskInit::Zeros => Tensor::zeros(&[n, n]),
        MaskInit::PencilsHex => WedgeFoci::hexagon(cfg, params).mask(cfg),
        MaskInit::Helix => WedgeFoci::helix(cfg, params).mask(cfg),
    };
    PhaseMask::new(phi, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_mask(cfg: &OpticsConfig, seed: u64) -> PhaseMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.mask_pixels;
        PhaseMask::new(Tensor::uniform(&[n, n], -PI, PI, &mut rng), cfg).unwrap()
    }

    fn argmax(t: &Tensor) -> usize {
        t.re()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0
    }

    #[test]
    fn nyquist_examples() {
        let (dx, n) = nyquist_params(0.8, 0.532, 823.0).unwrap();
        assert!((dx - 0.3325).abs() < 1e-12);
        assert_eq!(n, 2476);
        assert_eq!(nyquist_params(0.5, 1.0, 100.0).unwrap(), (1.0, 100));
        assert_eq!(nyquist_params(0.8, 0.532, 832.0).unwrap().1, 2503);
        assert!(nyquist_params(0.0, 0.532, 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        let cfg = OpticsConfig::toy();
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.mask_pixel_um = 0.65;
        bad.camera_pixel_um = 0.65;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = cfg.clone();
        bad.na = 1.4;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.camera_pixel_um = 0.5;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.mask_pixels = 40;
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(OpticsConfig::from_json(&json).unwrap(), cfg);
        assert!(OpticsConfig::from_json(&json.replace("\"na\"", "\"nah\"")).is_err());
    }

    #[test]
    fn point_source_properties() {
        let cfg = OpticsConfig::toy();
        let a = pupil_amplitude(&cfg);
        let u0 = point_source_spectrum(&cfg, 0.0);
        let up = point_source_spectrum(&cfg, 10.0);
        let um = point_source_spectrum(&cfg, -10.0);
        for i in 0..a.len() {
            if a.re()[i] == 1.0 {
                assert_eq!(u0.complex().unwrap()[i], Complex64::new(1.0, 0.0));
                assert!((up.complex().unwrap()[i].norm() - 1.0).abs() < 1e-12);
            }
            assert!((up.complex().unwrap()[i] - um.complex().unwrap()[i].conj()).norm() < 1e-12);
        }
    }

    #[test]
    fn disc_area_matches_analytic() {
        let mut cfg = OpticsConfig::toy();
        cfg.mask_pixels = 256;
        let count = pupil_amplitude(&cfg).sum();
        let r = cfg.na * cfg.mask_pixels as f64 * cfg.mask_pixel_um / cfg.wavelength_um;
        let area = PI * r * r;
        assert!((count - area).abs() / area < 0.02, "{count} vs {area}");
    }

    #[test]
    fn pupil_modulus_is_binary() {
        let cfg = OpticsConfig::toy();
        let p = pupil_function(&random_mask(&cfg, 1), &cfg).unwrap();
        for z in p.complex().unwrap() {
            let m = z.norm();
            assert!(m < 1e-15 || (m - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prf_energy_equals_disc_count() {
        let cfg = OpticsConfig::toy();
        let disc = pupil_amplitude(&cfg).sum();
        for (seed, z) in [(1, 0.0), (2, 3.0), (3, -7.5)] {
            let s = compute_prf(&random_mask(&cfg, seed), z, &cfg).unwrap();
            assert!((s.sum() - disc).abs() / disc < 1e-9);
        }
    }

    #[test]
    fn focus_peak_at_centre() {
        let cfg = OpticsConfig::toy();
        let zero = init_phase_mask(MaskInit::Zeros, &cfg, &MaskParams::default()).unwrap();
        let s = compute_prf(&zero, 0.0, &cfg).unwrap();
        let n = cfg.mask_pixels;
        assert_eq!(argmax(&s), (n / 2) * n + n / 2);
    }

    #[test]
    fn phase_ramp_shifts_prf() {
        let cfg = OpticsConfig::toy();
        let n = cfg.mask_pixels;
        let base = random_mask(&cfg, 4);
        let (sy, sx) = (3.0, -5.0);
        let (y0, x0) = (sy * cfg.mask_pixel_um, sx * cfg.mask_pixel_um);
        let ramp: Vec<f64> = frequency_grid(&cfg)
            .zip(base.tensor().re())
            .map(|((ky, kx), p)| p + 2.0 * PI * (ky * y0 + kx * x0))
            .collect();
        let ramped = PhaseMask::new(Tensor::from_real(&[n, n], ramp).unwrap(), &cfg).unwrap();
        let a = compute_prf(&base, 1.0, &cfg).unwrap();
        let b = compute_prf(&ramped, 1.0, &cfg).unwrap();
        let shifted = crate::kernels::roll2(&a, sy as isize, sx as isize).unwrap();
        assert!(b.max_abs_diff(&shifted).unwrap() < 1e-9 * a.max());
    }

    #[test]
    fn taper_shape() {
        let t = taper_mask(32, 32, 5.0).unwrap();
        assert_eq!(t.re()[0], 0.0);
        assert_eq!(t.re()[31 * 32 + 17], 0.0);
        let big = taper_mask(101, 101, 5.0).unwrap();
        assert!(big.re()[50 * 101 + 50] >= 0.999);
        // monotone along every inward row and column ray
        for i in 0..32 {
            for j in 1..16 {
                assert!(t.re()[i * 32 + j] >= t.re()[i * 32 + j - 1]);
                assert!(t.re()[j * 32 + i] >= t.re()[(j - 1) * 32 + i]);
            }
        }
        assert!(taper_mask(4, 4, 0.0).is_err());
    }

    #[test]
    fn psf_stack_is_finite_and_focused() {
        let mut cfg = OpticsConfig::toy();
        cfg.z_planes_um = (-4..=4).map(|z| 5.0 * z as f64).collect();
        let scope = Microscope::new(cfg.clone()).unwrap();
        let s = scope.psf_stack(&random_mask(&cfg, 9)).unwrap();
        assert!(s.tensor().all_finite() && s.tensor().min() >= 0.0);
        assert_eq!(s.tensor().shape(), &[9, 32, 32]);

        let zero = init_phase_mask(MaskInit::Zeros, &cfg, &MaskParams::default()).unwrap();
        let s = scope.psf_stack(&zero).unwrap();
        let peaks: Vec<f64> = (0..9).map(|z| s.tensor().index0(z).unwrap().max()).collect();
        let best = argmax(&Tensor::from_real(&[9], peaks).unwrap());
        assert_eq!(best, 4);
    }

    #[test]
    fn pooling_conserves_tapered_energy() {
        let mut cfg = OpticsConfig::toy();
        cfg.camera_pixels = [16, 16];
        cfg.camera_pixel_um = 0.65;
        cfg.z_planes_um = vec![1.5];
        let scope = Microscope::new(cfg.clone()).unwrap();
        let phi = random_mask(&cfg, 5);
        let prf = compute_prf(&phi, 1.5, &cfg).unwrap();
        let cropped = pad_crop_window_apply(&prf, 32);
        let tapered: f64 = cropped
            .re()
            .iter()
            .zip(scope.taper().re())
            .map(|(a, b)| a * b)
            .sum();
        let s = scope.psf_stack(&phi).unwrap();
        let expected = tapered * cfg.photon_budget / scope.disc_pixels();
        assert!((s.tensor().sum() - expected).abs() < 1e-12 * expected);
    }

    fn pad_crop_window_apply(t: &Tensor, c: usize) -> Tensor {
        crate::kernels::pad_crop_spatial(t, c, c, PadMode::CenterCrop).unwrap()
    }

    fn loop_image(s: &Tensor, v: &Tensor) -> Tensor {
        let (z, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2]);
        let (y, x) = (v.shape()[1], v.shape()[2]);
        let mut out = vec![0.0; h * w];
        for p in 0..z {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for a in 0..y {
                        for b in 0..x {
                            let si = i as isize + (y / 2) as isize - a as isize;
                            let sj = j as isize + (x / 2) as isize - b as isize;
                            if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                                acc += v.re()[(p * y + a) * x + b]
                                    * s.re()[(p * h + si as usize) * w + sj as usize];
                            }
                        }
                    }
                    out[i * w + j] += acc;
                }
            }
        }
        Tensor::from_real(&[h, w], out).unwrap()
    }

    #[test]
    fn imaging_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Tensor::uniform(&[2, 8, 8], 0.0, 1.0, &mut rng);
        let v = Tensor::uniform(&[2, 8, 8], 0.0, 1.0, &mut rng);
        let got = image_volume(&PsfStack::new(s.clone()).unwrap(), &v).unwrap();
        assert!(got.max_abs_diff(&loop_image(&s, &v)).unwrap() < 1e-10);

        // rectangular planes exercise the offsets
        let s = Tensor::uniform(&[3, 6, 10], 0.0, 1.0, &mut rng);
        let v = Tensor::uniform(&[3, 5, 7], 0.0, 1.0, &mut rng);
        let got = image_volume(&PsfStack::new(s.clone()).unwrap(), &v).unwrap();
        assert!(got.max_abs_diff(&loop_image(&s, &v)).unwrap() < 1e-10);
    }

    #[test]
    fn centred_voxel_images_to_its_psf() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = Tensor::uniform(&[2, 8, 8], 0.0, 1.0, &mut rng);
        let mut v = Tensor::zeros(&[2, 8, 8]);
        v.real_mut().unwrap()[64 + 4 * 8 + 4] = 1.0;
        let mu = image_volume(&PsfStack::new(s.clone()).unwrap(), &v).unwrap();
        assert!(mu.max_abs_diff(&s.index0(1).unwrap()).unwrap() < 1e-12);
        assert!(image_volume(&PsfStack::new(s).unwrap(), &Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn noise_basics() {
        let zero = Tensor::zeros(&[4, 4]);
        assert_eq!(apply_shot_noise(&zero, 1).unwrap(), zero);
        let mu = Tensor::full(&[64], 2.0);
        let a = apply_shot_noise(&mu, 11).unwrap();
        assert_eq!(a, apply_shot_noise(&mu, 11).unwrap());
        assert_ne!(a, apply_shot_noise(&mu, 12).unwrap());
        assert!(a.min() >= 0.0);
        assert!(apply_shot_noise(&Tensor::full(&[2], -1.0), 0).is_err());
    }

    /// Strict 8-neighbour local maxima above `frac` of the global peak, as (row, col).
    fn local_maxima(t: &Tensor, frac: f64) -> Vec<(usize, usize)> {
        let (h, w) = t.hw().unwrap();
        let v = t.re();
        let floor = frac * t.max();
        let mut out = Vec::new();
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                let c = v[i * w + j];
                let is_max = c > floor
                    && (-1..=1).all(|di: isize| {
                        (-1..=1).all(|dj: isize| {
                            (di == 0 && dj == 0)
                                || c > v[(i as isize + di) as usize * w + (j as isize + dj) as usize]
                        })
                    });
                if is_max {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn pencils_split_a_point_into_separated_peaks() {
        let cfg = OpticsConfig::toy();
        let params = MaskParams::default();
        let phi = init_phase_mask(MaskInit::PencilsHex, &cfg, &params).unwrap();
        let s = compute_prf(&phi, 0.0, &cfg).unwrap();
        let peaks = local_maxima(&s, 0.2);
        let sep = params.offset_um / cfg.mask_pixel_um;
        let far_pair = peaks.iter().any(|a| {
            peaks.iter().any(|b| {
                let d = ((a.0 as f64 - b.0 as f64).powi(2) + (a.1 as f64 - b.1 as f64).powi(2)).sqrt();
                d >= sep
            })
        });
        assert!(peaks.len() >= 2 && far_pair, "{peaks:?}");
    }

    #[test]
    fn noise_moments() {
        let n = 100_000;
        let c = apply_shot_noise(&Tensor::full(&[n], 100.0), 2024).unwrap();
        let mean = c.mean();
        let var = c.re().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((99.5..=100.5).contains(&mean), "{mean}");
        assert!((var - 100.0).abs() < 5.0, "{var}");
        let c = apply_shot_noise(&Tensor::full(&[n], 400.0), 7).unwrap();
        let mean = c.mean();
        let var = c.re().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 400.0).abs() < 20.0, "{var}");
    }

    #[test]
    fn hexagon_is_regular() {
        let cfg = OpticsConfig::toy();
        let foci = WedgeFoci::hexagon(&cfg, &MaskParams::default());
        let mut d: Vec<f64> = Vec::new();
        for i in 0..6 {
            for j in i + 1..6 {
                let (a, b) = (foci.0[i], foci.0[j]);
                d.push(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        // a regular hexagon: six sides r, six short diagonals sqrt(3) r, three long 2r
        d.sort_by(f64::total_cmp);
        let r = MaskParams::default().offset_um;
        let expect: Vec<f64> = [(1.0, 6), (3f64.sqrt(), 6), (2.0, 3)]
            .iter()
            .flat_map(|&(f, c)| std::iter::repeat_n(f * r, c))
            .collect();
        for (a, b) in d.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9, "{d:?}");
        }
        for f in &foci.0 {
            assert!((f[0].hypot(f[1]) - r).abs() < 1e-12);
        }
        let zs: Vec<f64> = foci.0.iter().map(|f| f[2]).collect();
        assert!(zs.iter().all(|&z| (-6.0..=6.0).contains(&z)));
        assert!(init_phase_mask(MaskInit::Helix, &cfg, &MaskParams::default()).is_ok());
        assert!("bogus".parse::<MaskInit>().is_err());
    }
}
