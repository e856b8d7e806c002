//! Dataset geometry, synthetic nuclei phantoms and training augmentations.
//!
//! Volumes are real `[Z, Y, X]` tensors.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lateral and axial sampling of the reference volumes, `(z, y, x)` in um.
pub const VOXEL_UM: [f64; 3] = [1.0, 1.625, 1.625];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetName {
    A,
    B,
    C,
    D,
}

impl DatasetName {
    pub const ALL: [DatasetName; 4] = [DatasetName::A, DatasetName::B, DatasetName::C, DatasetName::D];
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(DatasetName::A),
            "B" => Ok(DatasetName::B),
            "C" => Ok(DatasetName::C),
            "D" => Ok(DatasetName::D),
            _ => Err(Error::invalid(format!("unknown dataset type {s:?} (expected A, B, C or D)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub camera_px: [usize; 2],
    pub z_planes: usize,
    pub span_um: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aperture_diameter_um: Option<f64>,
}

pub fn dataset_spec(name: DatasetName) -> DatasetSpec {
    let (camera, planes, span, aperture) = match name {
        DatasetName::A => (512, 12, [25.0, 832.0, 832.0], Some(386.0)),
        DatasetName::B => (512, 128, [250.0, 832.0, 832.0], Some(386.0)),
        DatasetName::C => (512, 128, [250.0, 832.0, 832.0], None),
        DatasetName::D => (256, 96, [200.0, 416.0, 416.0], Some(193.0)),
    };
    DatasetSpec {
        name,
        camera_px: [camera, camera],
        z_planes: planes,
        span_um: span,
        aperture_diameter_um: aperture,
    }
}

impl DatasetSpec {
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(dataset_spec(name.parse()?))
    }

    /// Every extent divided by `divisor`; pixel and plane counts must divide.
    pub fn scaled(&self, divisor: usize) -> Result<Self> {
        if divisor == 0
            || self.camera_px.iter().any(|c| c % divisor != 0)
            || !self.z_planes.is_multiple_of(divisor)
        {
            return Err(Error::invalid(format!(
                "divisor {divisor} does not divide camera {:?} and {} planes",
                self.camera_px, self.z_planes
            )));
        }
        let d = divisor as f64;
        Ok(DatasetSpec {
            name: self.name,
            camera_px: self.camera_px.map(|c| c / divisor),
            z_planes: self.z_planes / divisor,
            span_um: self.span_um.map(|s| s / d),
            aperture_diameter_um: self.aperture_diameter_um.map(|a| a / d),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.camera_px.contains(&0) || self.z_planes == 0 || self.span_um.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("dataset extents must be positive"));
        }
        if let Some(d) = self.aperture_diameter_um {
            if !(d > 0.0) || d > self.span_um[1].min(self.span_um[2]) {
                return Err(Error::config(format!(
                    "aperture {d} um does not fit the lateral span {:?}",
                    &self.span_um[1..]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomParams {
    /// `(Z, Y, X)` voxels.
    pub dims: [usize; 3],
    pub voxel_um: [f64; 3],
    pub nucleus_count: usize,
    pub radius_um: [f64; 2],
    pub intensity: [f64; 2],
    pub background: f64,
    pub seed: u64,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

fn default_retries() -> usize {
    1000
}

impl PhantomParams {
    /// Small dense phantom on a `depth x hw x hw` grid.
    pub fn toy(depth: usize, hw: usize, seed: u64) -> Self {
        PhantomParams {
            dims: [depth, hw, hw],
            voxel_um: [1.0, 1.0, 1.0],
            nucleus_count: (hw * hw * depth / 400).max(1),
            radius_um: [1.5, 3.0],
            intensity: [0.5, 1.0],
            background: 0.0,
            seed,
            max_retries: default_retries(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::config("phantom dimensions must be positive"));
        }
        if self.voxel_um.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::config("voxel sizes must be positive"));
        }
        let vmax = self.voxel_um.iter().cloned().fold(0.0, f64::max);
        let [r0, r1] = self.radius_um;
        if !(r0 >= vmax) || !(r1 >= r0) {
            return Err(Error::config(format!(
                "radius range {:?} must be ordered and at least one voxel ({vmax} um)",
                self.radius_um
            )));
        }
        let [i0, i1] = self.intensity;
        if !(i0 >= 0.0) || !(i1 >= i0) || !(self.background >= 0.0) {
            return Err(Error::config("intensities and background must be non-negative and ordered"));
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Gaussian nuclei (`sigma = radius / 2`) at non-overlapping centres plus a
/// uniform background.
///
/// Nuclei are drawn sequentially from one stream, so with a fixed seed a
/// larger count only appends nuclei.
pub fn generate_phantom(p: &PhantomParams) -> Result<Tensor> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let extent: [f64; 3] = std::array::from_fn(|a| p.dims[a] as f64 * p.voxel_um[a]);
    let mut placed: Vec<([f64; 3], f64, f64)> = Vec::with_capacity(p.nucleus_count);
    for n in 0..p.nucleus_count {
        let r = draw(&mut rng, p.radius_um);
        let amp = draw(&mut rng, p.intensity);
        let mut found = None;
        for _ in 0..p.max_retries.max(1) {
            let c: [f64; 3] = std::array::from_fn(|a| extent[a] * rng.random::<f64>());
            let clear = placed.iter().all(|(q, rq, _)| {
                let d2: f64 = (0..3).map(|a| (c[a] - q[a]).powi(2)).sum();
                d2 >= (r + rq).powi(2)
            });
            if clear {
                found = Some(c);
                break;
            }
        }
        match found {
            Some(c) => placed.push((c, r, amp)),
            None => {
                return Err(Error::invalid(format!(
                    "could not place nucleus {} of {} without overlap after {} tries",
                    n + 1,
                    p.nucleus_count,
                    p.max_retries
                )))
            }
        }
    }

    let [nz, ny, nx] = p.dims;
    let mut out = vec![p.background; nz * ny * nx];
    for (c, r, amp) in &placed {
        let sigma = r / 2.0;
        let reach = 3.0 * sigma;
        // voxel centres sit at (i + 0.5) * voxel
        let range = |a: usize| {
            let lo = ((c[a] - reach) / p.voxel_um[a] - 0.5).floor().max(0.0) as usize;
            let hi = (((c[a] + reach) / p.voxel_um[a] - 0.5).ceil().max(0.0) as usize).min(p.dims[a] - 1);
            lo..=hi
        };
        let g = |a: usize, i: usize| {
            let d = (i as f64 + 0.5) * p.voxel_um[a] - c[a];
            (-d * d / (2.0 * sigma * sigma)).exp()
        };
        for z in range(0) {
            let gz = g(0, z);
            for y in range(1) {
                let gzy = gz * g(1, y);
                for x in range(2) {
                    out[(z * ny + y) * nx + x] += amp * gzy * g(2, x);
                }
            }
        }
    }
    Tensor::from_real(&p.dims, out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentOptions {
    pub flip_z: bool,
    pub flip_y: bool,
    /// Maximum `(pitch, yaw, roll)` in degrees; angles are uniform in `[-max, max]`.
    pub rotate_deg: Option<[f64; 3]>,
    /// Maximum `(z, y, x)` translation in voxels, zero filled.
    pub shift_vox: Option<[usize; 3]>,
    pub brightness_scale: Option<[f64; 2]>,
    pub background_add: Option<[f64; 2]>,
}

impl AugmentOptions {
    pub fn all() -> Self {
        AugmentOptions {
            flip_z: true,
            flip_y: true,
            rotate_deg: Some([10.0, 180.0, 10.0]),
            shift_vox: Some([1, 4, 4]),
            brightness_scale: Some([0.5, 1.5]),
            background_add: Some([0.0, 0.05]),
        }
    }
}

fn dims3(v: &Tensor) -> Result<[usize; 3]> {
    match *v.shape() {
        [z, y, x] => Ok([z, y, x]),
        ref s => Err(Error::shape(format!("expected a [Z, Y, X] volume, got {s:?}"))),
    }
}

pub fn flip_z(v: &Tensor) -> Result<Tensor> {
    let [nz, ny, nx] = dims3(v)?;
    let src = v.real()?;
    let plane = ny * nx;
    let mut out = Vec::with_capacity(src.len());
    for z in (0..nz).rev() {
        out.extend_from_slice(&src[z * plane..(z + 1) * plane]);
    }
    Tensor::from_real(v.shape(), out)
}

pub fn flip_y(v: &Tensor) -> Result<Tensor> {
    let [nz, ny, nx] = dims3(v)?;
    let src = v.real()?;
    let mut out = Vec::with_capacity(src.len());
    for z in 0..nz {
        for y in (0..ny).rev() {
            let o = (z * ny + y) * nx;
            out.extend_from_slice(&src[o..o + nx]);
        }
    }
    Tensor::from_real(v.shape(), out)
}

/// Integer translation with zero fill: `out[p] = v[p - shift]`.
pub fn shift(v: &Tensor, by: [i64; 3]) -> Result<Tensor> {
    let d = dims3(v)?;
    let src = v.real()?;
    let mut out = vec![0.0; src.len()];
    for z in 0..d[0] {
        let sz = z as i64 - by[0];
        if sz < 0 || sz >= d[0] as i64 {
            continue;
        }
        for y in 0..d[1] {
            let sy = y as i64 - by[1];
            if sy < 0 || sy >= d[1] as i64 {
                continue;
            }
            for x in 0..d[2] {
                let sx = x as i64 - by[2];
                if sx >= 0 && sx < d[2] as i64 {
                    out[(z * d[1] + y) * d[2] + x] = src[(sz as usize * d[1] + sy as usize) * d[2] + sx as usize];
                }
            }
        }
    }
    Tensor::from_real(v.shape(), out)
}

fn trilinear(src: &[f64], d: [usize; 3], p: [f64; 3]) -> f64 {
    let mut acc = 0.0;
    let f = p.map(f64::floor);
    let t: [f64; 3] = std::array::from_fn(|a| p[a] - f[a]);
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            let i = f[a] as i64 + hi as i64;
            w *= if hi { t[a] } else { 1.0 - t[a] };
            if i < 0 || i >= d[a] as i64 {
                inside = false;
                break;
            }
            idx[a] = i as usize;
        }
        if inside && w != 0.0 {
            acc += w * src[(idx[0] * d[1] + idx[1]) * d[2] + idx[2]];
        }
    }
    acc
}

/// Rotation about the volume centre in voxel coordinates, trilinear
/// resampling with zero fill. Pitch turns about y, yaw about z, roll about x.
pub fn rotate(v: &Tensor, pitch_rad: f64, yaw_rad: f64, roll_rad: f64) -> Result<Tensor> {
    let d = dims3(v)?;
    let src = v.real()?;
    let (sp, cp) = pitch_rad.sin_cos();
    let (sy, cy) = yaw_rad.sin_cos();
    let (sr, cr) = roll_rad.sin_cos();
    // (z, y, x) component order
    let yaw = [[1.0, 0.0, 0.0], [0.0, cy, -sy], [0.0, sy, cy]];
    let pitch = [[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]];
    let roll = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| -> [[f64; 3]; 3] {
        std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
    };
    let r = mul(yaw, mul(pitch, roll));
    let c: [f64; 3] = d.map(|n| (n as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; src.len()];
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let q = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
                // inverse map: source = c + R^T q
                let p: [f64; 3] = std::array::from_fn(|a| c[a] + (0..3).map(|k| r[k][a] * q[k]).sum::<f64>());
                out[(z * d[1] + y) * d[2] + x] = trilinear(src, d, p).max(0.0);
            }
        }
    }
    Tensor::from_real(v.shape(), out)
}

pub fn scale_brightness(v: &Tensor, alpha: f64) -> Result<Tensor> {
    v.map_real(|x| alpha * x)
}

/// Random augmentation of a non-negative volume. Disabled options draw
/// nothing from `rng`.
pub fn augment<R: Rng + ?Sized>(v: &Tensor, rng: &mut R, opts: &AugmentOptions) -> Result<Tensor> {
    let d = dims3(v)?;
    let mut out = v.clone();
    if opts.flip_z && rng.random::<bool>() {
        out = flip_z(&out)?;
    }
    if opts.flip_y && rng.random::<bool>() {
        out = flip_y(&out)?;
    }
    if let Some(max) = opts.rotate_deg {
        let a = max.map(|m| draw(rng, [-m, m]).to_radians());
        out = rotate(&out, a[0], a[1], a[2])?;
    }
    if let Some(max) = opts.shift_vox {
        let mut by = [0i64; 3];
        for a in 0..3 {
            let m = max[a].min(d[a].saturating_sub(1)) as i64;
            by[a] = rng.random_range(-m..=m);
        }
        out = shift(&out, by)?;
    }
    if let Some(range) = opts.brightness_scale {
        out = scale_brightness(&out, draw(rng, range).max(0.0))?;
    }
    if let Some(range) = opts.background_add {
        let b = draw(rng, range).max(0.0);
        out = out.map_real(|x| x + b)?;
    }
    out.map_real(|x| x.max(0.0))
}

/// Zero every voxel outside a centred cylinder with axis along z, or outside
/// a centred slab of the given height when `diameter_um` is `None`.
pub fn aperture_cutout(
    v: &Tensor,
    diameter_um: Option<f64>,
    height_um: f64,
    voxel_um: [f64; 3],
) -> Result<Tensor> {
    let d = dims3(v)?;
    let extent: [f64; 3] = std::array::from_fn(|a| d[a] as f64 * voxel_um[a]);
    if !(height_um > 0.0) || height_um > extent[0] * (1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "height {height_um} um exceeds the {} um volume depth",
            extent[0]
        )));
    }
    if let Some(dia) = diameter_um {
        if !(dia > 0.0) || dia > extent[1].min(extent[2]) * (1.0 + 1e-12) {
            return Err(Error::invalid(format!(
                "diameter {dia} um exceeds the lateral extent {:?}",
                &extent[1..]
            )));
        }
    }
    let c: [f64; 3] = d.map(|n| (n as f64 - 1.0) / 2.0);
    let half_h = height_um / 2.0;
    let r2 = diameter_um.map(|dia| (dia / 2.0).powi(2));
    let mut out = v.real()?.to_vec();
    for z in 0..d[0] {
        let z_in = ((z as f64 - c[0]) * voxel_um[0]).abs() <= half_h;
        for y in 0..d[1] {
            let dy = (y as f64 - c[1]) * voxel_um[1];
            for x in 0..d[2] {
                let dx = (x as f64 - c[2]) * voxel_um[2];
                let keep = z_in && r2.is_none_or(|r2| dy * dy + dx * dx <= r2);
                if !keep {
                    out[(z * d[1] + y) * d[2] + x] = 0.0;
                }
            }
        }
    }
    Tensor::from_real(v.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_rows() {
        let rows = [
            (DatasetName::A, 512, 12, [25.0, 832.0, 832.0], Some(386.0)),
            (DatasetName::B, 512, 128, [250.0, 832.0, 832.0], Some(386.0)),
            (DatasetName::C, 512, 128, [250.0, 832.0, 832.0], None),
            (DatasetName::D, 256, 96, [200.0, 416.0, 416.0], Some(193.0)),
        ];
        for (name, cam, planes, span, ap) in rows {
            let s = dataset_spec(name);
            assert_eq!(s.camera_px, [cam, cam]);
            assert_eq!(s.z_planes, planes);
            assert_eq!(s.span_um, span);
            assert_eq!(s.aperture_diameter_um, ap);
            s.validate().unwrap();
        }
        let json = serde_json::to_string(&dataset_spec(DatasetName::C)).unwrap();
        assert!(!json.contains("aperture"));
        assert!(DatasetSpec::by_name("E").is_err());
    }

    #[test]
    fn scaled_preserves_ratios() {
        let d = dataset_spec(DatasetName::D);
        let s = d.scaled(8).unwrap();
        assert_eq!(s.camera_px, [32, 32]);
        assert_eq!(s.z_planes, 12);
        assert_eq!(s.aperture_diameter_um.unwrap() / s.span_um[1], 193.0 / 416.0);
        assert!(d.scaled(5).is_err());
    }

    #[test]
    fn empty_phantom_is_zero() {
        let mut p = PhantomParams::toy(4, 16, 1);
        p.nucleus_count = 0;
        assert_eq!(generate_phantom(&p).unwrap(), Tensor::zeros(&[4, 16, 16]));
    }

    #[test]
    fn phantom_mass_grows_with_count() {
        let mut p = PhantomParams::toy(8, 24, 3);
        let mut last = 0.0;
        for n in 1..=10 {
            p.nucleus_count = n;
            let v = generate_phantom(&p).unwrap();
            assert!(v.sum() > last, "count {n}");
            last = v.sum();
        }
        assert_eq!(generate_phantom(&p).unwrap(), generate_phantom(&p).unwrap());
    }

    #[test]
    fn overcrowded_phantom_errors() {
        let mut p = PhantomParams::toy(4, 8, 0);
        p.nucleus_count = 50;
        p.max_retries = 20;
        assert!(generate_phantom(&p).is_err());
        p.radius_um = [0.5, 1.0];
        assert!(matches!(generate_phantom(&p), Err(Error::Config(_))));
    }

    #[test]
    fn augment_identities() {
        let v = generate_phantom(&PhantomParams::toy(6, 16, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&v, &mut rng, &AugmentOptions::default()).unwrap(), v);
        assert_eq!(flip_z(&flip_z(&v).unwrap()).unwrap(), v);
        assert_eq!(flip_y(&flip_y(&v).unwrap()).unwrap(), v);
        let s = scale_brightness(&v, 1.7).unwrap();
        assert!((s.sum() - 1.7 * v.sum()).abs() < 1e-12 * v.sum());
        let r = rotate(&v, 0.0, 0.0, 0.0).unwrap();
        assert!(r.max_abs_diff(&v).unwrap() < 1e-12);
        // quarter turn in yaw on a square plane is an exact permutation
        let q = rotate(&v, 0.0, std::f64::consts::FRAC_PI_2, 0.0).unwrap();
        assert!((q.sum() - v.sum()).abs() < 1e-9 * v.sum());
    }

    #[test]
    fn cylinder_voxel_count() {
        let v = Tensor::ones(&[64, 64, 64]);
        let (dia, h) = (48.0, 40.0);
        let c = aperture_cutout(&v, Some(dia), h, [1.0; 3]).unwrap();
        let expect = std::f64::consts::PI * (dia / 2.0) * (dia / 2.0) * h;
        assert!((c.sum() - expect).abs() / expect < 0.02, "{} vs {expect}", c.sum());
        assert_eq!(c.re()[(32 * 64 + 32) * 64 + 32], 1.0);

        let full = aperture_cutout(&v, Some(64.0), 64.0, [1.0; 3]).unwrap();
        assert_eq!(full.re()[0], 0.0);
        assert_eq!(full.re()[(32 * 64 + 32) * 64], 1.0);
        assert!(aperture_cutout(&v, Some(65.0), 10.0, [1.0; 3]).is_err());
        assert!(aperture_cutout(&v, None, 65.0, [1.0; 3]).is_err());
        let slab = aperture_cutout(&v, None, 10.0, [1.0; 3]).unwrap();
        assert_eq!(slab.sum(), 10.0 * 64.0 * 64.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn pipeline_non_negative_and_deterministic(seed in 0u64..1000) {
            let run = || {
                let v = generate_phantom(&PhantomParams::toy(6, 16, seed)).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5);
                let a = augment(&v, &mut rng, &AugmentOptions::all()).unwrap();
                aperture_cutout(&a, Some(14.0), 4.0, [1.0; 3]).unwrap()
            };
            let out = run();
            prop_assert!(out.re().iter().all(|x| *x >= 0.0));
            prop_assert_eq!(out, run());
        }
    }
}
