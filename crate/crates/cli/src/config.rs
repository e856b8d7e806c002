//! Experiment configuration: a named preset, optionally overridden section by
//! section from a JSON file, then by command-line flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use rand::Rng;
use serde::{Deserialize, Serialize};

use foe_core::data::{dataset_spec, AugmentOptions, DatasetName, PhantomParams};
use foe_core::network::{build_network, fouriernet2d, planes_head, with_input_scale, NetworkSpec};
use foe_core::optics::{MaskParams, OpticsConfig};
use foe_core::train::{Cutout, Decoder, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Preset {
    #[value(name = "A")]
    A,
    #[value(name = "B")]
    B,
    #[value(name = "C")]
    C,
    #[value(name = "D")]
    D,
    #[default]
    #[value(name = "toy")]
    #[serde(rename = "toy")]
    Toy,
}

/// How camera images are decoded into volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderSpec {
    /// One network emitting every plane.
    Volume { network: NetworkSpec },
    /// An independent single-plane network per depth plane.
    Planewise { network: NetworkSpec },
}

impl DecoderSpec {
    pub fn build<R: Rng + ?Sized>(&self, planes: usize, rng: &mut R) -> foe_core::Result<Decoder> {
        Ok(match self {
            DecoderSpec::Volume { network } => Decoder::Volume(build_network(network, rng)?),
            DecoderSpec::Planewise { network } => Decoder::Planewise(
                (0..planes)
                    .map(|_| build_network(network, rng))
                    .collect::<foe_core::Result<_>>()?,
            ),
        })
    }
}

/// On-disk form: every section optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<Preset>,
    pub optics: Option<OpticsConfig>,
    pub mask: Option<MaskParams>,
    pub phantom: Option<PhantomParams>,
    pub dataset_size: Option<usize>,
    pub augment: Option<AugmentOptions>,
    pub cutout: Option<Cutout>,
    pub decoder: Option<DecoderSpec>,
    pub train: Option<TrainConfig>,
}

/// Fully resolved experiment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Experiment {
    pub preset: Preset,
    pub optics: OpticsConfig,
    pub mask: MaskParams,
    pub phantom: PhantomParams,
    pub dataset_size: usize,
    pub augment: AugmentOptions,
    /// Applied to every phantom after augmentation.
    pub cutout: Option<Cutout>,
    pub decoder: DecoderSpec,
    pub train: TrainConfig,
}

/// Flag values that win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub iters: Option<usize>,
}

const TOY_HW: usize = 16;
const TOY_PLANES: usize = 4;

fn toy() -> Experiment {
    let optics = OpticsConfig {
        mask_pixels: 2 * TOY_HW,
        camera_pixels: [TOY_HW, TOY_HW],
        z_planes_um: vec![-3.0, -1.0, 1.0, 3.0],
        taper_width_px: 2.0,
        ..OpticsConfig::toy()
    };
    let mut phantom = PhantomParams::toy(TOY_PLANES, TOY_HW, 0);
    phantom.nucleus_count = 4;
    phantom.radius_um = [2.5, 4.0];
    let net = planes_head(fouriernet2d(TOY_HW, 8, 5), TOY_PLANES).expect("toy head fits");
    Experiment {
        preset: Preset::Toy,
        optics,
        mask: MaskParams::default(),
        phantom,
        dataset_size: 8,
        augment: AugmentOptions {
            flip_z: true,
            flip_y: true,
            ..AugmentOptions::default()
        },
        cutout: None,
        // matched to the median camera count at a 1000-photon budget
        decoder: DecoderSpec::Volume {
            network: with_input_scale(net, 3000.0),
        },
        train: TrainConfig {
            lr_theta: 3e-2,
            iterations: 300,
            ..TrainConfig::default()
        },
    }
}

/// Geometry of one of the reference dataset types at full size.
fn dataset(name: DatasetName) -> Experiment {
    let spec = dataset_spec(name);
    let [cam, _] = spec.camera_px;
    let planes = spec.z_planes;
    let pixel = spec.span_um[1] / cam as f64;
    // mask sampled five times finer than the camera, at or below Nyquist
    let mask_pixel = pixel / 5.0;
    let crop = cam * 5;
    let mut n = (1.5 * crop as f64).ceil() as usize;
    n += (n - crop) % 2;
    let dz = spec.span_um[0] / planes as f64;
    let z = (0..planes)
        .map(|i| -spec.span_um[0] / 2.0 + (i as f64 + 0.5) * dz)
        .collect();
    let optics = OpticsConfig {
        mask_pixels: n,
        mask_pixel_um: mask_pixel,
        camera_pixels: spec.camera_px,
        camera_pixel_um: pixel,
        z_planes_um: z,
        taper_width_px: 5.0,
        ..OpticsConfig::toy()
    };
    let volume_um3: f64 = spec.span_um.iter().product();
    let phantom = PhantomParams {
        dims: [planes, cam, cam],
        voxel_um: [dz, pixel, pixel],
        // about one nucleus per (20 um)^3
        nucleus_count: (volume_um3 / 8000.0).ceil() as usize,
        radius_um: [dz.max(pixel).max(2.5), dz.max(pixel).max(2.5) + 1.5],
        intensity: [0.5, 1.0],
        background: 0.0,
        seed: 0,
        max_retries: 1000,
    };
    let net = planes_head(fouriernet2d(cam, 8, 11), planes).expect("head fits");
    Experiment {
        preset: match name {
            DatasetName::A => Preset::A,
            DatasetName::B => Preset::B,
            DatasetName::C => Preset::C,
            DatasetName::D => Preset::D,
        },
        optics,
        mask: MaskParams::default(),
        phantom,
        dataset_size: 8,
        augment: AugmentOptions::all(),
        cutout: Some(Cutout {
            diameter_um: spec.aperture_diameter_um,
            height_um: spec.span_um[0],
            voxel_um: [dz, pixel, pixel],
        }),
        decoder: DecoderSpec::Volume { network: net },
        train: TrainConfig::default(),
    }
}

impl Experiment {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Toy => toy(),
            Preset::A => dataset(DatasetName::A),
            Preset::B => dataset(DatasetName::B),
            Preset::C => dataset(DatasetName::C),
            Preset::D => dataset(DatasetName::D),
        }
    }

    /// Preset, then file sections, then flags. Validation is left to the
    /// caller, which knows which sections it uses.
    pub fn resolve(file: Option<&Path>, o: &Overrides) -> Result<Self> {
        let f: ConfigFile = match file {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => ConfigFile::default(),
        };
        let mut e = Experiment::preset(o.preset.or(f.preset).unwrap_or_default());
        if let Some(v) = f.optics {
            e.optics = v;
        }
        if let Some(v) = f.mask {
            e.mask = v;
        }
        if let Some(v) = f.phantom {
            e.phantom = v;
        }
        if let Some(v) = f.dataset_size {
            e.dataset_size = v;
        }
        if let Some(v) = f.augment {
            e.augment = v;
        }
        if f.cutout.is_some() {
            e.cutout = f.cutout;
        }
        if let Some(v) = f.decoder {
            e.decoder = v;
        }
        if let Some(v) = f.train {
            e.train = v;
        }
        if let Some(s) = o.seed {
            e.train.seed = s;
            e.phantom.seed = s;
        }
        if let Some(w) = o.workers {
            e.train.workers = w;
        }
        if let Some(n) = o.iters {
            e.train.iterations = n;
        }
        Ok(e)
    }

    /// Optics and phase-mask sections.
    pub fn validate_optics(&self) -> Result<()> {
        self.optics.validate()?;
        if self.mask.offset_um.is_nan() || self.mask.offset_um < 0.0 || self.mask.helix_wedges == 0 {
            bail!("mask offset must be non-negative and the helix needs wedges");
        }
        Ok(())
    }

    /// Optics plus a phantom that fits the camera and plane count.
    pub fn validate_imaging(&self) -> Result<()> {
        self.validate_optics()?;
        self.phantom.validate()?;
        let planes = self.optics.z_planes_um.len();
        let [h, w] = self.optics.camera_pixels;
        if self.phantom.dims != [planes, h, w] {
            bail!(
                "phantom dims {:?} do not match {planes} planes on a {h}x{w} camera",
                self.phantom.dims
            );
        }
        Ok(())
    }

    /// Every section.
    pub fn validate(&self) -> Result<()> {
        self.validate_imaging()?;
        self.train.validate()?;
        let planes = self.optics.z_planes_um.len();
        let [h, w] = self.optics.camera_pixels;
        if self.dataset_size == 0 {
            bail!("dataset_size must be positive");
        }
        let net = match &self.decoder {
            DecoderSpec::Volume { network } | DecoderSpec::Planewise { network } => network,
        };
        let depth = net.output_depth()?;
        let want = match self.decoder {
            DecoderSpec::Volume { .. } => planes,
            DecoderSpec::Planewise { .. } => 1,
        };
        if net.input_hw != [h, w] || depth != want {
            bail!(
                "decoder network takes {:?} and emits {depth} planes; expected {h}x{w} and {want}",
                net.input_hw
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for p in [Preset::Toy, Preset::A, Preset::B, Preset::C, Preset::D] {
            let e = Experiment::preset(p);
            e.validate().unwrap_or_else(|err| panic!("{p:?}: {err:#}"));
            assert!(e.optics.mask_pixel_um <= e.optics.nyquist_pixel_um() + 1e-12);
        }
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"preset": "toy", "train": {"iterations": 5, "seed": 1}}"#).unwrap();
        let o = Overrides {
            seed: Some(9),
            ..Overrides::default()
        };
        let e = Experiment::resolve(Some(&path), &o).unwrap();
        e.validate().unwrap();
        assert_eq!(e.train.iterations, 5);
        assert_eq!(e.train.seed, 9);
        assert_eq!(e.phantom.seed, 9);
        fs::write(&path, r#"{"bogus": 1}"#).unwrap();
        assert!(Experiment::resolve(Some(&path), &o).is_err());
        fs::write(&path, r#"{"phantom": {"dims": [2, 16, 16], "voxel_um": [1, 1, 1], "nucleus_count": 1,
            "radius_um": [1, 2], "intensity": [0.5, 1], "background": 0, "seed": 0}}"#).unwrap();
        let e = Experiment::resolve(Some(&path), &o).unwrap();
        e.validate_optics().unwrap();
        assert!(e.validate_imaging().is_err());
    }
}
