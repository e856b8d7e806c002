//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use foe_core::data::generate_phantom;
use foe_core::fourier::fourier_conv2d;
use foe_core::gradcheck::GradcheckConfig;
use foe_core::io::{read_tensor, write_tensor};
use foe_core::kernels::conv_forward;
use foe_core::metrics::metrics_eval;
use foe_core::network::Network;
use foe_core::optics::{apply_shot_noise, image_volume, init_phase_mask, Microscope, PhaseMask};
use foe_core::train::{train, Decoder, PhantomDataset, TrainMode};
use foe_core::verify::run_suite;
use foe_core::{Tape, Tensor};

use crate::config::{Experiment, Overrides};
use crate::preview::write_mip;
use crate::{Command, Common, MaskSource};

/// A check ran to completion and failed.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// 2 for numerical failures (NaN, failed checks), 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        c.downcast_ref::<CheckFailed>().is_some()
            || c.downcast_ref::<foe_core::Error>().is_some_and(foe_core::Error::is_numerical)
    });
    if numerical {
        2
    } else {
        1
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Psf { common, mask } => psf(&common, &mask),
        Command::Simulate { common, mask, volume } => simulate(&common, &mask, volume.as_deref()),
        Command::TrainEncoder { common, mask, iters } => train_cmd(&common, &mask, iters, TrainMode::Joint),
        Command::TrainDecoder { common, mask, iters } => train_cmd(&common, &mask, iters, TrainMode::DecoderOnly),
        Command::Reconstruct { checkpoint, image, out } => reconstruct(&checkpoint, &image, &out),
        Command::Eval { truth, recon, out } => eval(&truth, &recon, out.as_deref()),
        Command::Gradcheck { seed, filter, tolerance, out } => gradcheck(seed, filter.as_deref(), tolerance, out.as_deref()),
        Command::Bench { sizes, reps } => bench(&sizes, reps),
        Command::Phantom { common } => phantom(&common),
    }
}

#[derive(Clone, Copy)]
enum Needs {
    Optics,
    Imaging,
    Everything,
}

fn experiment(common: &Common, iters: Option<usize>, needs: Needs) -> Result<Experiment> {
    let o = Overrides {
        preset: common.preset,
        seed: common.seed,
        workers: common.workers,
        iters,
    };
    let e = Experiment::resolve(common.config.as_deref(), &o)?;
    match needs {
        Needs::Optics => e.validate_optics()?,
        Needs::Imaging => e.validate_imaging()?,
        Needs::Everything => e.validate()?,
    }
    Ok(e)
}

fn out_dir(dir: &Path) -> Result<&Path> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load(path: &Path) -> Result<Tensor> {
    read_tensor(path).with_context(|| format!("reading {}", path.display()))
}

fn save(path: PathBuf, t: &Tensor) -> Result<()> {
    write_tensor(&path, t).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn phase_mask(e: &Experiment, src: &MaskSource) -> Result<PhaseMask> {
    Ok(match (&src.phi, src.init) {
        (Some(path), _) => PhaseMask::new(load(path)?, &e.optics)?,
        (None, init) => init_phase_mask(init.unwrap_or(foe_core::optics::MaskInit::Zeros), &e.optics, &e.mask)?,
    })
}

fn psf(common: &Common, src: &MaskSource) -> Result<()> {
    let e = experiment(common, None, Needs::Optics)?;
    let scope = Microscope::new(e.optics.clone())?;
    let phi = phase_mask(&e, src)?;
    let s = scope.psf_stack(&phi)?;
    let out = out_dir(&common.out)?;
    save(out.join("psf.fot"), s.tensor())?;
    save(out.join("phi.fot"), phi.tensor())?;
    write_mip(&out.join("psf_mip.pgm"), s.tensor())?;
    let (h, w) = s.tensor().hw()?;
    let plane_peaks: Vec<f64> = s
        .tensor()
        .re()
        .chunks_exact(h * w)
        .map(|p| p.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    println!("{}", serde_json::json!({ "planes": s.planes(), "peaks": plane_peaks }));
    Ok(())
}

fn volume_or_phantom(e: &Experiment, path: Option<&Path>) -> Result<Tensor> {
    match path {
        Some(p) => load(p),
        None => Ok(generate_phantom(&e.phantom)?),
    }
}

fn simulate(common: &Common, src: &MaskSource, volume: Option<&Path>) -> Result<()> {
    let e = experiment(common, None, if volume.is_some() { Needs::Optics } else { Needs::Imaging })?;
    let scope = Microscope::new(e.optics.clone())?;
    let phi = phase_mask(&e, src)?;
    let v = volume_or_phantom(&e, volume)?;
    let s = scope.psf_stack(&phi)?;
    let mu = image_volume(&s, &v)?;
    let c = apply_shot_noise(&mu, e.train.seed)?;
    let out = out_dir(&common.out)?;
    save(out.join("camera.fot"), &c)?;
    if volume.is_none() {
        save(out.join("volume.fot"), &v)?;
    }
    write_mip(&out.join("camera.pgm"), &c)
}

fn phantom(common: &Common) -> Result<()> {
    let e = experiment(common, None, Needs::Imaging)?;
    let mut v = generate_phantom(&e.phantom)?;
    if let Some(c) = &e.cutout {
        v = foe_core::data::aperture_cutout(&v, c.diameter_um, c.height_um, c.voxel_um)?;
    }
    let out = out_dir(&common.out)?;
    save(out.join("phantom.fot"), &v)?;
    write_mip(&out.join("phantom_mip.pgm"), &v)
}

// ---- decoder checkpoints -------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DecoderKind {
    Volume,
    Planewise,
}

#[derive(Serialize, Deserialize)]
struct DecoderManifest {
    kind: DecoderKind,
    networks: usize,
}

fn save_decoder(dir: &Path, d: &Decoder) -> Result<()> {
    fs::create_dir_all(dir)?;
    let kind = match d {
        Decoder::Volume(_) => DecoderKind::Volume,
        Decoder::Planewise(_) => DecoderKind::Planewise,
    };
    let nets = d.networks();
    let m = DecoderManifest { kind, networks: nets.len() };
    fs::write(dir.join("decoder.json"), serde_json::to_string_pretty(&m)?)?;
    for (i, n) in nets.iter().enumerate() {
        n.save(dir.join(format!("net{i}")))?;
    }
    Ok(())
}

fn load_decoder(dir: &Path) -> Result<Decoder> {
    let text = fs::read_to_string(dir.join("decoder.json"))
        .with_context(|| format!("no decoder checkpoint in {}", dir.display()))?;
    let m: DecoderManifest = serde_json::from_str(&text)?;
    let nets = (0..m.networks)
        .map(|i| Network::load(dir.join(format!("net{i}"))))
        .collect::<foe_core::Result<Vec<_>>>()?;
    Ok(match m.kind {
        DecoderKind::Volume => match <[Network; 1]>::try_from(nets) {
            Ok([n]) => Decoder::Volume(n),
            Err(_) => bail!("a volume decoder holds exactly one network"),
        },
        DecoderKind::Planewise => Decoder::Planewise(nets),
    })
}

fn train_cmd(common: &Common, src: &MaskSource, iters: Option<usize>, mode: TrainMode) -> Result<()> {
    let mut e = experiment(common, iters, Needs::Everything)?;
    e.train.mode = mode;
    let scope = Microscope::new(e.optics.clone())?;
    let phi = phase_mask(&e, src)?;
    let mut data = PhantomDataset::generate(&e.phantom, e.dataset_size, e.augment.clone())?;
    data.cutout = e.cutout;
    let mut rng = ChaCha8Rng::seed_from_u64(e.train.seed);
    let decoder = e.decoder.build(e.optics.z_planes_um.len(), &mut rng)?;
    let out = out_dir(&common.out)?;
    fs::write(out.join("experiment.json"), serde_json::to_string_pretty(&e)?)?;
    let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let result = train(&scope, phi, decoder, &data, &e.train, Some(&mut log));
    log.flush()?;
    let outcome = result?;
    save(out.join("phi.fot"), outcome.phi.tensor())?;
    let s = scope.psf_stack(&outcome.phi)?;
    save(out.join("psf.fot"), s.tensor())?;
    write_mip(&out.join("psf_mip.pgm"), s.tensor())?;
    save_decoder(&out.join("decoder"), &outcome.decoder)?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!(
            "{}",
            serde_json::json!({ "iterations": outcome.log.len(), "first_loss": first.loss, "last_loss": last.loss })
        );
    }
    Ok(())
}

fn reconstruct(checkpoint: &Path, image: &Path, out: &Path) -> Result<()> {
    let decoder = load_decoder(&checkpoint.join("decoder"))?;
    let c = load(image)?;
    let v = decoder.reconstruct(&c)?;
    if !v.all_finite() {
        return Err(foe_core::Error::Numerical("reconstruction is not finite".into()).into());
    }
    let out = out_dir(out)?;
    save(out.join("recon.fot"), &v)?;
    write_mip(&out.join("recon_mip.pgm"), &v)
}

fn eval(truth: &Path, recon: &Path, out: Option<&Path>) -> Result<()> {
    let m = metrics_eval(&load(truth)?, &load(recon)?)?;
    let text = serde_json::to_string(&m)?;
    println!("{text}");
    if let Some(dir) = out {
        fs::write(out_dir(dir)?.join("metrics.json"), &text)?;
    }
    Ok(())
}

fn gradcheck(seed: u64, filter: Option<&str>, tolerance: f64, out: Option<&Path>) -> Result<()> {
    let cfg = GradcheckConfig {
        tolerance,
        ..GradcheckConfig::default()
    };
    let reports = run_suite(seed, cfg, filter)?;
    if reports.is_empty() {
        bail!("no check matches {filter:?}");
    }
    for r in &reports {
        let tag = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<28} {tag:<4} worst rel err {:.2e}", r.name, r.worst());
    }
    if let Some(dir) = out {
        fs::write(out_dir(dir)?.join("gradcheck.json"), serde_json::to_string_pretty(&reports)?)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CheckFailed(format!("gradient checks failed: {}", failed.join(", "))).into())
    }
}

fn median_time(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<Duration> {
    f()?;
    let mut t = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let s = Instant::now();
        f()?;
        t.push(s.elapsed());
    }
    t.sort();
    Ok(t[t.len() / 2])
}

fn bench(sizes: &[usize], reps: usize) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("{:>6} {:>14} {:>14} {:>9}", "size", "fourier_ms", "direct_ms", "speedup");
    for &n in sizes {
        if n < 2 {
            bail!("bench sizes must be at least 2");
        }
        let x = Tensor::randn(&[1, n, n], 1.0, &mut rng);
        let w = Tensor::complex_randn(&[1, 1, 2 * n, 2 * n], 1.0, &mut rng);
        let fourier = median_time(reps, || {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
            fourier_conv2d(&mut tape, xv, wv, None)?;
            Ok(())
        })?;
        // largest odd kernel that fits: a global receptive field
        let k = (n - 1) | 1;
        let kernel = Tensor::randn(&[1, 1, 1, k, k], 1.0, &mut rng);
        let x4 = x.reshape(&[1, 1, n, n])?;
        let direct = median_time(reps, || {
            conv_forward(&x4, &kernel, None)?;
            Ok(())
        })?;
        println!(
            "{n:>6} {:>14.3} {:>14.3} {:>8.1}x",
            fourier.as_secs_f64() * 1e3,
            direct.as_secs_f64() * 1e3,
            direct.as_secs_f64() / fourier.as_secs_f64()
        );
    }
    Ok(())
}
