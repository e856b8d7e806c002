//! Plane sharding, sharded imaging / reconstruction, and the joint and
//! decoder-only training loops.
//!
//! Workers are scoped threads that each own a private tape. The orchestrator
//! sums partial images and per-chunk results in a fixed order, so a run is
//! reproducible for a given `(seed, workers)`. Joint training backpropagates
//! in two stages: reconstruction workers return `dL/dc`, the orchestrator
//! pulls it through the noise model, and imaging workers finish the sweep
//! down to the phase mask with `backward_from`.

use std::io::Write;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{aperture_cutout, augment, generate_phantom, AugmentOptions, PhantomParams};
use crate::error::{Error, Result};
use crate::loss::{loss_on, LossConfig, Normalizers};
use crate::network::Network;
use crate::optics::{image_on, noise_draws, Microscope, PhaseMask, PsfStack};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

// ---- plane selection -----------------------------------------------------

/// Which planes are imaged with and without gradients, which are
/// reconstructed, and how each set is split across workers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub worker_count: usize,
    pub z_gradient: Vec<usize>,
    pub z_no_gradient: Vec<usize>,
    pub z_reconstruct: Vec<usize>,
    pub gradient_chunks: Vec<Vec<usize>>,
    pub no_gradient_chunks: Vec<Vec<usize>>,
    pub reconstruct_chunks: Vec<Vec<usize>>,
}

/// Round-robin split into `min(workers, len)` non-empty chunks.
pub fn chunk_round_robin(set: &[usize], workers: usize) -> Vec<Vec<usize>> {
    let k = workers.min(set.len());
    (0..k).map(|j| set.iter().skip(j).step_by(k).copied().collect()).collect()
}

/// Round-robin split into the largest number of equal chunks not above
/// `workers`.
pub fn chunk_equal(set: &[usize], workers: usize) -> Vec<Vec<usize>> {
    let k = (1..=workers.min(set.len()))
        .rev()
        .find(|k| set.len().is_multiple_of(*k))
        .unwrap_or(0);
    chunk_round_robin(set, k)
}

fn sample_sorted<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], n: usize) -> Vec<usize> {
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

/// Uniform draw of `n_grad` gradient planes (the rest are imaged without
/// gradients) and an independent draw of `n_recon` planes to reconstruct.
pub fn select_planes<R: Rng + ?Sized>(
    all_z: &[usize],
    n_grad: usize,
    n_recon: usize,
    workers: usize,
    rng: &mut R,
) -> Result<ShardPlan> {
    if workers == 0 {
        return Err(Error::invalid("need at least one worker"));
    }
    let mut sorted = all_z.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != all_z.len() || all_z.is_empty() {
        return Err(Error::invalid("plane list must be non-empty without repeats"));
    }
    if n_grad > all_z.len() {
        return Err(Error::invalid(format!(
            "{n_grad} gradient planes requested from {}",
            all_z.len()
        )));
    }
    if n_recon == 0 || n_recon > all_z.len() {
        return Err(Error::invalid(format!(
            "{n_recon} reconstruction planes requested from {}",
            all_z.len()
        )));
    }
    let z_gradient = sample_sorted(rng, &sorted, n_grad);
    let z_no_gradient: Vec<usize> = sorted.iter().copied().filter(|z| !z_gradient.contains(z)).collect();
    let z_reconstruct = sample_sorted(rng, &sorted, n_recon);
    Ok(ShardPlan {
        worker_count: workers,
        gradient_chunks: chunk_round_robin(&z_gradient, workers),
        no_gradient_chunks: chunk_round_robin(&z_no_gradient, workers),
        reconstruct_chunks: chunk_equal(&z_reconstruct, workers),
        z_gradient,
        z_no_gradient,
        z_reconstruct,
    })
}

/// Planes `planes` of a `[Z, ...]` tensor, stacked.
pub fn gather_planes(v: &Tensor, planes: &[usize]) -> Result<Tensor> {
    let parts = planes.iter().map(|&z| v.index0(z)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

fn run_parallel<T: Send, R: Send>(jobs: Vec<T>, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    if jobs.len() <= 1 {
        return jobs.into_iter().map(f).collect();
    }
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs.into_iter().map(|j| s.spawn(move || f(j))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
            .collect()
    })
}

fn sum_in_order(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::invalid("nothing to sum"))?;
    let mut acc = first.real()?.to_vec();
    for p in &parts[1..] {
        if p.shape() != first.shape() {
            return Err(Error::shape(format!("partial {:?} vs {:?}", p.shape(), first.shape())));
        }
        acc.iter_mut().zip(p.real()?).for_each(|(a, b)| *a += b);
    }
    Tensor::from_real(first.shape(), acc)
}

// ---- sharded imaging -----------------------------------------------------

/// Sum of per-worker partial images `sum_j image(s_j, v_j)`; chunk `j` holds
/// matching PSF `[k_j, H, W]` and sample `[k_j, Y, X]` planes.
pub fn sharded_image(psf_chunks: &[Tensor], volume_chunks: &[Tensor]) -> Result<Tensor> {
    if psf_chunks.len() != volume_chunks.len() || psf_chunks.is_empty() {
        return Err(Error::invalid(format!(
            "{} PSF chunks for {} volume chunks",
            psf_chunks.len(),
            volume_chunks.len()
        )));
    }
    let jobs: Vec<(&Tensor, &Tensor)> = psf_chunks.iter().zip(volume_chunks).collect();
    let parts = run_parallel(jobs, |(s, v)| -> Result<Tensor> {
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let vv = tape.constant(v.clone());
        let mu = image_on(&mut tape, sv, vv)?;
        Ok(tape.value(mu).clone())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    sum_in_order(&parts)?.map_real(|m| m.max(0.0))
}

// ---- decoders ------------------------------------------------------------

/// Reconstruction model: one 2-D network per plane, or one network for the
/// whole volume.
/// A network index and its parameters bound on a tape.
type BoundNet = (usize, Vec<Var>);

#[derive(Clone, Debug, PartialEq)]
pub enum Decoder {
    Planewise(Vec<Network>),
    Volume(Network),
}

impl Decoder {
    pub fn networks(&self) -> &[Network] {
        match self {
            Decoder::Planewise(n) => n,
            Decoder::Volume(n) => std::slice::from_ref(n),
        }
    }

    fn networks_mut(&mut self) -> &mut [Network] {
        match self {
            Decoder::Planewise(n) => n,
            Decoder::Volume(n) => std::slice::from_mut(n),
        }
    }

    pub fn validate(&self, planes: usize, camera: [usize; 2]) -> Result<()> {
        let nets = self.networks();
        let want_depth = match self {
            Decoder::Planewise(n) => {
                if n.len() != planes {
                    return Err(Error::config(format!(
                        "{} plane networks for {planes} planes",
                        n.len()
                    )));
                }
                1
            }
            Decoder::Volume(_) => planes,
        };
        for net in nets {
            let spec = net.spec();
            if spec.input_hw != camera {
                return Err(Error::config(format!(
                    "network input {:?} does not match the {:?} camera",
                    spec.input_hw, camera
                )));
            }
            if spec.output_depth()? != want_depth {
                return Err(Error::config(format!(
                    "network {} outputs {} planes, expected {want_depth}",
                    spec.name,
                    spec.output_depth()?
                )));
            }
        }
        Ok(())
    }

    /// Reconstruct `planes` from image `c` on `tape`; returns `[k, H, W]` and
    /// the bound parameters of every network used.
    fn reconstruct_on(
        &self,
        tape: &mut Tape,
        c: Var,
        planes: &[usize],
        trainable: bool,
    ) -> Result<(Var, Vec<BoundNet>)> {
        match self {
            Decoder::Planewise(nets) => {
                let mut outs = Vec::with_capacity(planes.len());
                let mut bound = Vec::with_capacity(planes.len());
                for &z in planes {
                    let net = nets.get(z).ok_or_else(|| Error::invalid(format!("no network for plane {z}")))?;
                    let p = net.bind(tape, trainable);
                    outs.push(net.forward(tape, &p, c)?);
                    bound.push((z, p));
                }
                Ok((tape.concat(&outs)?, bound))
            }
            Decoder::Volume(net) => {
                let p = net.bind(tape, trainable);
                let y = net.forward(tape, &p, c)?;
                let parts = planes.iter().map(|&z| tape.index0(y, z)).collect::<Result<Vec<_>>>()?;
                Ok((tape.stack(&parts)?, vec![(0, p)]))
            }
        }
    }

    /// Gradient-free reconstruction of every plane.
    pub fn reconstruct(&self, c: &Tensor) -> Result<Tensor> {
        match self {
            Decoder::Planewise(nets) => {
                let parts = nets
                    .iter()
                    .map(|n| n.reconstruct(c)?.index0(0))
                    .collect::<Result<Vec<_>>>()?;
                Tensor::stack(&parts)
            }
            Decoder::Volume(net) => net.reconstruct(c),
        }
    }
}

// ---- sharded reconstruction / loss --------------------------------------

struct ChunkResult {
    loss: f64,
    hnmse: f64,
    nmse: f64,
    /// `(network, gradients)` for every network the chunk used.
    theta: Vec<(usize, Vec<Tensor>)>,
    dc: Option<Tensor>,
}

struct ChunkJob<'a> {
    planes: &'a [usize],
    truth: Tensor,
}

fn reconstruct_chunk(
    decoder: &Decoder,
    c: &Tensor,
    job: ChunkJob<'_>,
    norms: Normalizers,
    cfg: &LossConfig,
    grads: bool,
    grad_c: bool,
) -> Result<ChunkResult> {
    let mut tape = Tape::new();
    let cv = tape.leaf(c.clone(), grad_c);
    let (recon, bound) = decoder.reconstruct_on(&mut tape, cv, job.planes, grads)?;
    let truth = tape.constant(job.truth);
    let terms = loss_on(&mut tape, truth, recon, cfg, norms)?;
    let value = |t: &Tape, v: Var| t.value(v).re()[0];
    let (loss, hnmse, nmse) = (value(&tape, terms.total), value(&tape, terms.hnmse), value(&tape, terms.nmse));
    if !grads && !grad_c {
        return Ok(ChunkResult { loss, hnmse, nmse, theta: vec![], dc: None });
    }
    let g = tape.backward(terms.total)?;
    let theta = if grads {
        bound
            .into_iter()
            .map(|(net, vars)| {
                let gs = vars.iter().map(|&v| g.get_or_zeros(v, tape.value(v))).collect();
                (net, gs)
            })
            .collect()
    } else {
        vec![]
    };
    let dc = grad_c.then(|| g.get_or_zeros(cv, c));
    Ok(ChunkResult { loss, hnmse, nmse, theta, dc })
}

fn check_equal_chunks(chunks: &[Vec<usize>]) -> Result<()> {
    let first = chunks.first().map(Vec::len).unwrap_or(0);
    if first == 0 || chunks.iter().any(|c| c.len() != first) {
        return Err(Error::invalid(
            "reconstruction chunks must be non-empty and of equal size",
        ));
    }
    Ok(())
}

/// Mean over chunks of the per-chunk normalised loss, with shared
/// normalisers. `truth_chunks[j]` holds the ground-truth planes listed in
/// `plane_chunks[j]`.
pub fn sharded_reconstruct_loss(
    c: &Tensor,
    truth_chunks: &[Tensor],
    plane_chunks: &[Vec<usize>],
    decoder: &Decoder,
    norms: Option<Normalizers>,
    cfg: &LossConfig,
) -> Result<f64> {
    let norms = norms.ok_or_else(|| Error::invalid("loss normalisers are required"))?;
    if truth_chunks.len() != plane_chunks.len() {
        return Err(Error::invalid("one truth chunk per plane chunk"));
    }
    check_equal_chunks(plane_chunks)?;
    let jobs: Vec<ChunkJob<'_>> = plane_chunks
        .iter()
        .zip(truth_chunks)
        .map(|(p, t)| ChunkJob { planes: p, truth: t.clone() })
        .collect();
    let results = run_parallel(jobs, |job| reconstruct_chunk(decoder, c, job, norms, cfg, false, false))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64)
}

// ---- data ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cutout {
    pub diameter_um: Option<f64>,
    pub height_um: f64,
    pub voxel_um: [f64; 3],
}

/// Pool of base phantoms; each draw picks one at random and augments it.
#[derive(Clone, Debug)]
pub struct PhantomDataset {
    volumes: Vec<Tensor>,
    pub augment: AugmentOptions,
    pub cutout: Option<Cutout>,
}

impl PhantomDataset {
    /// `count` phantoms with seeds `params.seed, params.seed + 1, ...`.
    pub fn generate(params: &PhantomParams, count: usize, augment: AugmentOptions) -> Result<Self> {
        let volumes = (0..count as u64)
            .map(|i| {
                let mut p = params.clone();
                p.seed = params.seed.wrapping_add(i);
                generate_phantom(&p)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_volumes(volumes, augment)
    }

    pub fn from_volumes(volumes: Vec<Tensor>, augment: AugmentOptions) -> Result<Self> {
        if volumes.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        Ok(PhantomDataset { volumes, augment, cutout: None })
    }

    pub fn volumes(&self) -> &[Tensor] {
        &self.volumes
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Tensor> {
        let i = rng.random_range(0..self.volumes.len());
        let v = augment(&self.volumes[i], rng, &self.augment)?;
        match &self.cutout {
            Some(c) => aperture_cutout(&v, c.diameter_um, c.height_um, c.voxel_um),
            None => Ok(v),
        }
    }
}

// ---- training ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Phase mask and per-plane networks together.
    Joint,
    /// Network only, with a fixed PSF computed once.
    DecoderOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub iterations: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub workers: usize,
    /// Planes imaged with gradients per step (joint mode); all when absent.
    pub grad_planes: Option<usize>,
    /// Planes reconstructed per step; all when absent.
    pub recon_planes: Option<usize>,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_theta: 1e-4,
            lr_phi: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            iterations: 1000,
            seed: 0,
            mode: TrainMode::Joint,
            workers: 1,
            grad_planes: None,
            recon_planes: None,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_theta >= 0.0) || !(self.lr_phi >= 0.0) {
            return Err(Error::config("learning rates must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::config("Adam needs betas in [0, 1) and eps > 0"));
        }
        if self.workers == 0 {
            return Err(Error::config("need at least one worker"));
        }
        self.loss.validate()
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub loss: f64,
    pub l_hnmse: f64,
    pub l_nmse: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub loss: f64,
    pub l_hnmse: f64,
    pub l_nmse: f64,
    pub plan: ShardPlan,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub phi: PhaseMask,
    pub decoder: Decoder,
    pub log: Vec<MetricsRecord>,
}

struct ImagingJob<'a> {
    planes: &'a [usize],
    sample: Tensor,
    /// Precomputed PSF planes; computed from the mask when absent.
    psf: Option<Tensor>,
    track: bool,
}

struct ImagingPart {
    tape: Tape,
    phi: Var,
    mu: Var,
}

/// Orchestrator state for either training mode.
pub struct Trainer<'a> {
    scope: &'a Microscope,
    cfg: TrainConfig,
    phi: Tensor,
    decoder: Decoder,
    theta_opt: Vec<Adam>,
    phi_opt: Adam,
    fixed_psf: Option<PsfStack>,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(scope: &'a Microscope, phi: PhaseMask, decoder: Decoder, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let ocfg = scope.config();
        decoder.validate(scope.planes(), ocfg.camera_pixels)?;
        let planes = scope.planes();
        if cfg.grad_planes.is_some_and(|n| n > planes) || cfg.recon_planes.is_some_and(|n| n == 0 || n > planes) {
            return Err(Error::config(format!("plane counts must lie within 1..={planes}")));
        }
        let fixed_psf = match cfg.mode {
            TrainMode::DecoderOnly => Some(scope.psf_stack(&phi)?),
            TrainMode::Joint => None,
        };
        let theta_opt = decoder
            .networks()
            .iter()
            .map(|n| Adam::new(cfg.adam(cfg.lr_theta), &n.param_values()))
            .collect();
        let phi = phi.into_tensor();
        let phi_opt = Adam::new(cfg.adam(cfg.lr_phi), std::slice::from_ref(&phi));
        Ok(Trainer {
            scope,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            phi,
            decoder,
            theta_opt,
            phi_opt,
            fixed_psf,
        })
    }

    pub fn phi(&self) -> &Tensor {
        &self.phi
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn into_parts(self) -> Result<(PhaseMask, Decoder)> {
        Ok((PhaseMask::new(self.phi, self.scope.config())?, self.decoder))
    }

    fn image_chunk(&self, job: ImagingJob<'_>) -> Result<ImagingPart> {
        let mut tape = Tape::new();
        let phi = tape.leaf(self.phi.clone(), job.track);
        let s = match job.psf {
            Some(s) => tape.constant(s),
            None => self.scope.psf_planes(&mut tape, phi, job.planes)?,
        };
        let v = tape.constant(job.sample);
        let mu = image_on(&mut tape, s, v)?;
        Ok(ImagingPart { tape, phi, mu })
    }

    /// One optimisation step on volume `v: [Z, H, W]`.
    pub fn step(&mut self, v: &Tensor) -> Result<StepResult> {
        let planes = self.scope.planes();
        let [ch, cw] = self.scope.config().camera_pixels;
        if v.shape() != [planes, ch, cw] {
            return Err(Error::shape(format!(
                "training volume {:?} must be [{planes}, {ch}, {cw}]",
                v.shape()
            )));
        }
        let joint = self.cfg.mode == TrainMode::Joint;
        let all: Vec<usize> = (0..planes).collect();
        let n_grad = if joint { self.cfg.grad_planes.unwrap_or(planes) } else { 0 };
        let n_recon = self.cfg.recon_planes.unwrap_or(planes);
        let plan = select_planes(&all, n_grad, n_recon, self.cfg.workers, &mut self.rng)?;
        let noise_seed: u64 = self.rng.random();

        // imaging
        let mut jobs = Vec::new();
        for (chunks, track) in [(&plan.gradient_chunks, true), (&plan.no_gradient_chunks, false)] {
            for chunk in chunks {
                let psf = match &self.fixed_psf {
                    Some(s) => Some(gather_planes(s.tensor(), chunk)?),
                    None => None,
                };
                jobs.push(ImagingJob {
                    planes: chunk,
                    sample: gather_planes(v, chunk)?,
                    psf,
                    track,
                });
            }
        }
        let parts = run_parallel(jobs, |j| self.image_chunk(j))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let partials: Vec<Tensor> = parts.iter().map(|p| p.tape.value(p.mu).clone()).collect();
        let mu = sum_in_order(&partials)?;

        // noise on the full expected image
        let mut noise_tape = Tape::new();
        let mu_var = noise_tape.leaf(mu, joint);
        let eps = noise_draws(noise_tape.value(mu_var).len(), noise_seed);
        let c_var = noise_tape.shot_noise(mu_var, eps)?;
        let c = noise_tape.value(c_var).clone();

        // reconstruction and loss
        let truth = gather_planes(v, &plan.z_reconstruct)?;
        let norms = Normalizers::of(&truth, &self.cfg.loss)?;
        let rjobs: Vec<ChunkJob<'_>> = plan
            .reconstruct_chunks
            .iter()
            .map(|p| Ok(ChunkJob { planes: p, truth: gather_planes(v, p)? }))
            .collect::<Result<_>>()?;
        let decoder = &self.decoder;
        let loss_cfg = &self.cfg.loss;
        let results = run_parallel(rjobs, |j| reconstruct_chunk(decoder, &c, j, norms, loss_cfg, true, joint))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let k = results.len() as f64;
        let mean = |f: fn(&ChunkResult) -> f64| results.iter().map(f).sum::<f64>() / k;
        let (loss, l_hnmse, l_nmse) = (mean(|r| r.loss), mean(|r| r.hnmse), mean(|r| r.nmse));
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss}")));
        }

        // network gradients, each chunk weighted by 1/k
        let nets = self.decoder.networks().len();
        let mut theta: Vec<Option<Vec<Tensor>>> = vec![None; nets];
        for r in &results {
            for (net, gs) in &r.theta {
                let slot = &mut theta[*net];
                match slot {
                    None => *slot = Some(gs.iter().map(|g| scale(g, 1.0 / k)).collect()),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(gs) {
                            *a = axpy(a, g, 1.0 / k)?;
                        }
                    }
                }
            }
        }

        // mask gradient: dL/dc -> dL/dmu -> imaging workers
        let mut phi_grad = None;
        if joint && !plan.gradient_chunks.is_empty() {
            let mut dc = scale(results[0].dc.as_ref().expect("dc"), 1.0 / k);
            for r in &results[1..] {
                dc = axpy(&dc, r.dc.as_ref().expect("dc"), 1.0 / k)?;
            }
            let g = noise_tape.backward_from(c_var, dc)?;
            let dmu = g.get_or_zeros(mu_var, noise_tape.value(mu_var));
            let tracked: Vec<ImagingPart> = parts.into_iter().take(plan.gradient_chunks.len()).collect();
            let grads = run_parallel(tracked, |mut p| -> Result<Tensor> {
                let g = p.tape.backward_from(p.mu, dmu.clone())?;
                Ok(g.get_or_zeros(p.phi, p.tape.value(p.phi)))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            phi_grad = Some(sum_in_order(&grads)?);
        }

        // updates; replicas live in the central store between steps
        for ((net, opt), g) in self.decoder.networks_mut().iter_mut().zip(&mut self.theta_opt).zip(theta) {
            let Some(g) = g else { continue };
            let mut values = net.param_values();
            opt.step(&mut values, &g.into_iter().map(Some).collect::<Vec<_>>())?;
            net.set_param_values(values)?;
        }
        if let Some(g) = phi_grad {
            self.phi_opt.step(std::slice::from_mut(&mut self.phi), &[Some(g)])?;
        }
        Ok(StepResult { loss, l_hnmse, l_nmse, plan })
    }
}

fn scale(t: &Tensor, s: f64) -> Tensor {
    match t.data() {
        crate::tensor::Data::Real(v) => Tensor::from_real(t.shape(), v.iter().map(|x| x * s).collect()),
        crate::tensor::Data::Complex(v) => Tensor::from_complex(t.shape(), v.iter().map(|x| x * s).collect()),
    }
    .expect("shape")
}

/// `a + s b`.
fn axpy(a: &Tensor, b: &Tensor, s: f64) -> Result<Tensor> {
    use crate::tensor::Data;
    match (a.data(), b.data()) {
        (Data::Real(x), Data::Real(y)) => {
            Tensor::from_real(a.shape(), x.iter().zip(y).map(|(x, y)| x + s * y).collect())
        }
        (Data::Complex(x), Data::Complex(y)) => {
            Tensor::from_complex(a.shape(), x.iter().zip(y).map(|(x, y)| x + y * s).collect())
        }
        _ => Err(Error::DType("gradient dtypes differ".into())),
    }
}

/// Run `cfg.iterations` steps on draws from `data`, appending one JSON line
/// per step to `log` when given.
pub fn train(
    scope: &Microscope,
    phi: PhaseMask,
    decoder: Decoder,
    data: &PhantomDataset,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(scope, phi, decoder, cfg.clone())?;
    let mut records = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let start = Instant::now();
        let v = data.sample(trainer.rng())?;
        let r = trainer.step(&v).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("iteration {iter}: {m}")),
            other => other,
        })?;
        let rec = MetricsRecord {
            iter,
            loss: r.loss,
            l_hnmse: r.l_hnmse,
            l_nmse: r.l_nmse,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            writeln!(w)?;
        }
        log::debug!("iter {iter} loss {:.6}", rec.loss);
        records.push(rec);
    }
    let (phi, decoder) = trainer.into_parts()?;
    Ok(TrainOutcome { phi, decoder, log: records })
}

/// Trailing moving average with window `w`.
pub fn smoothed(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::loss;
    use crate::network::{build_network, fouriernet2d};
    use crate::optics::{image_volume, OpticsConfig};

    fn toy_optics(planes: usize) -> OpticsConfig {
        OpticsConfig::tiny(planes)
    }

    #[test]
    fn plan_invariants_hold() {
        let all: Vec<usize> = (0..10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..1000 {
            let (g, r, w) = (i % 11, 1 + i % 10, 1 + i % 5);
            let p = select_planes(&all, g, r, w, &mut rng).unwrap();
            assert!(p.z_gradient.iter().all(|z| !p.z_no_gradient.contains(z)));
            let mut union = [p.z_gradient.clone(), p.z_no_gradient.clone()].concat();
            union.sort_unstable();
            assert_eq!(union, all);
            for (set, chunks) in [
                (&p.z_gradient, &p.gradient_chunks),
                (&p.z_no_gradient, &p.no_gradient_chunks),
                (&p.z_reconstruct, &p.reconstruct_chunks),
            ] {
                assert!(chunks.iter().all(|c| !c.is_empty()) && chunks.len() <= w);
                let mut flat: Vec<usize> = chunks.concat();
                flat.sort_unstable();
                assert_eq!(&flat, set);
            }
            let n = p.reconstruct_chunks[0].len();
            assert!(p.reconstruct_chunks.iter().all(|c| c.len() == n));
        }
        let a = select_planes(&all, 4, 6, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = select_planes(&all, 4, 6, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(select_planes(&all, 10, 10, 2, &mut rng).unwrap().z_no_gradient.is_empty());
        assert!(select_planes(&all, 11, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn sharded_image_matches_single() {
        let cfg = toy_optics(8);
        let scope = Microscope::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = PhaseMask::new(Tensor::uniform(&[16, 16], -3.0, 3.0, &mut rng), &cfg).unwrap();
        let s = scope.psf_stack(&phi).unwrap();
        let v = Tensor::uniform(&[8, 8, 8], 0.0, 1.0, &mut rng);
        let whole = image_volume(&s, &v).unwrap();
        let one = sharded_image(std::slice::from_ref(s.tensor()), std::slice::from_ref(&v)).unwrap();
        assert!(one.max_abs_diff(&whole).unwrap() <= 1e-12 * whole.max());
        let chunks = chunk_round_robin(&(0..8).collect::<Vec<_>>(), 4);
        let sc: Vec<Tensor> = chunks.iter().map(|c| gather_planes(s.tensor(), c).unwrap()).collect();
        let vc: Vec<Tensor> = chunks.iter().map(|c| gather_planes(&v, c).unwrap()).collect();
        let four = sharded_image(&sc, &vc).unwrap();
        assert!(four.max_abs_diff(&whole).unwrap() <= 1e-10 * whole.max());
    }

    #[test]
    fn sharded_loss_matches_unsharded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nets: Vec<Network> = (0..4)
            .map(|_| build_network(&fouriernet2d(8, 2, 3), &mut rng).unwrap())
            .collect();
        let dec = Decoder::Planewise(nets);
        let c = Tensor::uniform(&[8, 8], 1.0, 5.0, &mut rng);
        let v = Tensor::uniform(&[4, 8, 8], 0.0, 1.0, &mut rng);
        let cfg = LossConfig::default();
        let norms = Normalizers::of(&v, &cfg).unwrap();
        let recon = dec.reconstruct(&c).unwrap();
        let plain = loss(&v, &recon, &cfg).unwrap().0;
        let all: Vec<usize> = (0..4).collect();
        let one = sharded_reconstruct_loss(&c, std::slice::from_ref(&v), std::slice::from_ref(&all), &dec, Some(norms), &cfg).unwrap();
        assert!((one - plain).abs() <= 1e-12 * plain);
        let chunks = chunk_equal(&all, 2);
        let truth: Vec<Tensor> = chunks.iter().map(|p| gather_planes(&v, p).unwrap()).collect();
        let two = sharded_reconstruct_loss(&c, &truth, &chunks, &dec, Some(norms), &cfg).unwrap();
        assert!((two - plain).abs() <= 1e-12 * plain);
        assert!(sharded_reconstruct_loss(&c, &truth, &chunks, &dec, None, &cfg).is_err());
    }

    fn tiny_setup(mode: TrainMode, planes: usize, workers: usize, iters: usize) -> (Microscope, PhaseMask, Decoder, PhantomDataset, TrainConfig) {
        let ocfg = toy_optics(planes);
        let scope = Microscope::new(ocfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let phi = PhaseMask::new(Tensor::uniform(&[16, 16], -1.0, 1.0, &mut rng), &ocfg).unwrap();
        let nets = (0..planes)
            .map(|_| build_network(&fouriernet2d(8, 2, 3), &mut rng).unwrap())
            .collect();
        let mut p = PhantomParams::toy(planes, 8, 3);
        p.radius_um = [1.0, 1.5];
        p.nucleus_count = 3;
        let data = PhantomDataset::generate(&p, 2, AugmentOptions::default()).unwrap();
        let cfg = TrainConfig {
            mode,
            workers,
            iterations: iters,
            seed: 11,
            ..TrainConfig::default()
        };
        (scope, phi, Decoder::Planewise(nets), data, cfg)
    }

    #[test]
    fn zero_learning_rates_leave_parameters_untouched() {
        let (scope, phi, dec, data, mut cfg) = tiny_setup(TrainMode::Joint, 2, 1, 10);
        cfg.lr_theta = 0.0;
        cfg.lr_phi = 0.0;
        let out = train(&scope, phi.clone(), dec.clone(), &data, &cfg, None).unwrap();
        assert_eq!(out.phi.tensor(), phi.tensor());
        assert_eq!(out.decoder, dec);
    }

    #[test]
    fn metrics_log_is_deterministic() {
        let strip = |o: TrainOutcome| o.log.into_iter().map(|r| (r.iter, r.loss, r.l_hnmse, r.l_nmse)).collect::<Vec<_>>();
        let (scope, phi, dec, data, cfg) = tiny_setup(TrainMode::Joint, 4, 2, 3);
        let a = train(&scope, phi.clone(), dec.clone(), &data, &cfg, None).unwrap();
        let b = train(&scope, phi, dec, &data, &cfg, None).unwrap();
        assert_eq!(a.phi.tensor(), b.phi.tensor());
        assert_eq!(strip(a), strip(b));
    }

    #[test]
    fn step_loss_and_gradient_agree_across_workers() {
        let run = |workers: usize| {
            let (scope, phi, dec, data, mut cfg) = tiny_setup(TrainMode::Joint, 4, workers, 1);
            cfg.lr_theta = 0.0;
            cfg.lr_phi = 1e-3;
            let out = train(&scope, phi, dec, &data, &cfg, None).unwrap();
            (out.log[0].loss, out.phi.into_tensor())
        };
        let (l1, p1) = run(1);
        let (l4, p4) = run(4);
        assert!((l1 - l4).abs() <= 1e-9 * l1);
        assert!(p1.max_abs_diff(&p4).unwrap() < 1e-9);
    }

    #[test]
    fn rejects_mismatched_volume() {
        let (scope, phi, dec, _, cfg) = tiny_setup(TrainMode::DecoderOnly, 2, 1, 1);
        let mut t = Trainer::new(&scope, phi, dec, cfg).unwrap();
        assert!(t.step(&Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }
}
