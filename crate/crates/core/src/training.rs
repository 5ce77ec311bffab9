//! Alternating generator/discriminator optimization, replay buffers and the
//! epoch loop.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, Axis};
use pathogan_autograd::{Adam, AdamConfig, Gradients, Scalar, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{augment, AugmentationConfig};
use crate::losses::{
    cycle_loss, gan_loss_d, gan_loss_g, identity_loss, kl_loss, relevancy_loss, total_objective, vae_loss,
    DirectionTerms, LossReport, LossWeights,
};
use crate::model::{stack_batch, DeltaSource, Domain, ImageSlice, Mode, ModelConfig, ModelError, PathoGan, Role};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} at step {step}")]
    NonFiniteLoss { step: u64, term: String, report: LossReport },
    #[error("checkpoint config hash {found} does not match the run config hash {expected}")]
    ResumeMismatch { expected: String, found: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} training set is empty")]
    EmptyDomain(&'static str),
    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub step_size: f64,
    pub momentum_pair: (f64, f64),
    pub buffer_capacity: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; the last epoch is always
    /// saved.
    pub checkpoint_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 119,
            batch_size: 4,
            weights: LossWeights::default(),
            step_size: 2e-4,
            momentum_pair: (0.5, 0.999),
            buffer_capacity: 50,
            seed: 0,
            checkpoint_every: 1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        let (b1, b2) = self.momentum_pair;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("momentum_pair entries must lie in [0, 1), got ({b1}, {b2})"));
        }
        self.weights.validate().map_err(TrainError::InvalidConfig)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            step_size: self.step_size,
            beta1: self.momentum_pair.0,
            beta2: self.momentum_pair.1,
            ..AdamConfig::default()
        }
    }
}

/// Pool of past generated images shown to a discriminator.
///
/// Until full, every fresh image is stored and passed through. Afterwards
/// each fresh image is, with probability 1/2, swapped with a random stored
/// one (the stored one is returned), and otherwise passed through.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer<T: Scalar> {
    capacity: usize,
    stored: Vec<ArrayD<T>>,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            stored: Vec::with_capacity(capacity),
        }
    }

    pub fn from_parts(capacity: usize, stored: Vec<ArrayD<T>>) -> Self {
        assert!(stored.len() <= capacity, "replay buffer over capacity");
        ReplayBuffer { capacity, stored }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stored(&self) -> &[ArrayD<T>] {
        &self.stored
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    /// Mix a batch `(N, ...)` of fresh fakes with stored ones.
    pub fn sample<R: Rng + ?Sized>(&mut self, fresh: &ArrayD<T>, rng: &mut R) -> ArrayD<T> {
        if self.capacity == 0 {
            return fresh.clone();
        }
        let mut out = fresh.clone();
        for (k, image) in fresh.axis_iter(Axis(0)).enumerate() {
            let image = image.to_owned();
            if self.stored.len() < self.capacity {
                self.stored.push(image);
            } else if rng.gen::<f64>() < 0.5 {
                let j = rng.gen_range(0..self.capacity);
                let old = std::mem::replace(&mut self.stored[j], image);
                out.index_axis_mut(Axis(0), k).assign(&old);
            }
        }
        out
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub config: TrainConfig,
    pub model: PathoGan<T>,
    /// One optimizer per network, in [`Role::ALL`] order.
    pub optimizers: Vec<Adam<T>>,
    pub buffer_a: ReplayBuffer<T>,
    pub buffer_b: ReplayBuffer<T>,
    /// Drives labelmap noise, latent sampling and replay decisions.
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model_config: ModelConfig, config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = PathoGan::new(model_config, config.seed)?;
        Ok(TrainState {
            config: config.clone(),
            model,
            optimizers: Role::ALL.iter().map(|_| Adam::new(config.adam())).collect(),
            buffer_a: ReplayBuffer::new(config.buffer_capacity),
            buffer_b: ReplayBuffer::new(config.buffer_capacity),
            rng: seeded(config.seed, 1),
            epoch: 0,
            step: 0,
        })
    }

    fn update(&mut self, roles: &[Role], grads: &Gradients<T>) {
        for &role in roles {
            let k = Role::ALL.iter().position(|r| *r == role).expect("known role");
            self.optimizers[k].step(self.model.network_mut(role).parameters_mut(), grads);
        }
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gradients_finite<T: Scalar>(model: &PathoGan<T>, roles: &[Role], grads: &Gradients<T>) -> bool {
    roles.iter().all(|&role| {
        model
            .network(role)
            .parameters()
            .all(|p| p.grad(grads).map_or(true, |g| g.iter().all(|v| v.is_finite())))
    })
}

/// Generator objective for one pair of batches; also returns the detached
/// translations `(y_hat_a, y_hat_b)` for the discriminator step.
pub fn generator_objective<T: Scalar, R: Rng + ?Sized>(
    model: &PathoGan<T>,
    x_a: &Var<T>,
    x_b: &Var<T>,
    w: &LossWeights,
    rng: &mut R,
) -> Result<(crate::losses::Objective<T>, ArrayD<T>, ArrayD<T>), ModelError> {
    let mode = Mode::Train;
    let cycle_a = model.cycle_a(x_a, mode, rng)?;
    let cycle_b = model.cycle_b(x_b, mode, rng)?;
    let idt_a = model.generator_a_forward(x_b, DeltaSource::Prior, mode, rng)?;
    let idt_b = model.generator_b_forward(x_a, mode, rng)?;
    let gan = T::from_f64_lossy(w.lambda_gan);

    let a_to_b = DirectionTerms {
        gan_g: gan_loss_g(&model.discriminate(Domain::Pathological, &cycle_a.hat.output)?).scale(gan),
        cc: cycle_loss(x_a, &cycle_a.tilde.output, w),
        vae: vae_loss(x_a, &cycle_a.hat.residual, &cycle_a.tilde.residual, w),
        idt: identity_loss(&idt_a.residual.labelmap, w),
        relevancy: relevancy_loss(x_a, &cycle_a.hat.residual, w),
    };
    let b_to_a = DirectionTerms {
        gan_g: gan_loss_g(&model.discriminate(Domain::Healthy, &cycle_b.hat.output)?).scale(gan),
        cc: cycle_loss(x_b, &cycle_b.tilde.output, w),
        vae: vae_loss(x_b, &cycle_b.hat.residual, &cycle_b.tilde.residual, w),
        idt: identity_loss(&idt_b.residual.labelmap, w),
        relevancy: relevancy_loss(x_b, &cycle_b.hat.residual, w),
    };
    let gamma = cycle_a.hat.gamma.as_ref().expect("G_A returns its context code");
    let delta = cycle_b.tilde.delta.as_ref().expect("return leg of cycle B encodes its pathology");
    let kl = kl_loss(gamma, delta);
    let objective = total_objective(&a_to_b, &b_to_a, &kl, w);
    Ok((
        objective,
        cycle_b.hat.output.value().clone(),
        cycle_a.hat.output.value().clone(),
    ))
}

/// Discriminator objective on real images against (replayed) fakes.
pub fn discriminator_objective<T: Scalar>(
    model: &PathoGan<T>,
    x_a: &Var<T>,
    x_b: &Var<T>,
    fake_a: &ArrayD<T>,
    fake_b: &ArrayD<T>,
    w: &LossWeights,
) -> Result<(Var<T>, Var<T>), ModelError> {
    let gan = T::from_f64_lossy(w.lambda_gan);
    let fake_a = Var::constant(fake_a.clone());
    let fake_b = Var::constant(fake_b.clone());
    let d_a = gan_loss_d(
        &model.discriminate(Domain::Healthy, x_a)?,
        &model.discriminate(Domain::Healthy, &fake_a)?,
    );
    let d_b = gan_loss_d(
        &model.discriminate(Domain::Pathological, x_b)?,
        &model.discriminate(Domain::Pathological, &fake_b)?,
    );
    Ok((d_a.scale(gan), d_b.scale(gan)))
}

/// One generator update followed by one discriminator update.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch_a: &ArrayD<T>,
    batch_b: &ArrayD<T>,
    config: &TrainConfig,
) -> Result<LossReport, TrainError> {
    let w = &config.weights;
    let x_a = Var::constant(batch_a.clone());
    let x_b = Var::constant(batch_b.clone());
    let step = state.step + 1;
    let non_finite = |term: &str, report: LossReport| TrainError::NonFiniteLoss {
        step,
        term: term.into(),
        report,
    };

    let (objective, fake_a, fake_b) = generator_objective(&state.model, &x_a, &x_b, w, &mut state.rng)?;
    let mut report = objective.report;
    if let Some(term) = report.first_non_finite() {
        return Err(non_finite(term, report));
    }
    let grads = objective.total_g.backward();
    if !gradients_finite(&state.model, &Role::GENERATORS, &grads) {
        return Err(non_finite("generator gradient", report));
    }
    drop(objective);
    state.update(&Role::GENERATORS, &grads);
    drop(grads);

    let replay_a = state.buffer_a.sample(&fake_a, &mut state.rng);
    let replay_b = state.buffer_b.sample(&fake_b, &mut state.rng);
    let (d_a, d_b) = discriminator_objective(&state.model, &x_a, &x_b, &replay_a, &replay_b, w)?;
    let total_d = &d_a + &d_b;
    report.gan_d = total_d.item().as_f64();
    report.total_d = report.gan_d;
    if let Some(term) = report.first_non_finite() {
        return Err(non_finite(term, report));
    }
    let grads = total_d.backward();
    if !gradients_finite(&state.model, &Role::DISCRIMINATORS, &grads) {
        return Err(non_finite("discriminator gradient", report));
    }
    state.update(&Role::DISCRIMINATORS, &grads);
    state.step = step;
    Ok(report)
}

/// Per-sample augmentation seed; independent of processing order.
fn sample_rng(seed: u64, step: u64, index: usize) -> ChaCha8Rng {
    seeded(seed ^ 0x5851_F42D_4C95_7F2D, step.wrapping_mul(1 << 16).wrapping_add(index as u64))
}

/// Shuffled order of `len` items for one pass, a pure function of the seed
/// and the pass index.
fn permutation(seed: u64, domain: u64, pass: u64, len: usize) -> Vec<usize> {
    let mut rng = seeded(seed.wrapping_add(0x9E37_79B9_7F4A_7C15), domain.wrapping_mul(1 << 32).wrapping_add(pass));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Indices of the healthy and pathological samples used at a step.
///
/// An epoch is one pass over the pathological set in batches (the last
/// batch may be short); healthy samples are drawn cyclically from their own
/// reshuffled passes.
pub fn batch_indices(seed: u64, n_a: usize, n_b: usize, batch: usize, step: u64) -> (Vec<usize>, Vec<usize>) {
    let steps_per_epoch = n_b.div_ceil(batch) as u64;
    let epoch = step / steps_per_epoch;
    let within = (step % steps_per_epoch) as usize;
    let order_b = permutation(seed, 1, epoch, n_b);
    let idx_b: Vec<usize> = order_b[within * batch..((within + 1) * batch).min(n_b)].to_vec();
    // Healthy draws continue across epochs: draw k overall lives in pass k / n_a.
    let first = epoch as usize * n_b + within * batch;
    let mut idx_a = Vec::with_capacity(idx_b.len());
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for k in first..first + idx_b.len() {
        let pass = k / n_a;
        if cached.as_ref().map_or(true, |(p, _)| *p != pass) {
            cached = Some((pass, permutation(seed, 0, pass as u64, n_a)));
        }
        idx_a.push(cached.as_ref().unwrap().1[k % n_a]);
    }
    (idx_a, idx_b)
}

pub fn steps_per_epoch(n_b: usize, batch: usize) -> u64 {
    n_b.div_ceil(batch) as u64
}

/// Build the two batches for a step, augmenting each sample with its own
/// derived RNG.
pub fn make_batches<T: Scalar>(
    healthy: &[ImageSlice],
    pathological: &[ImageSlice],
    config: &TrainConfig,
    augmentation: &AugmentationConfig,
    step: u64,
) -> (ArrayD<T>, ArrayD<T>) {
    let (idx_a, idx_b) = batch_indices(
        config.seed,
        healthy.len(),
        pathological.len(),
        config.batch_size,
        step,
    );
    let prepare = |set: &[ImageSlice], idx: &[usize], offset: usize| {
        let slices: Vec<ImageSlice> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                if config.augment {
                    augment(&set[i], augmentation, &mut sample_rng(config.seed, step, offset + k))
                } else {
                    set[i].clone()
                }
            })
            .collect();
        let refs: Vec<&ImageSlice> = slices.iter().collect();
        stack_batch::<T>(&refs)
    };
    (
        prepare(healthy, &idx_a, 0),
        prepare(pathological, &idx_b, config.batch_size),
    )
}

/// Exclusive ownership of a run directory.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, TrainError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(TrainError::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Paths and settings around the optimization loop.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Stored in every checkpoint and compared on resume.
    pub config_json: String,
    pub config_hash: String,
    pub augmentation: AugmentationConfig,
    pub resume: Option<PathBuf>,
    /// Stop after this many steps in total (for tests and smoke runs).
    pub max_steps: Option<u64>,
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch}.ckpt"))
}

fn csv_header() -> String {
    let mut h = String::from("epoch,step");
    for f in LossReport::FIELDS {
        h.push(',');
        h.push_str(f);
    }
    h
}

fn csv_row(epoch: usize, step: u64, r: &LossReport) -> String {
    let mut row = format!("{epoch},{step}");
    for v in r.values() {
        row.push_str(&format!(",{v:e}"));
    }
    row
}

/// Run (or resume) training and return the path of the last checkpoint.
pub fn run_training(
    model_config: &ModelConfig,
    config: &TrainConfig,
    healthy: &[ImageSlice],
    pathological: &[ImageSlice],
    options: &RunOptions,
) -> Result<PathBuf, TrainError> {
    config.validate()?;
    if healthy.is_empty() {
        return Err(TrainError::EmptyDomain("healthy"));
    }
    if pathological.is_empty() {
        return Err(TrainError::EmptyDomain("pathological"));
    }
    let _lock = RunLock::acquire(&options.out_dir)?;
    fs::create_dir_all(options.out_dir.join("checkpoints"))?;

    let mut state = match &options.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config_hash != options.config_hash {
                return Err(TrainError::ResumeMismatch {
                    expected: options.config_hash.clone(),
                    found: ckpt.config_hash,
                });
            }
            ckpt.into_state()?
        }
        None => TrainState::<f32>::new(model_config.clone(), config)?,
    };

    // Rows past the resumed step belong to an abandoned continuation.
    let log_path = options.out_dir.join("train_log.csv");
    let mut kept = vec![csv_header()];
    if options.resume.is_some() && log_path.exists() {
        for (epoch, step, report) in read_train_log(&log_path)? {
            if step <= state.step {
                kept.push(csv_row(epoch, step, &report));
            }
        }
    }
    fs::write(&log_path, kept.join("\n") + "\n")?;
    let mut log = BufWriter::new(OpenOptions::new().append(true).open(&log_path)?);

    let per_epoch = steps_per_epoch(pathological.len(), config.batch_size);
    let mut last = None;
    while state.epoch < config.epochs {
        let epoch_end = (state.epoch as u64 + 1) * per_epoch;
        while state.step < epoch_end {
            if options.max_steps.is_some_and(|m| state.step >= m) {
                log.flush()?;
                let path = options.out_dir.join("checkpoints").join(format!("step_{}.ckpt", state.step));
                Checkpoint::from_state(&state, &options.config_json, &options.config_hash).save(&path)?;
                return Ok(path);
            }
            let (a, b) = make_batches::<f32>(healthy, pathological, config, &options.augmentation, state.step);
            let report = match train_step(&mut state, &a, &b, config) {
                Ok(r) => r,
                Err(e) => {
                    log.flush()?;
                    if let TrainError::NonFiniteLoss { report, .. } = &e {
                        let dump = serde_json::to_string_pretty(report).unwrap_or_default();
                        fs::write(options.out_dir.join("nonfinite_report.json"), dump)?;
                    }
                    return Err(e);
                }
            };
            writeln!(log, "{}", csv_row(state.epoch + 1, state.step, &report))?;
        }
        state.epoch += 1;
        log.flush()?;
        log::info!("epoch {} done after {} steps", state.epoch, state.step);
        if state.epoch % config.checkpoint_every == 0 || state.epoch == config.epochs {
            let path = checkpoint_path(&options.out_dir, state.epoch);
            Checkpoint::from_state(&state, &options.config_json, &options.config_hash).save(&path)?;
            last = Some(path);
        }
    }
    match last {
        Some(p) => Ok(p),
        // Resumed from a checkpoint that already covered every epoch.
        None => {
            let path = checkpoint_path(&options.out_dir, state.epoch);
            if !path.exists() {
                Checkpoint::from_state(&state, &options.config_json, &options.config_hash).save(&path)?;
            }
            Ok(path)
        }
    }
}

/// Read a `train_log.csv` back into rows.
pub fn read_train_log(path: &Path) -> Result<Vec<(usize, u64, LossReport)>, std::io::Error> {
    let text = fs::read_to_string(path)?;
    let invalid = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 2 + LossReport::FIELDS.len() {
            return Err(invalid(format!("malformed log row: {line}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| invalid(format!("{s}: {e}")));
        let v: Vec<f64> = cols[2..].iter().map(|s| num(s)).collect::<Result<_, _>>()?;
        let report = LossReport {
            gan_g: v[0],
            gan_d: v[1],
            cc: v[2],
            kl: v[3],
            vae_label: v[4],
            vae_inpaint_out: v[5],
            vae_inpaint_in: v[6],
            idt: v[7],
            relevancy: v[8],
            total_g: v[9],
            total_d: v[10],
        };
        let epoch = cols[0].parse().map_err(|e| invalid(format!("{e}")))?;
        let step = cols[1].parse().map_err(|e| invalid(format!("{e}")))?;
        rows.push((epoch, step, report));
    }
    Ok(rows)
}
