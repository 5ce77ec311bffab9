//! Subcommand implementations. Each returns a [`CliError`] whose
//! [`CliError::exit_code`] is what the binary exits with.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, Axis, Ix3, Ix4};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use pathogan::checkpoint::{file_sha256, Checkpoint, CheckpointError};
use pathogan::data::{
    build_training_set, generate_phantom_dataset, load_dataset, prepare_slices, write_dataset, DataError, Split,
};
use pathogan::evaluation::{evaluate_dataset, inpaint_healthy, sample_pathology, segment, EvalError};
use pathogan::model::{Domain, ImageSlice, ModelError, PathoGan};
use pathogan::netspec::{describe, parse_netspec, Shape, Symbols};
use pathogan::training::{run_training, RunOptions, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::panel::{map_png, Panel};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    NonFinite(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::NonFinite(_) => 3,
            CliError::Io(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } | DataError::Format { .. } | DataError::Manifest(_) => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(_) => CliError::Other(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) => CliError::Io(e.to_string()),
            EvalError::Model(_) => CliError::Other(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::NonFinite(e.to_string()),
            TrainError::Locked(_) | TrainError::Io(_) => CliError::Io(e.to_string()),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Model(_) => CliError::Other(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io(path))
}

fn write_npy<A: WriteNpyExt>(path: &Path, a: &A) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(io(path))?;
    a.write_npy(file).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// `.npy` array plus a JSON sidecar describing it.
fn write_array<A: WriteNpyExt>(
    dir: &Path,
    stem: &str,
    a: &A,
    shape: &[usize],
    dtype: &str,
    meta: &serde_json::Value,
) -> Result<(), CliError> {
    write_npy(&dir.join(format!("{stem}.npy")), a)?;
    let mut sidecar = json!({ "file": format!("{stem}.npy"), "shape": shape, "dtype": dtype });
    if let (Some(obj), Some(extra)) = (sidecar.as_object_mut(), meta.as_object()) {
        obj.extend(extra.clone());
    }
    write_file(
        &dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&sidecar).expect("serializable sidecar"),
    )
}

pub struct PhantomArgs {
    pub out: PathBuf,
    pub healthy: usize,
    pub pathological: usize,
    pub test_healthy: usize,
    pub test_pathological: usize,
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
}

/// Write a phantom dataset and return its manifest path.
pub fn cmd_phantom(a: &PhantomArgs) -> Result<PathBuf, CliError> {
    if a.size < 16 || a.channels == 0 {
        return Err(CliError::Usage("phantoms need --size >= 16 and at least one channel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut records: Vec<_> = generate_phantom_dataset(a.healthy, a.pathological, a.size, a.channels, &mut rng)
        .into_iter()
        .map(|r| (r, Split::Train))
        .collect();
    for mut r in generate_phantom_dataset(a.test_healthy, a.test_pathological, a.size, a.channels, &mut rng) {
        r.patient_id = format!("test_{}", r.patient_id);
        records.push((r, Split::Test));
    }
    Ok(write_dataset(&a.out, &records)?)
}

pub struct TrainArgs {
    pub config: RunConfig,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub max_steps: Option<u64>,
}

pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf, CliError> {
    let c = &a.config;
    if c.data.manifest.is_empty() {
        return Err(CliError::Usage("data.manifest is not set (use --data or --set data.manifest=...)".into()));
    }
    let records = load_dataset(Path::new(&c.data.manifest))?;
    if let Some((r, _)) = records.first() {
        if r.n_channels() != c.model.n_channels {
            return Err(CliError::Usage(format!(
                "dataset has {} channels, model.n_channels is {}",
                r.n_channels(),
                c.model.n_channels
            )));
        }
    }
    let slices = prepare_slices(&records, Split::Train, c.data.slice_lo, c.data.slice_hi, c.data.pathology_threshold)?;
    let set = build_training_set(&slices, c.counts(), &mut ChaCha8Rng::seed_from_u64(c.train.seed))?;
    log::info!(
        "training on {} healthy and {} pathological slices",
        set.healthy.len(),
        set.pathological.len()
    );

    fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    write_file(&a.out.join("config.toml"), c.to_toml())?;
    let options = RunOptions {
        out_dir: a.out.clone(),
        config_json: c.canonical_json(),
        config_hash: c.hash(),
        augmentation: c.augment,
        resume: a.resume.clone(),
        max_steps: a.max_steps,
    };
    Ok(run_training(
        &c.model_config(),
        &c.train_config(),
        &set.healthy,
        &set.pathological,
        &options,
    )?)
}

/// Network, run configuration (when the checkpoint carries one) and file hash.
pub fn load_checkpoint(path: &Path) -> Result<(PathoGan<f32>, Option<RunConfig>, String), CliError> {
    if !path.exists() {
        return Err(CliError::Io(format!("{}: checkpoint not found", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.into_model()?;
    let config = serde_json::from_str::<RunConfig>(&ckpt.config_json).ok();
    Ok((model, config, file_sha256(path)?))
}

/// Read `(C, H, W)` or `(N, C, H, W)` slices already scaled to `[-1, 1]`.
pub fn read_slices(path: &Path) -> Result<Vec<ImageSlice>, CliError> {
    let file = fs::File::open(path).map_err(io(path))?;
    let a = ArrayD::<f32>::read_npy(file).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let batch = match a.ndim() {
        3 => a.insert_axis(Axis(0)),
        4 => a,
        n => {
            return Err(CliError::Usage(format!(
                "{}: expected a (C, H, W) or (N, C, H, W) array, got {n} dimensions",
                path.display()
            )))
        }
    };
    let batch = batch.into_dimensionality::<Ix4>().expect("four dimensions");
    Ok(batch
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(k, s)| ImageSlice {
            data: s.to_owned(),
            patient_id: "input".into(),
            slice_index: k,
            domain: Domain::Pathological,
            mask: None,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    Segment,
    Inpaint,
    Sample,
}

pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub mode: InferMode,
    pub threshold: f64,
    pub seed: u64,
}

/// Returns the files written.
pub fn cmd_infer(a: &InferArgs) -> Result<Vec<PathBuf>, CliError> {
    let (model, _, sha) = load_checkpoint(&a.checkpoint)?;
    let slices = read_slices(&a.input)?;
    let refs: Vec<&ImageSlice> = slices.iter().collect();
    fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    let meta = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "checkpoint_sha256": sha,
        "input": a.input.display().to_string(),
        "seed": a.seed,
    });
    let n = slices.len();
    let mut written = Vec::new();
    let mut png = |name: String, bytes: Vec<u8>| -> Result<(), CliError> {
        let p = a.out.join(name);
        write_file(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    match a.mode {
        InferMode::Segment => {
            let (prob, mask) = segment(&model, &refs, a.threshold)?;
            let mut meta = meta.clone();
            meta["threshold"] = json!(a.threshold);
            write_array(&a.out, "probability", &prob, prob.shape(), "f32", &meta)?;
            write_array(&a.out, "mask", &mask, mask.shape(), "u8", &meta)?;
            for k in 0..n {
                png(format!("slice_{k:04}_probability.png"), map_png(prob.index_axis(Axis(0), k), 0.0, 1.0))?;
                let m = mask.index_axis(Axis(0), k).mapv(f32::from);
                png(format!("slice_{k:04}_mask.png"), map_png(m.view(), 0.0, 1.0))?;
            }
        }
        InferMode::Inpaint | InferMode::Sample => {
            let (stem, result) = if a.mode == InferMode::Inpaint {
                ("healthy", inpaint_healthy(&model, &refs)?)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
                ("sample", sample_pathology(&model, &refs, &mut rng)?)
            };
            write_array(&a.out, stem, &result.output, result.output.shape(), "f32", &meta)?;
            write_array(&a.out, "inpainting", &result.inpaint, result.inpaint.shape(), "f32", &meta)?;
            write_array(&a.out, "labelmap", &result.labelmap, result.labelmap.shape(), "f32", &meta)?;
            let out = result.output.view().into_dimensionality::<Ix4>().expect("(N, C, H, W)");
            for k in 0..n {
                for (c, ch) in out.index_axis(Axis(0), k).axis_iter(Axis(0)).enumerate() {
                    png(format!("slice_{k:04}_{stem}_c{c}.png"), map_png(ch, -1.0, 1.0))?;
                }
                png(
                    format!("slice_{k:04}_labelmap.png"),
                    map_png(result.labelmap.index_axis(Axis(0), k), 0.0, 1.0),
                )?;
            }
        }
    }
    Ok(written)
}

pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub split: Split,
    pub threshold: Option<f64>,
    pub out: PathBuf,
}

/// Writes the reports and returns the printed table.
pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<String, CliError> {
    let (model, config, sha) = load_checkpoint(&a.checkpoint)?;
    let config = config.unwrap_or_default();
    let threshold = a.threshold.unwrap_or(config.eval.threshold);
    let records = load_dataset(&a.data)?;
    let slices: Vec<ImageSlice> = prepare_slices(
        &records,
        a.split,
        config.data.slice_lo,
        config.data.slice_hi,
        config.data.pathology_threshold,
    )?
    .into_iter()
    .filter(|s| s.domain == Domain::Pathological)
    .collect();
    let report = evaluate_dataset(&model, &slices, threshold, config.eval.batch_size)?;
    let extra = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "checkpoint_sha256": sha,
        "data": a.data.display().to_string(),
        "split": a.split,
        "threshold": threshold,
        "config": serde_json::to_value(&config).expect("serializable config"),
    });
    report.write(&a.out, extra)?;
    Ok(report.table())
}

pub struct PanelArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub index: usize,
    pub mask: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn cmd_render_panel(a: &PanelArgs) -> Result<(), CliError> {
    let (model, _, _) = load_checkpoint(&a.checkpoint)?;
    let slices = read_slices(&a.input)?;
    let slice = slices
        .get(a.index)
        .ok_or_else(|| CliError::Usage(format!("--index {} out of range ({} slices)", a.index, slices.len())))?;
    let mask = match &a.mask {
        Some(p) => {
            let file = fs::File::open(p).map_err(io(p))?;
            let m = ArrayD::<u8>::read_npy(file).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            let m = match m.ndim() {
                2 => m.into_dimensionality().expect("two dimensions"),
                3 => m
                    .into_dimensionality::<Ix3>()
                    .expect("three dimensions")
                    .index_axis_move(Axis(0), a.index),
                n => return Err(CliError::Usage(format!("mask must be 2-D or 3-D, got {n} dimensions"))),
            };
            Some(m)
        }
        None => None,
    };
    let panel = build_panel(&model, slice, mask.as_ref())?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    write_file(&a.out, panel.png_bytes())
}

/// Panel for one slice: the slice, its healthy inpainting and labelmap, and
/// the healthy translation.
pub fn build_panel(model: &PathoGan<f32>, slice: &ImageSlice, mask: Option<&Array2<u8>>) -> Result<Panel, CliError> {
    let r = inpaint_healthy(model, &[slice])?;
    let first = |x: &ArrayD<f32>| {
        x.view()
            .into_dimensionality::<Ix4>()
            .expect("(N, C, H, W)")
            .index_axis(Axis(0), 0)
            .to_owned()
    };
    Ok(Panel::compose(
        &slice.data,
        mask,
        &first(&r.inpaint),
        &r.labelmap.index_axis(Axis(0), 0).to_owned(),
        &first(&r.output),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetRole {
    Encoder,
    Decoder,
    Zb,
    Discriminator,
}

pub struct DescribeArgs {
    pub spec: String,
    pub role: Option<NetRole>,
    pub channels: usize,
    pub size: usize,
    pub z: usize,
}

pub fn cmd_netspec_describe(a: &DescribeArgs) -> Result<String, CliError> {
    let usage = |e: pathogan::netspec::NetSpecError| CliError::Usage(e.to_string());
    // `i` depends on the encoder's downsampling, which the reference
    // encoder fixes at four steps.
    let i = a.size >> 4;
    let symbols = Symbols::new(a.z, i.max(1), a.channels + 1);
    let spec = parse_netspec(&a.spec, &symbols).map_err(usage)?;
    let role = a.role.unwrap_or(if a.spec.trim_start().starts_with('l') {
        NetRole::Decoder
    } else {
        NetRole::Encoder
    });
    let input = match role {
        NetRole::Decoder => Shape::Vector(2 * a.z),
        _ => Shape::image(a.channels, a.size, a.size),
    };
    let trace = describe(&spec, input).map_err(usage)?;
    Ok(format!("{spec}\n{trace}"))
}
