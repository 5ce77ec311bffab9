//! Volumes, slice selection, augmentation, phantoms and on-disk datasets.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, Ix3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Domain, ImageSlice};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("channel {channel} of {patient} has no nonzero voxels")]
    EmptyChannel { patient: String, channel: usize },
    #[error("channel {channel} of {patient} has zero variance over its nonzero voxels")]
    DegenerateChannel { patient: String, channel: usize },
    #[error("{0} has no segmentation")]
    MissingSegmentation(String),
    #[error("slice range [{lo}, {hi}] is invalid for depth {depth}")]
    InvalidRange { lo: usize, hi: usize, depth: usize },
    #[error("requested {requested} {domain} slices but only {available} are available")]
    InsufficientSlices {
        domain: &'static str,
        requested: usize,
        available: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl ToString) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// One patient: `n` channels of `(D, H, W)` plus an optional manual
/// segmentation, nonzero where pathological.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRecord {
    pub patient_id: String,
    /// `(n, D, H, W)`
    pub channels: Array4<f32>,
    /// `(D, H, W)`
    pub segmentation: Option<Array3<u8>>,
}

impl VolumeRecord {
    pub fn new(
        patient_id: impl Into<String>,
        channels: Array4<f32>,
        segmentation: Option<Array3<u8>>,
    ) -> Result<Self, DataError> {
        let patient_id = patient_id.into();
        if let Some(seg) = &segmentation {
            if seg.shape() != &channels.shape()[1..] {
                return Err(DataError::ShapeMismatch(format!(
                    "{patient_id}: segmentation {:?} vs channels {:?}",
                    seg.shape(),
                    channels.shape()
                )));
            }
        }
        Ok(VolumeRecord {
            patient_id,
            channels,
            segmentation,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.shape()[0]
    }

    pub fn depth(&self) -> usize {
        self.channels.shape()[1]
    }
}

/// Shift and scale each channel so that its nonzero voxels have mean 0 and
/// population variance 1/3. Zero voxels stay zero. No clipping.
pub fn standardize_volume(v: &VolumeRecord) -> Result<VolumeRecord, DataError> {
    let mut out = v.clone();
    for (channel, mut data) in out.channels.axis_iter_mut(Axis(0)).enumerate() {
        let nonzero: Vec<f64> = data.iter().filter(|&&x| x != 0.0).map(|&x| x as f64).collect();
        if nonzero.is_empty() {
            return Err(DataError::EmptyChannel {
                patient: v.patient_id.clone(),
                channel,
            });
        }
        let n = nonzero.len() as f64;
        let mean = nonzero.iter().sum::<f64>() / n;
        let var = nonzero.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if var <= 0.0 {
            return Err(DataError::DegenerateChannel {
                patient: v.patient_id.clone(),
                channel,
            });
        }
        let scale = (1.0 / 3.0 / var).sqrt();
        data.mapv_inplace(|x| if x == 0.0 { 0.0 } else { ((x as f64 - mean) * scale) as f32 });
    }
    Ok(out)
}

/// [`standardize_volume`] followed by clipping to `[-1, 1]`.
pub fn normalize_volume(v: &VolumeRecord) -> Result<VolumeRecord, DataError> {
    let mut out = standardize_volume(v)?;
    out.channels.mapv_inplace(|x| x.clamp(-1.0, 1.0));
    Ok(out)
}

/// Domain of a slice with `count` segmented pixels; `None` means discard.
pub fn label_slice(count: usize, threshold: usize) -> Option<Domain> {
    if count == 0 {
        Some(Domain::Healthy)
    } else if count > threshold {
        Some(Domain::Pathological)
    } else {
        None
    }
}

/// Slices `lo..=hi` along the depth axis that receive a domain label.
pub fn select_and_label_slices(
    v: &VolumeRecord,
    lo: usize,
    hi: usize,
    threshold: usize,
) -> Result<Vec<ImageSlice>, DataError> {
    let seg = v
        .segmentation
        .as_ref()
        .ok_or_else(|| DataError::MissingSegmentation(v.patient_id.clone()))?;
    let depth = v.depth();
    if lo > hi || hi >= depth {
        return Err(DataError::InvalidRange { lo, hi, depth });
    }
    let mut out = Vec::new();
    for z in lo..=hi {
        let mask = seg.index_axis(Axis(0), z).mapv(|m| u8::from(m != 0));
        let count = mask.iter().filter(|&&m| m != 0).count();
        if let Some(domain) = label_slice(count, threshold) {
            out.push(ImageSlice {
                data: v.channels.index_axis(Axis(1), z).to_owned(),
                patient_id: v.patient_id.clone(),
                slice_index: z,
                domain,
                mask: Some(mask),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub mirror_prob: f64,
    /// Rotation angle is drawn from `U[-rotation_range, rotation_range]`.
    pub rotation_range: f64,
    /// Scale is `scale_base^r` with `r ~ U[-1, 1]`.
    pub scale_base: f64,
    pub deform_grid_spacing: usize,
    pub deform_sigma: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            mirror_prob: 0.5,
            rotation_range: 0.1,
            scale_base: 1.1,
            deform_grid_spacing: 128,
            deform_sigma: 5.0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<(), String> {
        let named = [
            ("mirror_prob", self.mirror_prob),
            ("rotation_range", self.rotation_range),
            ("scale_base", self.scale_base),
            ("deform_sigma", self.deform_sigma),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("augment.{name} must be nonnegative, got {v}"));
            }
        }
        if self.mirror_prob > 1.0 {
            return Err(format!("augment.mirror_prob must not exceed 1, got {}", self.mirror_prob));
        }
        if self.scale_base <= 0.0 {
            return Err("augment.scale_base must be positive".into());
        }
        if self.deform_grid_spacing < 2 {
            return Err(format!(
                "augment.deform_grid_spacing must be at least 2, got {}",
                self.deform_grid_spacing
            ));
        }
        Ok(())
    }
}

/// The random quantities behind one augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationDraws {
    pub mirror: bool,
    pub angle: f64,
    /// Exponent `r` of the scale `base^r`.
    pub scale_exponent: f64,
    /// Displacements `(2, gy, gx)` at the coarse grid nodes, in pixels
    /// (row component first).
    pub grid: Array3<f64>,
}

/// Coarse grid node count along an axis of `len` pixels: enough nodes for
/// the four-tap B-spline support of every pixel.
pub fn grid_nodes(len: usize, spacing: usize) -> usize {
    (len.saturating_sub(1)) / spacing + 4
}

impl AugmentationDraws {
    pub fn neutral(h: usize, w: usize, spacing: usize) -> Self {
        AugmentationDraws {
            mirror: false,
            angle: 0.0,
            scale_exponent: 0.0,
            grid: Array3::zeros((2, grid_nodes(h, spacing), grid_nodes(w, spacing))),
        }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentationConfig, h: usize, w: usize, rng: &mut R) -> Self {
        let mirror = rng.gen::<f64>() < cfg.mirror_prob;
        let angle = if cfg.rotation_range > 0.0 {
            rng.gen_range(-cfg.rotation_range..=cfg.rotation_range)
        } else {
            0.0
        };
        let scale_exponent = rng.gen_range(-1.0..=1.0);
        let shape = (
            2,
            grid_nodes(h, cfg.deform_grid_spacing),
            grid_nodes(w, cfg.deform_grid_spacing),
        );
        let grid = if cfg.deform_sigma > 0.0 {
            let normal = Normal::new(0.0, cfg.deform_sigma).expect("valid sigma");
            Array3::from_shape_simple_fn(shape, || normal.sample(rng))
        } else {
            Array3::zeros(shape)
        };
        AugmentationDraws {
            mirror,
            angle,
            scale_exponent,
            grid,
        }
    }
}

/// Uniform cubic B-spline basis weights for fractional offset `u`.
fn bspline_weights(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u * u * u - 6.0 * u * u + 4.0) / 6.0,
        (-3.0 * u * u * u + 3.0 * u * u + 3.0 * u + 1.0) / 6.0,
        u * u * u / 6.0,
    ]
}

/// Dense `(2, H, W)` displacement field interpolated from the coarse grid.
pub fn displacement_field(grid: &Array3<f64>, h: usize, w: usize, spacing: usize) -> Array3<f64> {
    let sp = spacing as f64;
    let mut field = Array3::zeros((2, h, w));
    for y in 0..h {
        let fy = y as f64 / sp;
        let (iy, wy) = (fy.floor() as usize, bspline_weights(fy - fy.floor()));
        for x in 0..w {
            let fx = x as f64 / sp;
            let (ix, wx) = (fx.floor() as usize, bspline_weights(fx - fx.floor()));
            // Node k sits at (k - 1) * spacing.
            for c in 0..2 {
                let mut d = 0.0;
                for (a, wa) in wy.iter().enumerate() {
                    for (b, wb) in wx.iter().enumerate() {
                        d += wa * wb * grid[[c, iy + a, ix + b]];
                    }
                }
                field[[c, y, x]] = d;
            }
        }
    }
    field
}

fn bilinear(img: ndarray::ArrayView2<f32>, y: f64, x: f64) -> f64 {
    let (h, w) = (img.shape()[0] as isize, img.shape()[1] as isize);
    let (y0, x0) = (y.floor(), x.floor());
    let (dy, dx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            0.0
        } else {
            img[[yy as usize, xx as usize]] as f64
        }
    };
    let mut v = 0.0;
    // Skip taps with zero weight so exact grid positions reproduce input.
    for (yy, wy) in [(y0, 1.0 - dy), (y0 + 1, dy)] {
        if wy == 0.0 {
            continue;
        }
        for (xx, wx) in [(x0, 1.0 - dx), (x0 + 1, dx)] {
            if wx != 0.0 {
                v += wy * wx * at(yy, xx);
            }
        }
    }
    v
}

/// Apply a fixed set of draws: mirror, rotate, scale, deform, resample,
/// clip.
pub fn augment_with(s: &ImageSlice, draws: &AugmentationDraws, cfg: &AugmentationConfig) -> ImageSlice {
    let (c, h, w) = s.data.dim();
    let field = displacement_field(&draws.grid, h, w, cfg.deform_grid_spacing);
    let scale = cfg.scale_base.powf(draws.scale_exponent);
    let (sin, cos) = draws.angle.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let source = |y: usize, x: usize| {
        let py = y as f64 + field[[0, y, x]] - cy;
        let px = x as f64 + field[[1, y, x]] - cx;
        // Inverse rotation and scaling around the centre.
        let sy = (cos * py - sin * px) / scale + cy;
        let sx = (sin * py + cos * px) / scale + cx;
        let sx = if draws.mirror { w as f64 - 1.0 - sx } else { sx };
        (sy, sx)
    };
    let mut data = Array3::zeros((c, h, w));
    let mut mask = s.mask.as_ref().map(|_| Array2::zeros((h, w)));
    let mask_f = s.mask.as_ref().map(|m| m.mapv(|v| v as f32));
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source(y, x);
            for ch in 0..c {
                let v = bilinear(s.data.index_axis(Axis(0), ch), sy, sx);
                data[[ch, y, x]] = (v as f32).clamp(-1.0, 1.0);
            }
            if let (Some(m), Some(mf)) = (mask.as_mut(), mask_f.as_ref()) {
                m[[y, x]] = u8::from(bilinear(mf.view(), sy, sx) >= 0.5);
            }
        }
    }
    ImageSlice {
        data,
        mask,
        ..s.clone()
    }
}

pub fn augment<R: Rng + ?Sized>(s: &ImageSlice, cfg: &AugmentationConfig, rng: &mut R) -> ImageSlice {
    let (_, h, w) = s.data.dim();
    let draws = AugmentationDraws::sample(cfg, h, w, rng);
    augment_with(s, &draws, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainCounts {
    pub healthy: usize,
    pub pathological: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub healthy: Vec<ImageSlice>,
    pub pathological: Vec<ImageSlice>,
}

/// Uniform subsample without replacement, in the drawn order.
pub fn build_training_set<R: Rng + ?Sized>(
    slices: &[ImageSlice],
    counts: DomainCounts,
    rng: &mut R,
) -> Result<TrainingSet, DataError> {
    let pick = |domain: Domain, requested: usize, name: &'static str, rng: &mut R| {
        let pool: Vec<&ImageSlice> = slices.iter().filter(|s| s.domain == domain).collect();
        if requested > pool.len() {
            return Err(DataError::InsufficientSlices {
                domain: name,
                requested,
                available: pool.len(),
            });
        }
        Ok(pool
            .choose_multiple(rng, requested)
            .map(|s| (*s).clone())
            .collect::<Vec<_>>())
    };
    let healthy = pick(Domain::Healthy, counts.healthy, "healthy", rng)?;
    let pathological = pick(Domain::Pathological, counts.pathological, "pathological", rng)?;
    Ok(TrainingSet { healthy, pathological })
}

/// Slices per phantom volume.
pub const PHANTOM_DEPTH: usize = 8;

/// Draw a phantom volume of [`PHANTOM_DEPTH`] slices. The anatomy is an
/// elliptic cylinder with a darker core and a smooth texture; pathological
/// phantoms add one or two flattened ellipsoid blobs centred on slice 0,
/// whose contrast sign alternates across channels (bright in channel 0).
/// The blobs occupy a small share of the volume, so normalization leaves
/// the tissue statistics of slice 0 close to those of a healthy phantom.
fn phantom<R: Rng + ?Sized>(
    id: String,
    pathological: bool,
    size: usize,
    n_channels: usize,
    rng: &mut R,
) -> VolumeRecord {
    let sz = size as f64;
    let (cy, cx) = (
        sz / 2.0 + rng.gen_range(-0.05..0.05) * sz,
        sz / 2.0 + rng.gen_range(-0.05..0.05) * sz,
    );
    let (ay, ax) = (rng.gen_range(0.34..0.42) * sz, rng.gen_range(0.30..0.40) * sz);
    let radius2 = |y: f64, x: f64| ((y - cy) / ay).powi(2) + ((x - cx) / ax).powi(2);

    let mut blobs = Vec::new();
    if pathological {
        let count = rng.gen_range(1..=2);
        let scale = sz / 64.0;
        while blobs.len() < count {
            let r = rng.gen_range(4.5..8.0) * scale;
            let by = cy + rng.gen_range(-0.55..0.55) * ay;
            let bx = cx + rng.gen_range(-0.55..0.55) * ax;
            // Keep the whole blob inside the anatomy.
            let margin = ((by - cy).abs() + r) / ay <= 0.95 && ((bx - cx).abs() + r) / ax <= 0.95;
            if margin {
                blobs.push((by, bx, r));
            }
        }
    }
    // Slices are three pixels apart, so a blob spans at most three of them.
    let in_blob = |z: f64, y: f64, x: f64| {
        blobs.iter().any(|&(by, bx, r)| {
            let rz = r / 3.0;
            (z / rz).powi(2) + ((y - by).powi(2) + (x - bx).powi(2)) / (r * r) <= 1.0
        })
    };

    let mut channels = Array4::zeros((n_channels, PHANTOM_DEPTH, size, size));
    for c in 0..n_channels {
        let base = 100.0 + 25.0 * c as f64;
        let (fy, fx, ph) = (
            rng.gen_range(1.0..3.0) / sz,
            rng.gen_range(1.0..3.0) / sz,
            rng.gen_range(0.0..std::f64::consts::TAU),
        );
        let contrast = if c % 2 == 0 { 0.6 } else { -0.45 };
        for z in 0..PHANTOM_DEPTH {
            let zf = z as f64;
            for y in 0..size {
                for x in 0..size {
                    let (yf, xf) = (y as f64, x as f64);
                    let e = radius2(yf, xf);
                    if e > 1.0 {
                        continue;
                    }
                    let core = if e < 0.45 { 0.8 } else { 1.0 };
                    let texture = 1.0
                        + 0.10 * (std::f64::consts::TAU * (fy * yf + fx * xf) + ph + 0.3 * zf).sin()
                        + 0.05 * rng.gen_range(-1.0..1.0);
                    let mut v = base * core * texture;
                    if in_blob(zf, yf, xf) {
                        v *= 1.0 + contrast;
                    }
                    channels[[c, z, y, x]] = v as f32;
                }
            }
        }
    }
    let seg = Array3::from_shape_fn((PHANTOM_DEPTH, size, size), |(z, y, x)| {
        u8::from(radius2(y as f64, x as f64) <= 1.0 && in_blob(z as f64, y as f64, x as f64))
    });
    VolumeRecord::new(id, channels, Some(seg)).expect("consistent phantom shapes")
}

/// Synthetic phantom volumes: `count_a` healthy then `count_b`
/// pathological, raw intensities (not yet normalized).
pub fn generate_phantom_dataset<R: Rng + ?Sized>(
    count_a: usize,
    count_b: usize,
    size: usize,
    n_channels: usize,
    rng: &mut R,
) -> Vec<VolumeRecord> {
    let mut out = Vec::with_capacity(count_a + count_b);
    for k in 0..count_a {
        out.push(phantom(format!("healthy_{k:04}"), false, size, n_channels, rng));
    }
    for k in 0..count_b {
        out.push(phantom(format!("patho_{k:04}"), true, size, n_channels, rng));
    }
    out
}

/// Dataset manifest. File paths are relative to the manifest's directory;
/// `.npy` files hold `(D, H, W)` arrays, `.nii`/`.nii.gz` files are NIfTI
/// volumes indexed `(x, y, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub n_channels: usize,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub patient_id: String,
    pub channels: Vec<String>,
    pub segmentation: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    /// Structural checks that do not touch the referenced files.
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Manifest(m));
        if self.version != MANIFEST_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.n_channels == 0 {
            return bad("n_channels must be positive".into());
        }
        if self.records.is_empty() {
            return bad("no records".into());
        }
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if r.patient_id.is_empty() {
                return bad("empty patient_id".into());
            }
            if !ids.insert(&r.patient_id) {
                return bad(format!("duplicate patient_id {}", r.patient_id));
            }
            if r.channels.len() != self.n_channels {
                return bad(format!(
                    "{} lists {} channel files, expected {}",
                    r.patient_id,
                    r.channels.len(),
                    self.n_channels
                ));
            }
            let files = r.channels.iter().chain(r.segmentation.iter());
            for f in files {
                if !(f.ends_with(".npy") || f.ends_with(".nii") || f.ends_with(".nii.gz")) {
                    return bad(format!("{}: unsupported file type {f}", r.patient_id));
                }
                if Path::new(f).is_absolute() || f.split('/').any(|p| p == "..") {
                    return bad(format!("{}: paths must stay inside the dataset directory: {f}", r.patient_id));
                }
            }
        }
        Ok(())
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<(Manifest, PathBuf), DataError> {
    let file = manifest_path(path);
    let text = fs::read_to_string(&file).map_err(io_err(&file))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", file.display())))?;
    manifest.validate()?;
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, root))
}

fn read_npy_f32(path: &Path) -> Result<Array3<f32>, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    ndarray_npy::ReadNpyExt::read_npy(file).map_err(|e: ndarray_npy::ReadNpyError| format_err(path, e))
}

fn read_npy_u8(path: &Path) -> Result<Array3<u8>, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    ndarray_npy::ReadNpyExt::read_npy(file).map_err(|e: ndarray_npy::ReadNpyError| format_err(path, e))
}

/// NIfTI volume as `(z, y, x)`.
fn read_nifti(path: &Path) -> Result<Array3<f32>, DataError> {
    use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
    let obj = ReaderOptions::new().read_file(path).map_err(|e| format_err(path, e))?;
    let data = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| format_err(path, e))?;
    let data = data
        .into_dimensionality::<Ix3>()
        .map_err(|_| format_err(path, "expected a 3-D volume"))?;
    Ok(data.permuted_axes([2, 1, 0]).as_standard_layout().to_owned())
}

fn read_volume(path: &Path) -> Result<Array3<f32>, DataError> {
    let name = path.to_string_lossy();
    if name.ends_with(".npy") {
        read_npy_f32(path)
    } else {
        read_nifti(path)
    }
}

fn read_segmentation(path: &Path) -> Result<Array3<u8>, DataError> {
    if path.to_string_lossy().ends_with(".npy") {
        read_npy_u8(path)
    } else {
        Ok(read_nifti(path)?.mapv(|v| u8::from(v != 0.0)))
    }
}

/// Load every record of a manifest (path to the file or its directory).
pub fn load_dataset(path: &Path) -> Result<Vec<(VolumeRecord, Split)>, DataError> {
    let (manifest, root) = read_manifest(path)?;
    let mut out = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let arrays = r
            .channels
            .iter()
            .map(|f| read_volume(&root.join(f)))
            .collect::<Result<Vec<_>, _>>()?;
        let shape = arrays[0].dim();
        if arrays.iter().any(|a| a.dim() != shape) {
            return Err(DataError::ShapeMismatch(format!("{}: channel shapes differ", r.patient_id)));
        }
        let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
        let channels = ndarray::stack(Axis(0), &views).expect("equal shapes");
        let segmentation = r
            .segmentation
            .as_ref()
            .map(|f| read_segmentation(&root.join(f)))
            .transpose()?;
        out.push((VolumeRecord::new(r.patient_id.clone(), channels, segmentation)?, r.split));
    }
    Ok(out)
}

/// Write records as `.npy` files plus a manifest; returns the manifest path.
pub fn write_dataset(dir: &Path, records: &[(VolumeRecord, Split)]) -> Result<PathBuf, DataError> {
    use ndarray_npy::WriteNpyExt;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let n_channels = records.first().map_or(0, |(r, _)| r.n_channels());
    let mut entries = Vec::with_capacity(records.len());
    for (rec, split) in records {
        if rec.n_channels() != n_channels {
            return Err(DataError::ShapeMismatch(format!("{}: channel count differs", rec.patient_id)));
        }
        let mut channels = Vec::with_capacity(n_channels);
        for (c, data) in rec.channels.axis_iter(Axis(0)).enumerate() {
            let name = format!("{}_ch{c}.npy", rec.patient_id);
            let path = dir.join(&name);
            let file = fs::File::create(&path).map_err(io_err(&path))?;
            data.to_owned().write_npy(file).map_err(|e| format_err(&path, e))?;
            channels.push(name);
        }
        let segmentation = match &rec.segmentation {
            Some(seg) => {
                let name = format!("{}_seg.npy", rec.patient_id);
                let path = dir.join(&name);
                let file = fs::File::create(&path).map_err(io_err(&path))?;
                seg.write_npy(file).map_err(|e| format_err(&path, e))?;
                Some(name)
            }
            None => None,
        };
        entries.push(ManifestRecord {
            patient_id: rec.patient_id.clone(),
            channels,
            segmentation,
            split: *split,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        n_channels,
        records: entries,
    };
    manifest.validate()?;
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(path)
}

/// Load a 2-D float image array `(C, H, W)` or `(H, W)` from `.npy`.
pub fn read_image_npy(path: &Path) -> Result<Array3<f32>, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let a: ArrayD<f32> =
        ndarray_npy::ReadNpyExt::read_npy(file).map_err(|e: ndarray_npy::ReadNpyError| format_err(path, e))?;
    match a.ndim() {
        2 => Ok(a.insert_axis(Axis(0)).into_dimensionality().expect("3-D")),
        3 => Ok(a.into_dimensionality().expect("3-D")),
        n => Err(format_err(path, format!("expected a 2-D or 3-D array, got {n}-D"))),
    }
}

/// Slices of every record in `split`, normalized and labeled.
pub fn prepare_slices(
    records: &[(VolumeRecord, Split)],
    split: Split,
    lo: usize,
    hi: usize,
    threshold: usize,
) -> Result<Vec<ImageSlice>, DataError> {
    let mut out = Vec::new();
    for (rec, s) in records {
        if *s == split {
            out.extend(select_and_label_slices(&normalize_volume(rec)?, lo, hi, threshold)?);
        }
    }
    Ok(out)
}
