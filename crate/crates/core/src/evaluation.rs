//! Inference helpers and segmentation metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayD, Axis};
use pathogan_autograd::Var;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{stack_batch, DeltaSource, ImageSlice, Mode, ModelError, PathoGan};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("model expects {expected} channels, slice has {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("slice {0} has no gold segmentation")]
    MissingMask(String),
    #[error("no slices to evaluate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

fn check_channels(model: &PathoGan<f32>, slices: &[&ImageSlice]) -> Result<(), EvalError> {
    let expected = model.config.n_channels;
    for s in slices {
        if s.channels() != expected {
            return Err(EvalError::ChannelMismatch {
                expected,
                found: s.channels(),
            });
        }
    }
    Ok(())
}

/// Test-mode translations of a batch into the healthy domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Inpainting {
    /// `(N, C, H, W)`
    pub output: ArrayD<f32>,
    /// `(N, C, H, W)`
    pub inpaint: ArrayD<f32>,
    /// `(N, H, W)`
    pub labelmap: Array3<f32>,
}

pub fn inpaint_healthy(model: &PathoGan<f32>, slices: &[&ImageSlice]) -> Result<Inpainting, EvalError> {
    check_channels(model, slices)?;
    let x = Var::constant(stack_batch::<f32>(slices));
    // Test mode draws nothing from the RNG.
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let t = model.generator_b_forward(&x, Mode::Test, &mut rng)?;
    let labelmap = t
        .residual
        .labelmap
        .value()
        .index_axis(Axis(1), 0)
        .to_owned()
        .into_dimensionality()
        .expect("(N, H, W)");
    Ok(Inpainting {
        output: t.output.value().clone(),
        inpaint: t.residual.inpaint.value().clone(),
        labelmap,
    })
}

/// Probability maps `(N, H, W)` and binary masks at `threshold`.
pub fn segment(
    model: &PathoGan<f32>,
    slices: &[&ImageSlice],
    threshold: f64,
) -> Result<(Array3<f32>, Array3<u8>), EvalError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(EvalError::InvalidThreshold(threshold));
    }
    let prob = inpaint_healthy(model, slices)?.labelmap;
    let mask = threshold_map(&prob, threshold);
    Ok((prob, mask))
}

pub fn threshold_map(prob: &Array3<f32>, threshold: f64) -> Array3<u8> {
    prob.mapv(|p| u8::from(p as f64 >= threshold))
}

/// Healthy-to-pathological translation with the pathology code drawn from
/// the prior; everything else runs in test mode.
pub fn sample_pathology<R: Rng + ?Sized>(
    model: &PathoGan<f32>,
    slices: &[&ImageSlice],
    rng: &mut R,
) -> Result<Inpainting, EvalError> {
    check_channels(model, slices)?;
    let x = Var::constant(stack_batch::<f32>(slices));
    let t = model.generator_a_forward(&x, DeltaSource::Prior, Mode::Test, rng)?;
    let labelmap = t
        .residual
        .labelmap
        .value()
        .index_axis(Axis(1), 0)
        .to_owned()
        .into_dimensionality()
        .expect("(N, H, W)");
    Ok(Inpainting {
        output: t.output.value().clone(),
        inpaint: t.residual.inpaint.value().clone(),
        labelmap,
    })
}

fn count(m: &Array2<u8>) -> usize {
    m.iter().filter(|&&v| v != 0).count()
}

/// Dice overlap in percent; 100 when both masks are empty.
pub fn dice(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "dice: mask shapes differ");
    let (na, nb) = (count(a), count(b));
    if na + nb == 0 {
        return 100.0;
    }
    let inter = a.iter().zip(b.iter()).filter(|(&x, &y)| x != 0 && y != 0).count();
    100.0 * 2.0 * inter as f64 / (na + nb) as f64
}

/// Mask pixels with at least one 4-neighbour outside the mask (the image
/// border counts as outside).
pub fn boundary(m: &Array2<u8>) -> Array2<u8> {
    let (h, w) = m.dim();
    let on = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[[y as usize, x as usize]] != 0;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (yi, xi) = (y as isize, x as isize);
        let inner = on(yi - 1, xi) && on(yi + 1, xi) && on(yi, xi - 1) && on(yi, xi + 1);
        u8::from(m[[y, x]] != 0 && !inner)
    })
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let first = f.iter().position(|x| x.is_finite());
    let Some(first) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let sq = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if sq <= z[k] && k > 0 {
                k -= 1;
            } else if sq <= z[k] {
                // k == 0 and z[0] is -inf: unreachable, kept for clarity.
                break;
            } else {
                k += 1;
                v[k] = q;
                z[k] = sq;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest set pixel of
/// `seeds`; infinite when `seeds` is empty.
pub fn distance_transform(seeds: &Array2<u8>) -> Array2<f64> {
    let (h, w) = seeds.dim();
    let mut g = seeds.mapv(|v| if v != 0 { 0.0 } else { f64::INFINITY });
    let mut col = vec![0.0; h];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = g[[y, x]];
        }
        edt_1d(&col, &mut out[..h]);
        for y in 0..h {
            g[[y, x]] = out[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        for x in 0..w {
            row[x] = g[[y, x]];
        }
        edt_1d(&row, &mut out[..w]);
        for x in 0..w {
            g[[y, x]] = out[x].sqrt();
        }
    }
    g
}

/// Distances from each boundary pixel of `a` to the boundary of `b`.
pub fn directed_boundary_distances(a: &Array2<u8>, b: &Array2<u8>) -> Vec<f64> {
    let dt = distance_transform(&boundary(b));
    boundary(a)
        .indexed_iter()
        .filter(|(_, &v)| v != 0)
        .map(|((y, x), _)| dt[[y, x]])
        .collect()
}

/// Linear interpolation between order statistics at position `q (n - 1)`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Distance reported when exactly one of the masks is empty.
pub fn empty_penalty(shape: (usize, usize)) -> f64 {
    ((shape.0 * shape.0 + shape.1 * shape.1) as f64).sqrt()
}

/// `Some(d)` for the both-empty / one-empty cases, `None` otherwise.
fn empty_case(a: &Array2<u8>, b: &Array2<u8>) -> Option<f64> {
    match (count(a) == 0, count(b) == 0) {
        (true, true) => Some(0.0),
        (false, false) => None,
        _ => Some(empty_penalty(a.dim())),
    }
}

/// 95th percentile of the pooled symmetric boundary distances.
pub fn hd95(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "hd95: mask shapes differ");
    if let Some(d) = empty_case(a, b) {
        return d;
    }
    let mut d = directed_boundary_distances(a, b);
    d.extend(directed_boundary_distances(b, a));
    percentile(&d, 0.95)
}

/// Mean of the two directed average boundary distances.
pub fn avd(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "avd: mask shapes differ");
    if let Some(d) = empty_case(a, b) {
        return d;
    }
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    0.5 * (mean(directed_boundary_distances(a, b)) + mean(directed_boundary_distances(b, a)))
}

/// Dice of each patient's stacked slices. Patients without slices are
/// skipped with a warning.
pub fn dice_per_patient(groups: &BTreeMap<String, Vec<(Array2<u8>, Array2<u8>)>>) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (id, pairs) in groups {
        if pairs.is_empty() {
            log::warn!("patient {id} has no evaluated slices; excluded from per-patient Dice");
            continue;
        }
        let (mut inter, mut total) = (0usize, 0usize);
        for (p, g) in pairs {
            assert_eq!(p.shape(), g.shape(), "dice_per_patient: mask shapes differ");
            inter += p.iter().zip(g.iter()).filter(|(&x, &y)| x != 0 && y != 0).count();
            total += count(p) + count(g);
        }
        let d = if total == 0 {
            100.0
        } else {
            100.0 * 2.0 * inter as f64 / total as f64
        };
        out.push((id.clone(), d));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Some(Summary {
            mean,
            std,
            median: percentile(values, 0.5),
        })
    }

    /// `mean±std(median)` with one decimal.
    pub fn format(&self) -> String {
        format_summary(self.mean, self.std, self.median)
    }
}

pub fn format_summary(mean: f64, std: f64, median: f64) -> String {
    format!("{mean:.1}±{std:.1}({median:.1})")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub patient_id: String,
    pub slice_index: usize,
    pub dice: f64,
    pub hd95: f64,
    pub avd: f64,
    /// Exactly one of prediction and gold was empty.
    pub empty_penalty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub patient_id: String,
    pub dice_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dice: Summary,
    pub hd95: Summary,
    pub avd: Summary,
    pub dice_pp: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub per_slice: Vec<SliceMetrics>,
    pub per_patient: Vec<PatientMetrics>,
    pub aggregate: Aggregate,
}

/// Published held-out scores of the weakly supervised model and of the
/// supervised baseline, as (mean, std, median) for Dice, HD95, AVD and
/// Dice PP.
pub const REFERENCE_ROWS: [(&str, [(f64, f64, f64); 4]); 2] = [
    (
        "PathoGAN (published)",
        [(72.9, 23.8, 81.4), (39.4, 29.9, 37.6), (9.4, 13.7, 4.6), (77.4, 14.4, 81.7)],
    ),
    (
        "MDGRU (published)",
        [(86.3, 21.3, 93.6), (3.9, 9.5, 1.0), (1.1, 4.9, 0.2), (90.6, 9.5, 93.1)],
    ),
];

/// Compute every metric for a predicted and a gold mask per slice.
pub fn metrics_from_masks(
    slices: &[(&ImageSlice, Array2<u8>)],
) -> Result<MetricsRecord, EvalError> {
    if slices.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut per_slice = Vec::with_capacity(slices.len());
    let mut groups: BTreeMap<String, Vec<(Array2<u8>, Array2<u8>)>> = BTreeMap::new();
    for (s, pred) in slices {
        let gold = s
            .mask
            .as_ref()
            .ok_or_else(|| EvalError::MissingMask(format!("{}:{}", s.patient_id, s.slice_index)))?;
        per_slice.push(SliceMetrics {
            patient_id: s.patient_id.clone(),
            slice_index: s.slice_index,
            dice: dice(pred, gold),
            hd95: hd95(pred, gold),
            avd: avd(pred, gold),
            empty_penalty: (count(pred) == 0) != (count(gold) == 0),
        });
        groups
            .entry(s.patient_id.clone())
            .or_default()
            .push((pred.clone(), gold.clone()));
    }
    let per_patient: Vec<PatientMetrics> = dice_per_patient(&groups)
        .into_iter()
        .map(|(patient_id, dice_pp)| PatientMetrics { patient_id, dice_pp })
        .collect();
    let col = |f: fn(&SliceMetrics) -> f64| Summary::of(&per_slice.iter().map(f).collect::<Vec<_>>()).expect("nonempty");
    let aggregate = Aggregate {
        dice: col(|m| m.dice),
        hd95: col(|m| m.hd95),
        avd: col(|m| m.avd),
        dice_pp: Summary::of(&per_patient.iter().map(|p| p.dice_pp).collect::<Vec<_>>()).expect("nonempty"),
    };
    Ok(MetricsRecord {
        per_slice,
        per_patient,
        aggregate,
    })
}

/// Segment every slice (in batches) and score it against its gold mask.
pub fn evaluate_dataset(
    model: &PathoGan<f32>,
    slices: &[ImageSlice],
    threshold: f64,
    batch_size: usize,
) -> Result<MetricsRecord, EvalError> {
    let mut scored = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(batch_size.max(1)) {
        let refs: Vec<&ImageSlice> = chunk.iter().collect();
        let (_, masks) = segment(model, &refs, threshold)?;
        for (s, m) in chunk.iter().zip(masks.axis_iter(Axis(0))) {
            scored.push((s, m.to_owned()));
        }
    }
    metrics_from_masks(&scored)
}

impl MetricsRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patient_id,slice_index,dice,hd95,avd,empty_penalty\n");
        for m in &self.per_slice {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                m.patient_id, m.slice_index, m.dice, m.hd95, m.avd, m.empty_penalty
            )
            .unwrap();
        }
        out
    }

    /// Aggregate table in `mean±std(median)` form with the published rows
    /// underneath for comparison.
    pub fn table(&self) -> String {
        let a = &self.aggregate;
        let mut out = String::new();
        writeln!(out, "{:<24}{:>20}{:>20}{:>20}{:>20}", "", "Dice", "HD95", "AVD", "Dice PP").unwrap();
        writeln!(
            out,
            "{:<24}{:>20}{:>20}{:>20}{:>20}",
            "this run",
            a.dice.format(),
            a.hd95.format(),
            a.avd.format(),
            a.dice_pp.format()
        )
        .unwrap();
        writeln!(out, "reference (different data, not comparable):").unwrap();
        for (name, cols) in REFERENCE_ROWS {
            let cells: Vec<String> = cols
                .iter()
                .map(|&(m, s, med)| format_summary(m, s, med))
                .collect();
            writeln!(
                out,
                "{:<24}{:>20}{:>20}{:>20}{:>20}",
                name, cells[0], cells[1], cells[2], cells[3]
            )
            .unwrap();
        }
        let flagged = self.per_slice.iter().filter(|m| m.empty_penalty).count();
        if flagged > 0 {
            writeln!(
                out,
                "{flagged} slice(s) had exactly one empty mask; their distances use the image diagonal"
            )
            .unwrap();
        }
        out
    }

    pub fn write(&self, dir: &Path, extra: serde_json::Value) -> Result<(), EvalError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval_report.csv"), self.to_csv())?;
        let mut json = serde_json::json!({
            "aggregate": self.aggregate,
            "per_patient": self.per_patient,
            "slices": self.per_slice.len(),
        });
        if let (Some(obj), serde_json::Value::Object(extra)) = (json.as_object_mut(), extra) {
            obj.extend(extra);
        }
        fs::write(
            dir.join("eval_report.json"),
            serde_json::to_string_pretty(&json).expect("serializable report"),
        )?;
        Ok(())
    }
}

/// Boolean mask from a probability map slice.
pub fn mask_of(prob: &Array3<f32>, index: usize, threshold: f64) -> Array2<u8> {
    prob.slice(s![index, .., ..]).mapv(|p| u8::from(p as f64 >= threshold))
}
