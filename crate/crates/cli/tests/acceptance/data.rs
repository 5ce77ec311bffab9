use ndarray::{Array3, Array4, Axis};
use pathogan::data::{
    augment, augment_with, label_slice, normalize_volume, select_and_label_slices, standardize_volume,
    AugmentationConfig, AugmentationDraws, VolumeRecord,
};
use pathogan::model::{Domain, ImageSlice};
use rand::Rng;

use crate::{ensure, rng, Outcome};

fn moments(volumes: usize) -> Result<f64, String> {
    let mut r = rng(606);
    let mut worst = 0f64;
    for k in 0..volumes {
        let channels = Array4::from_shape_fn((2, 3, 12, 12), |_| {
            if r.gen_bool(0.3) {
                0.0
            } else {
                r.gen_range(-50.0f32..400.0)
            }
        });
        let v = VolumeRecord::new(format!("v{k}"), channels, None).map_err(|e| e.to_string())?;
        let standardized = standardize_volume(&v).map_err(|e| e.to_string())?;
        let normalized = normalize_volume(&v).map_err(|e| e.to_string())?;
        for c in 0..2 {
            let before = v.channels.index_axis(Axis(0), c);
            let after = standardized.channels.index_axis(Axis(0), c);
            let vals: Vec<f64> = before
                .iter()
                .zip(after.iter())
                .filter(|(&b, _)| b != 0.0)
                .map(|(_, &a)| a as f64)
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            worst = worst.max(mean.abs()).max((var - 1.0 / 3.0).abs());
            let zeros_kept = before.iter().zip(after.iter()).all(|(&b, &a)| b != 0.0 || a == 0.0);
            ensure(zeros_kept, || format!("volume {k} channel {c}: zero voxels moved"))?;
        }
        let clipped = standardized.channels.mapv(|x| x.clamp(-1.0, 1.0));
        ensure(clipped == normalized.channels, || format!("volume {k}: normalize is not clip(standardize)"))?;
    }
    ensure(worst <= 1e-6, || format!("moment error {worst:e}"))?;
    Ok(worst)
}

fn labeling() -> Result<(), String> {
    ensure(label_slice(0, 20) == Some(Domain::Healthy), || "0 pixels".into())?;
    ensure(label_slice(20, 20).is_none(), || "20 pixels must be discarded".into())?;
    ensure(label_slice(21, 20) == Some(Domain::Pathological), || "21 pixels".into())?;

    let counts = [0usize, 20, 21];
    let mut seg = Array3::zeros((3, 8, 8));
    for (z, &n) in counts.iter().enumerate() {
        for k in 0..n {
            seg[[z, k / 8, k % 8]] = 1;
        }
    }
    let v = VolumeRecord::new("p", Array4::from_elem((1, 3, 8, 8), 0.5), Some(seg)).map_err(|e| e.to_string())?;
    let got: Vec<_> = select_and_label_slices(&v, 0, 2, 20)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|s| (s.slice_index, s.domain))
        .collect();
    ensure(got == vec![(0, Domain::Healthy), (2, Domain::Pathological)], || format!("labelled {got:?}"))
}

fn augmentation_identity() -> Result<f64, String> {
    let mut r = rng(607);
    let mut worst = 0f64;
    let cfg = AugmentationConfig::default();
    let still = AugmentationConfig {
        mirror_prob: 0.0,
        rotation_range: 0.0,
        scale_base: 1.0,
        deform_sigma: 0.0,
        ..cfg
    };
    for k in 0..20 {
        let (h, w) = (r.gen_range(4..40), r.gen_range(4..40));
        let s = ImageSlice {
            data: Array3::from_shape_fn((2, h, w), |_| r.gen_range(-1.0f32..=1.0)),
            patient_id: format!("s{k}"),
            slice_index: 0,
            domain: Domain::Pathological,
            mask: Some(ndarray::Array2::from_shape_fn((h, w), |_| u8::from(r.gen_bool(0.3)))),
        };
        let outs = [
            augment_with(&s, &AugmentationDraws::neutral(h, w, cfg.deform_grid_spacing), &cfg),
            augment(&s, &still, &mut r),
        ];
        for out in outs {
            ensure(out.mask == s.mask, || format!("slice {k}: mask changed"))?;
            for (a, b) in out.data.iter().zip(s.data.iter()) {
                worst = worst.max((a - b).abs() as f64);
            }
        }
    }
    ensure(worst <= 1e-6, || format!("identity augmentation moved values by {worst:e}"))?;
    Ok(worst)
}

pub fn run() -> Outcome {
    let m = moments(25)?;
    labeling()?;
    let a = augmentation_identity()?;
    Ok(format!(
        "moment error {m:.1e} over 25 volumes; 0/20/21-pixel labels; identity augmentation error {a:.1e}"
    ))
}
