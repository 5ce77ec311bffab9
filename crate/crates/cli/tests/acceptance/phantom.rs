use ndarray::{Array2, Axis};
use pathogan::checkpoint::Checkpoint;
use pathogan::data::{generate_phantom_dataset, normalize_volume, select_and_label_slices, AugmentationConfig};
use pathogan::evaluation::{evaluate_dataset, sample_pathology};
use pathogan::model::{ArchConfig, Domain, ImageSlice, ModelConfig};
use pathogan::training::{run_training, RunOptions, TrainConfig};

use crate::{rng, Outcome};

fn phantom_slices(healthy: usize, pathological: usize, seed: u64) -> Vec<ImageSlice> {
    generate_phantom_dataset(healthy, pathological, 64, 1, &mut rng(seed))
        .iter()
        .flat_map(|v| select_and_label_slices(&normalize_volume(v).unwrap(), 0, 0, 20).unwrap())
        .collect()
}

/// Train on 64 px phantoms, then score segmentation on held-out slices
/// and check that sampled pathologies vary with the seed.
pub fn run() -> Outcome {
    let train = phantom_slices(200, 400, 7);
    let (healthy, pathological): (Vec<ImageSlice>, Vec<ImageSlice>) =
        train.into_iter().partition(|s| s.domain == Domain::Healthy);
    if healthy.len() != 200 || pathological.len() != 400 {
        return Err(format!("phantom split {}/{}", healthy.len(), pathological.len()));
    }
    let held_out = phantom_slices(10, 50, 8);
    let (held_healthy, held_patho): (Vec<ImageSlice>, Vec<ImageSlice>) =
        held_out.into_iter().partition(|s| s.domain == Domain::Healthy);

    let model_config = ModelConfig {
        n_channels: 1,
        image_size: 64,
        z: 32,
        arch: ArchConfig::scaled(8),
    };
    let config = TrainConfig {
        epochs: 30,
        seed: 11,
        checkpoint_every: 30,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let options = RunOptions {
        out_dir: dir.path().to_path_buf(),
        config_json: String::from("{}"),
        config_hash: String::from("phantom"),
        augmentation: AugmentationConfig::default(),
        resume: None,
        max_steps: None,
    };
    let ckpt = run_training(&model_config, &config, &healthy, &pathological, &options).map_err(|e| e.to_string())?;
    let model = Checkpoint::load(&ckpt).and_then(|c| c.into_model()).map_err(|e| e.to_string())?;

    let report = evaluate_dataset(&model, &held_patho, 0.5, 10).map_err(|e| e.to_string())?;
    let dice = report.aggregate.dice.mean / 100.0;

    let refs: Vec<&ImageSlice> = held_healthy.iter().collect();
    let s1 = sample_pathology(&model, &refs, &mut rng(1)).map_err(|e| e.to_string())?;
    let s2 = sample_pathology(&model, &refs, &mut rng(2)).map_err(|e| e.to_string())?;
    let mut linf = 0f32;
    let mut region = 0usize;
    for n in 0..refs.len() {
        let m1 = s1.labelmap.index_axis(Axis(0), n);
        let m2 = s2.labelmap.index_axis(Axis(0), n);
        let mask: Array2<bool> = ndarray::Zip::from(&m1).and(&m2).map_collect(|&a, &b| a >= 0.5 || b >= 0.5);
        let o1 = s1.output.index_axis(Axis(0), n);
        let o2 = s2.output.index_axis(Axis(0), n);
        for (idx, &v) in o1.indexed_iter() {
            if mask[[idx[1], idx[2]]] {
                region += 1;
                linf = linf.max((v - o2[&idx]).abs());
            }
        }
    }
    let summary = format!(
        "Dice {dice:.3} (need >= 0.60), sample L-inf {linf:.3} over {region} labelled pixels (need > 0.05)"
    );
    if dice >= 0.60 && linf > 0.05 {
        Ok(summary)
    } else {
        Err(summary)
    }
}
