use std::path::{Path, PathBuf};

use pathogan::checkpoint::Checkpoint;
use pathogan::data::{generate_phantom_dataset, select_and_label_slices, AugmentationConfig};
use pathogan::losses::LossReport;
use pathogan::model::{ArchConfig, Domain, ImageSlice, ModelConfig};
use pathogan::training::{checkpoint_path, read_train_log, run_training, RunOptions, TrainConfig};

use crate::{ensure, rng, Outcome};

const SIZE: usize = 32;

fn model_config() -> ModelConfig {
    let mut arch = ArchConfig::scaled(2);
    arch.discriminator = "P4-2,p4-4,C4-1".into();
    ModelConfig {
        n_channels: 1,
        image_size: SIZE,
        z: 4,
        arch,
    }
}

fn options(dir: &Path, resume: Option<PathBuf>) -> RunOptions {
    RunOptions {
        out_dir: dir.to_path_buf(),
        config_json: "{}".into(),
        config_hash: "repro".into(),
        augmentation: AugmentationConfig::default(),
        resume,
        max_steps: None,
    }
}

fn log(dir: &Path) -> Result<Vec<(u64, LossReport)>, String> {
    let rows = read_train_log(&dir.join("train_log.csv")).map_err(|e| e.to_string())?;
    Ok(rows.into_iter().map(|(_, step, r)| (step, r)).collect())
}

fn bits(r: &LossReport) -> Vec<u64> {
    r.values().iter().map(|v| v.to_bits()).collect()
}

/// Two fresh runs agree on their first ten loss rows, and resuming from an
/// epoch checkpoint reproduces the next two steps and the final state.
pub fn run() -> Outcome {
    let slices: Vec<ImageSlice> = generate_phantom_dataset(8, 8, SIZE, 1, &mut rng(21))
        .iter()
        .flat_map(|v| select_and_label_slices(v, 0, 0, 0).unwrap())
        .collect();
    let (healthy, pathological): (Vec<_>, Vec<_>) = slices.into_iter().partition(|s| s.domain == Domain::Healthy);
    // Two steps per epoch.
    let config = TrainConfig {
        epochs: 5,
        seed: 3,
        checkpoint_every: 1,
        ..TrainConfig::default()
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let train = |name: &str, config: &TrainConfig, resume: Option<PathBuf>| {
        let dir = tmp.path().join(name);
        run_training(&model_config(), config, &healthy, &pathological, &options(&dir, resume))
            .map_err(|e| format!("{name}: {e}"))?;
        Ok::<PathBuf, String>(dir)
    };

    let first = train("first", &config, None)?;
    let second = train("second", &config, None)?;
    let (a, b) = (log(&first)?, log(&second)?);
    ensure(a.len() >= 10 && b.len() >= 10, || format!("logs have {} and {} rows", a.len(), b.len()))?;
    for k in 0..10 {
        ensure(a[k].0 == b[k].0 && bits(&a[k].1) == bits(&b[k].1), || format!("fresh runs differ at row {}", k + 1))?;
    }

    // Resume after epoch 3 (step 6) and run epoch 4.
    let resumed_config = TrainConfig { epochs: 4, ..config.clone() };
    let resumed = train("resumed", &resumed_config, Some(checkpoint_path(&first, 3)))?;
    let c = log(&resumed)?;
    let tail: Vec<_> = c.iter().filter(|(s, _)| *s > 6).collect();
    ensure(tail.len() == 2, || format!("resumed run logged {} new steps", tail.len()))?;
    for (step, report) in tail {
        let reference = &a[*step as usize - 1];
        ensure(reference.0 == *step && bits(&reference.1) == bits(report), || {
            format!("resumed step {step} differs from the uninterrupted run")
        })?;
    }
    let load = |dir: &Path| Checkpoint::load(&checkpoint_path(dir, 4)).map(|c| c.to_bytes()).map_err(|e| e.to_string());
    ensure(load(&first)? == load(&resumed)?, || "epoch 4 checkpoints differ after resume".into())?;
    Ok("first 10 loss rows bit-identical across runs; resume at step 6 matches steps 7-8 and the epoch-4 state".into())
}
