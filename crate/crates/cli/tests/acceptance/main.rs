//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers to run a subset, e.g.
//! `cargo test -p pathogan-cli --test acceptance -- 1 5`.

mod blend;
mod data;
mod gradients;
mod losses;
mod metrics;
mod netspec;
mod panel;
mod phantom;
mod repro;

use std::process::ExitCode;
use std::time::Instant;

use pathogan::model::{ArchConfig, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<String, String>;

/// Fail with a message unless `cond` holds.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n`-channel 8x8 model with a 3-dimensional code.
pub fn tiny_model_config(n: usize) -> ModelConfig {
    ModelConfig {
        n_channels: n,
        image_size: 8,
        z: 3,
        arch: ArchConfig {
            encoder: "c3-3,d4,C1-2,Q2F,l(z*i)t,l(2*z)".into(),
            decoder: "l(i*i)e,F2Q,c3-2,u3,C3-r".into(),
            zb: "c3-3,d4,R4,u3,C3-r".into(),
            discriminator: "P4-2,p4-3,C4-1".into(),
        },
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget_secs: f64,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "netspec golden strings", budget_secs: 1.0, run: netspec::run },
        Criterion { id: 2, name: "finite-difference gradients", budget_secs: 120.0, run: gradients::run },
        Criterion { id: 3, name: "loss oracles", budget_secs: 10.0, run: losses::run },
        Criterion { id: 4, name: "blend and activation invariants", budget_secs: 30.0, run: blend::run },
        Criterion { id: 5, name: "metric oracles", budget_secs: 60.0, run: metrics::run },
        Criterion { id: 6, name: "data pipeline", budget_secs: 30.0, run: data::run },
        Criterion { id: 7, name: "phantom end-to-end", budget_secs: 6.0 * 3600.0, run: phantom::run },
        Criterion { id: 8, name: "reproducibility and resume", budget_secs: 600.0, run: repro::run },
        Criterion { id: 9, name: "panel renderer", budget_secs: 10.0, run: panel::run },
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(detail) if secs > c.budget_secs => Err(format!("{detail}; over the {} s budget", c.budget_secs)),
            other => other,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag}  [{}] {} ({secs:.1} s): {detail}", c.id, c.name);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
