use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pathogan::data::Split;
use pathogan_cli::commands::{
    cmd_evaluate, cmd_infer, cmd_netspec_describe, cmd_phantom, cmd_render_panel, cmd_train, CliError, DescribeArgs,
    EvaluateArgs, InferArgs, InferMode, NetRole, PanelArgs, PhantomArgs, TrainArgs,
};
use pathogan_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "pathogan", version, about = "Weakly supervised pathology segmentation, inpainting and sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        healthy: usize,
        #[arg(long, default_value_t = 400)]
        pathological: usize,
        /// Healthy phantoms in the test split.
        #[arg(long, default_value_t = 0)]
        test_healthy: usize,
        /// Pathological phantoms in the test split.
        #[arg(long, default_value_t = 50)]
        test_pathological: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a TOML config; flags override file values.
    #[command(after_help = RunConfig::keys_help())]
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override any config key, e.g. `--set weights.lambda_cc=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Dataset manifest (sets `data.manifest`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sets `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Sets `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimisation steps and checkpoint.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Print the effective configuration and its hash, then exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Segment, inpaint or sample pathology for slices in a `.npy` file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `(C, H, W)` or `(N, C, H, W)` array in [-1, 1].
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score segmentations of the pathological slices of a dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Defaults to the checkpoint's `eval.threshold`.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        /// Accepted for uniformity; evaluation draws no random numbers.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a figure panel for one slice.
    RenderPanel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Slice within a batched input.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Manual segmentation, `(H, W)` or `(N, H, W)` u8.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Accepted for uniformity; rendering draws no random numbers.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Architecture string tools.
    Netspec {
        #[command(subcommand)]
        command: NetspecCommand,
    },
}

#[derive(Subcommand)]
enum NetspecCommand {
    /// Print the parsed layers and the shape trace.
    Describe {
        spec: String,
        /// Defaults to `decoder` for strings starting with a linear layer,
        /// `encoder` otherwise.
        #[arg(long, value_enum)]
        role: Option<RoleArg>,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 240)]
        size: usize,
        #[arg(long, default_value_t = 256)]
        z: usize,
        /// Accepted for uniformity; parsing draws no random numbers.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Segment,
    Inpaint,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Encoder,
    Decoder,
    Zb,
    Discriminator,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Phantom {
            out,
            healthy,
            pathological,
            test_healthy,
            test_pathological,
            size,
            channels,
            seed,
        } => {
            let path = cmd_phantom(&PhantomArgs {
                out,
                healthy,
                pathological,
                test_healthy,
                test_pathological,
                size,
                channels,
                seed,
            })?;
            println!("{}", path.display());
        }
        Command::Train {
            config,
            mut overrides,
            data,
            epochs,
            seed,
            out,
            resume,
            max_steps,
            print_config,
        } => {
            if let Some(d) = data {
                overrides.push(format!("data.manifest={:?}", d.display().to_string()));
            }
            if let Some(e) = epochs {
                overrides.push(format!("train.epochs={e}"));
            }
            if let Some(s) = seed {
                overrides.push(format!("train.seed={s}"));
            }
            let config = RunConfig::load(config.as_deref(), &overrides)?;
            println!("# config hash {}\n{}", config.hash(), config.to_toml());
            if print_config {
                return Ok(());
            }
            let path = cmd_train(&TrainArgs {
                config,
                out,
                resume,
                max_steps,
            })?;
            println!("final checkpoint {}", path.display());
        }
        Command::Infer {
            checkpoint,
            input,
            out,
            mode,
            threshold,
            seed,
        } => {
            let mode = match mode {
                ModeArg::Segment => InferMode::Segment,
                ModeArg::Inpaint => InferMode::Inpaint,
                ModeArg::Sample => InferMode::Sample,
            };
            let files = cmd_infer(&InferArgs {
                checkpoint,
                input,
                out,
                mode,
                threshold,
                seed,
            })?;
            println!("wrote {} image files", files.len());
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            threshold,
            out,
            seed: _,
        } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let table = cmd_evaluate(&EvaluateArgs {
                checkpoint,
                data,
                split,
                threshold,
                out,
            })?;
            print!("{table}");
        }
        Command::RenderPanel {
            checkpoint,
            input,
            index,
            mask,
            out,
            seed: _,
        } => cmd_render_panel(&PanelArgs {
            checkpoint,
            input,
            index,
            mask,
            out,
        })?,
        Command::Netspec {
            command:
                NetspecCommand::Describe {
                    spec,
                    role,
                    channels,
                    size,
                    z,
                    seed: _,
                },
        } => {
            let role = role.map(|r| match r {
                RoleArg::Encoder => NetRole::Encoder,
                RoleArg::Decoder => NetRole::Decoder,
                RoleArg::Zb => NetRole::Zb,
                RoleArg::Discriminator => NetRole::Discriminator,
            });
            print!(
                "{}",
                cmd_netspec_describe(&DescribeArgs {
                    spec,
                    role,
                    channels,
                    size,
                    z,
                })?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
