use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperinvert_cli::commands::{self, *};
use hyperinvert_cli::config::ExperimentConfig;
use hyperinvert_cli::CliError;
use hyperinvert_core::genspec::{HeadVariant, LayerPolicy};

#[derive(Parser)]
#[command(name = "hyperinvert", version, about = "Hypernetwork GAN inversion on toy generators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Inputs {
    /// Directory of PNG targets.
    #[arg(long, conflicts_with = "sample")]
    images: Option<PathBuf>,
    /// Use N generator samples as targets.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Inputs {
    fn source(&self) -> ImageSource {
        match &self.images {
            Some(dir) => ImageSource::Dir(dir.clone()),
            None => ImageSource::Sample {
                n: self.sample.unwrap_or(4),
                seed: self.seed,
            },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Analytical hypernetwork parameter count.
    CountParams {
        /// `stylegan2-1024`, `toy-<resolution>-<channels>` or a spec JSON file.
        #[arg(long, default_value = "stylegan2-1024")]
        spec: String,
        #[arg(long, default_value = "per_channel_shared_mix")]
        heads: HeadVariant,
        #[arg(long, default_value = "medium_fine_conv")]
        layers: LayerPolicy,
        /// Toy backbone base width; ResNet34 when omitted.
        #[arg(long)]
        backbone_width: Option<usize>,
        #[arg(long)]
        shared_fc_dim: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Pretrain the encoder (unless given) and train the hypernetwork.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the hypernetwork step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Validate the config and print parameter counts.
        #[arg(long)]
        dry_run: bool,
    },
    /// Write a default toy config.
    InitConfig {
        #[arg(long, default_value = "toy-16-8")]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert images with a trained checkpoint.
    Invert {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        /// Refinement steps; the trained value when omitted.
        #[arg(short = 'T', long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also run latent optimisation and generator fine-tuning.
        #[arg(long)]
        compare_baselines: bool,
        #[arg(long, default_value_t = 500)]
        latent_steps: usize,
        #[arg(long, default_value_t = 0.02)]
        latent_lr: f64,
        #[arg(long, default_value_t = 200)]
        finetune_steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        finetune_lr: f64,
    },
    /// Edit-strength sweeps, one grid per image.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        /// JSON file of directions.
        #[arg(long, conflicts_with = "pca", required_unless_present = "pca")]
        directions: Option<PathBuf>,
        /// Use the top K principal components of W.
        #[arg(long)]
        pca: Option<usize>,
        #[arg(long, default_value_t = 2000)]
        pca_samples: usize,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-3,-1.5,0,1.5,3")]
        strengths: Vec<f32>,
        #[arg(short = 'T', long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply saved offsets to another generator with the same spec.
    Adapt {
        /// Output directory of `invert`.
        #[arg(long)]
        offsets: PathBuf,
        /// Target generator dir or checkpoint root.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    commands::check_device()?;
    match cli.command {
        Command::CountParams {
            spec,
            heads,
            layers,
            backbone_width,
            shared_fc_dim,
            json,
        } => {
            let args = CountParamsArgs {
                spec,
                heads,
                layers,
                backbone_width,
                shared_fc_dim,
                json,
            };
            let (_, text) = cmd_count_params(&args)?;
            print!("{text}");
            if json {
                println!();
            }
        }
        Command::Train {
            config,
            seed,
            out,
            steps,
            dry_run,
        } => {
            let args = TrainArgs {
                config,
                seed,
                out,
                steps,
                dry_run,
            };
            print!("{}", cmd_train(&args)?);
        }
        Command::InitConfig { spec, out } => {
            let cfg = ExperimentConfig::toy(&spec);
            cfg.validate()?;
            cfg.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Invert {
            checkpoint,
            inputs,
            steps,
            out,
            compare_baselines,
            latent_steps,
            latent_lr,
            finetune_steps,
            finetune_lr,
        } => {
            let args = InvertArgs {
                checkpoint,
                source: inputs.source(),
                steps,
                out,
                compare_baselines: compare_baselines.then_some(BaselineOptions {
                    latent_steps,
                    latent_lr,
                    finetune_steps,
                    finetune_lr,
                }),
            };
            print!("{}", cmd_invert(&args)?.report);
        }
        Command::Edit {
            checkpoint,
            inputs,
            directions,
            pca,
            pca_samples,
            strengths,
            steps,
            out,
        } => {
            let directions = match (directions, pca) {
                (Some(path), _) => DirectionSource::File(path),
                (None, Some(k)) => DirectionSource::Pca {
                    components: k,
                    samples: pca_samples,
                },
                (None, None) => unreachable!("clap requires one of --directions/--pca"),
            };
            let args = EditArgs {
                checkpoint,
                seed: inputs.seed,
                source: inputs.source(),
                directions,
                strengths,
                steps,
                out,
            };
            for path in cmd_edit(&args)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Adapt { offsets, target, out } => {
            let batch = cmd_adapt(&AdaptArgs {
                offsets,
                target,
                out: out.clone(),
            })?;
            println!("adapted {} images into {}", batch.shape()[0], out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
