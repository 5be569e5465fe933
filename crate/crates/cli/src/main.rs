use clap::{Parser, Subcommand};
use crossview_cli::ablate::{run_ablation, AblateArgs};
use crossview_cli::stages::{
    eval_run, gen_data, sample_run, train_stage, SampleArgs, Stage, StagePaths,
};
use crossview_cli::HarnessError;
use crossview_core::config::ExperimentConfig;
use std::path::PathBuf;
use std::process::ExitCode;

/// Aerial-to-ground view synthesis experiments: data generation, staged
/// training, guided sampling, evaluation and ablations.
#[derive(Parser)]
#[command(name = "crossview", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired synthetic dataset.
    GenData {
        /// Experiment config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one pipeline stage.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Codec checkpoint (diffusion stage); defaults to a sibling of --out.
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Semantic checkpoint (diffusion stage); defaults to a sibling of --out.
        #[arg(long)]
        semantic: Option<PathBuf>,
    },
    /// Generate ground views for the test split of a dataset.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        semantic: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Guidance scale; overrides the config.
        #[arg(long)]
        scale: Option<f64>,
        /// Sampling steps; overrides the config.
        #[arg(long)]
        steps: Option<usize>,
        /// Base seed; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Sampler registry name (ddpm or ddim); overrides the config.
        #[arg(long)]
        sampler: Option<String>,
        /// Zero the height conditioning slot at inference.
        #[arg(long)]
        no_height: bool,
        /// Gaussian noise sigma applied to height maps at inference.
        #[arg(long, default_value_t = 0.0)]
        height_noise_sigma: f64,
    },
    /// Copy the test-split ground-truth images into a flat directory.
    ExportGt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate generated images against ground truth.
    Eval {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        semantic: PathBuf,
        /// Output directory for report.json, per_sample.csv and table.txt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the full ablation grid and emit ablation.json.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        semantic: PathBuf,
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig, HarnessError> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(&config)?;
            let manifest = gen_data(&cfg, &out)?;
            println!(
                "dataset {}: {} train / {} test samples (config {})",
                out.display(),
                manifest.train.len(),
                manifest.test.len(),
                manifest.config_hash
            );
            Ok(())
        }
        Command::Train {
            stage,
            config,
            data,
            out,
            codec,
            semantic,
        } => {
            let cfg = load_config(&config)?;
            train_stage(stage, &cfg, &data, &out, &StagePaths { codec, semantic })
        }
        Command::Sample {
            ckpt,
            codec,
            semantic,
            data,
            out,
            config,
            scale,
            steps,
            seed,
            sampler,
            no_height,
            height_noise_sigma,
        } => {
            let cfg = load_config(&config)?;
            sample_run(&SampleArgs {
                ckpt,
                codec,
                semantic,
                data,
                out,
                scale: scale.unwrap_or(cfg.sample.scale),
                steps: steps.unwrap_or(cfg.sample.steps),
                seed: seed.unwrap_or(cfg.sample.seed),
                sampler: sampler.or(cfg.sample.sampler),
                no_height,
                height_noise_sigma,
            })
        }
        Command::ExportGt { data, out } => {
            crossview_cli::stages::export_ground_truth(&data, &out)
        }
        Command::Eval {
            gen,
            gt,
            extractor,
            semantic,
            out,
            seed,
        } => {
            let report = eval_run(&gen, &gt, &extractor, &semantic, seed, &out)?;
            println!(
                "n={} ssim={:.4} is={:.4} kid={:.5} lpips={:.4} clip_sim={:.4}",
                report.n,
                report.metrics.ssim,
                report.metrics.is,
                report.metrics.kid,
                report.metrics.lpips,
                report.metrics.clip_sim
            );
            Ok(())
        }
        Command::Ablate {
            config,
            data,
            codec,
            semantic,
            extractor,
            out,
        } => {
            let cfg = load_config(&config)?;
            let report = run_ablation(&AblateArgs {
                config: cfg,
                data,
                codec,
                semantic,
                extractor,
                out,
            })?;
            for a in &report.assertions {
                println!(
                    "{}: {} ({}{})",
                    a.name,
                    if a.passed { "pass" } else { "fail" },
                    a.detail,
                    a.p_value
                        .map(|p| format!(", p={p:.4}"))
                        .unwrap_or_default()
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
