use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use textpose::config::RunConfig;
use textpose::data::coco::export_coco;
use textpose::train::{gradcheck_report_text, gradcheck_suite, load_checkpoint, Harness};

#[derive(Parser)]
#[command(
    name = "textpose",
    about = "Language-assisted multi-person pose estimation: training, evaluation, and tooling",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Run configuration (TOML). Defaults to the built-in overfit config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_toml_file(path)
                .with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::overfit_acceptance(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write final/best checkpoints plus a loss log.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on the configured dataset (OKS AP/AR).
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Dump per-image predictions as COCO-style results JSON.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference checks for every parameterized operation.
    Gradcheck {
        /// Seed for probe tensors and parameter noise.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Generate the configured synthetic dataset as COCO JSON plus PNGs.
    MakeSynthetic {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Render decoded skeletons over one sample.
    Visualize {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset sample index to draw.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Blend this joint's text-similarity map as a heat overlay.
        #[arg(long)]
        joint: Option<usize>,
        /// Output PNG path (default: <output_dir>/visualization.png).
        #[arg(long)]
        image_out: Option<PathBuf>,
    },
}

/// Rebuild a harness whose model matches a checkpoint.
fn harness_for_checkpoint(
    mut config: RunConfig,
    checkpoint: &PathBuf,
) -> anyhow::Result<(Harness, textpose::nn::ParamStore)> {
    let (model_config, skeleton, store) =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    if skeleton != config.data.skeleton.build() {
        bail!(
            "checkpoint skeleton ({} joints) does not match the configured dataset skeleton",
            skeleton.num_joints()
        );
    }
    config.model = model_config;
    let harness = Harness::from_config(config)?;
    Ok((harness, store))
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train { common } => {
            let config = common.load()?;
            let harness = Harness::from_config(config)?;
            let outcome = harness.train()?;
            println!(
                "trained {} steps: initial loss {:.5}, final {:.5}, best {:.5}",
                outcome.steps_run, outcome.initial_loss, outcome.final_loss, outcome.best_loss
            );
            println!("final checkpoint: {}", outcome.final_checkpoint.display());
            println!("best checkpoint:  {}", outcome.best_checkpoint.display());
            println!("loss log:         {}", outcome.log_path.display());
            if outcome.encoder_hash_before != outcome.encoder_hash_after {
                bail!("text encoder state changed during training");
            }
        }
        Command::Eval { common, checkpoint } => {
            let config = common.load()?;
            let out_dir = config.output_dir.clone();
            let (harness, store) = harness_for_checkpoint(config, &checkpoint)?;
            let dataset = harness.load_dataset()?;
            let report = harness.evaluate_with(&store, &dataset)?;
            print!("{}", report.to_text());
            std::fs::create_dir_all(&out_dir)?;
            let json_path = out_dir.join("eval_report.json");
            std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
            println!("report written to {}", json_path.display());
        }
        Command::Predict { common, checkpoint } => {
            let config = common.load()?;
            let out_dir = config.output_dir.clone();
            let (harness, store) = harness_for_checkpoint(config, &checkpoint)?;
            let dataset = harness.load_dataset()?;
            let mut results = Vec::new();
            for sample in &dataset.samples {
                for pose in harness.predict_sample(&store, sample) {
                    let mut keypoints = Vec::with_capacity(pose.keypoints.len() * 3);
                    for &(x, y, score) in &pose.keypoints {
                        keypoints.extend([x, y, score]);
                    }
                    results.push(serde_json::json!({
                        "image_id": sample.sample_id,
                        "category_id": 1,
                        "keypoints": keypoints,
                        "score": pose.instance_score,
                    }));
                }
            }
            std::fs::create_dir_all(&out_dir)?;
            let path = out_dir.join("predictions.json");
            std::fs::write(&path, serde_json::to_string_pretty(&results)?)?;
            println!("{} predictions written to {}", results.len(), path.display());
        }
        Command::Gradcheck { seed } => {
            let entries = gradcheck_suite(seed);
            print!("{}", gradcheck_report_text(&entries));
            let failures = entries.iter().filter(|e| !e.pass).count();
            println!("{} checks, {} failed", entries.len(), failures);
        }
        Command::MakeSynthetic { common } => {
            let config = common.load()?;
            let dataset =
                textpose::data::synthetic::generate_synthetic_dataset(&config.data.synthetic)?;
            std::fs::create_dir_all(&config.output_dir)?;
            export_coco(&dataset, &config.output_dir)?;
            println!(
                "{} scenes written under {}",
                dataset.len(),
                config.output_dir.display()
            );
        }
        Command::Visualize {
            common,
            checkpoint,
            sample,
            joint,
            image_out,
        } => {
            let config = common.load()?;
            let out_path = image_out
                .unwrap_or_else(|| config.output_dir.join("visualization.png"));
            let (harness, store) = harness_for_checkpoint(config, &checkpoint)?;
            let dataset = harness.load_dataset()?;
            let Some(scene) = dataset.samples.get(sample) else {
                bail!("sample index {sample} out of range ({} samples)", dataset.len());
            };
            let poses = textpose::viz::visualize(&harness, &store, scene, &out_path, joint)?;
            println!(
                "{} poses drawn over {} -> {}",
                poses.len(),
                scene.sample_id,
                out_path.display()
            );
        }
    }
    Ok(())
}
