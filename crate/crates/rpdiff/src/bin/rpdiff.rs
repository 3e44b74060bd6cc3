//! Thin command-line front end over the pipeline stages. All logic lives in
//! the library; see the crate examples for programmatic use.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use rpdiff::config::{parse_config, ExperimentConfig};
use rpdiff::pipeline;

#[derive(Parser)]
#[command(name = "rpdiff", version, about = "Retrieval-augmented private diffusion pipeline")]
struct Cli {
    /// Experiment config file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; derives every per-stage seed deterministically.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory holding artifacts and the manifest.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// Override one config key, e.g. --override dp.iterations=500.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets and pre-train the denoiser on public data.
    Pretrain,
    /// Contrastively train the keying feature extractor.
    TrainExtractor,
    /// Build the trajectory knowledge base from the reference split.
    BuildKb,
    /// Fine-tune the denoiser on private data under the DP mechanism.
    DpFinetune,
    /// Generate samples (full or retrieval-augmented mode).
    Sample,
    /// Compute quality, diversity, retrieval, and efficiency metrics.
    Evaluate,
    /// Run the full pipeline once per value of a swept config key.
    Sweep {
        /// Config key to sweep, e.g. kb.size.
        #[arg(long)]
        param: String,
        /// Comma-separated values for the swept key.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

/// Stage seed derived from the master seed and the stage name.
fn derived_seed(master: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

fn apply_master_seed(config: &mut ExperimentConfig, master: u64) {
    config.data.seed_pub_pre = derived_seed(master, "data_pub_pre");
    config.data.seed_pub_ref = derived_seed(master, "data_pub_ref");
    config.data.seed_prv = derived_seed(master, "data_prv");
    config.denoiser.seed = derived_seed(master, "denoiser_init");
    config.pretrain.seed = derived_seed(master, "pretrain");
    config.extractor.seed = derived_seed(master, "extractor");
    config.kb.seed = derived_seed(master, "kb");
    config.dp.seed = derived_seed(master, "dp");
    config.sample.seed = derived_seed(master, "sample");
    config.eval.seed = derived_seed(master, "eval");
}

fn load(cli: &Cli) -> rpdiff::Result<ExperimentConfig> {
    let body = match &cli.config {
        Some(path) => std::fs::read_to_string(path)?,
        None => String::new(),
    };
    let mut config = parse_config(&body, &cli.overrides)?;
    if let Some(master) = cli.seed {
        apply_master_seed(&mut config, master);
    }
    Ok(config)
}

fn run(cli: &Cli) -> rpdiff::Result<()> {
    let config = load(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Pretrain => {
            let record = pipeline::cmd_pretrain(&config, out)?;
            println!(
                "pretrain: {} epochs, {} adam steps, final epoch loss {:.6}",
                record.epochs,
                record.adam_steps,
                record.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::TrainExtractor => {
            let record = pipeline::cmd_train_extractor(&config, out)?;
            println!(
                "train-extractor: key timestep {}, final epoch loss {:.6}",
                record.key_timestep,
                record.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::BuildKb => {
            let record = pipeline::cmd_build_kb(&config, out)?;
            println!(
                "build-kb: {} entries at (k={}, v={}), {} denoiser calls",
                record.entries, record.k_timestep, record.v_timestep, record.denoiser_calls
            );
        }
        Command::DpFinetune => {
            let record = pipeline::cmd_dp_finetune(&config, out)?;
            match &record.final_guarantee {
                Some(g) => println!(
                    "dp-finetune: {} iterations, (epsilon = {:.4}, delta = {:.1e}) at alpha = {}",
                    record.iterations.len(),
                    g.epsilon,
                    g.delta,
                    g.best_alpha
                ),
                None => println!(
                    "dp-finetune: {} iterations, non-private testing mode",
                    record.iterations.len()
                ),
            }
        }
        Command::Sample => {
            let record = pipeline::cmd_sample(&config, out)?;
            println!(
                "sample: {} -> {} samples, {} denoiser calls ({:.1}/sample)",
                record.file, record.n_samples, record.denoiser_calls, record.calls_per_sample
            );
        }
        Command::Evaluate => {
            let report = pipeline::cmd_evaluate(&config, out)?;
            print!("{report}");
        }
        Command::Sweep { param, values } => {
            let cells = pipeline::cmd_sweep(&config, out, param, values)?;
            println!("{:<28} {:>12}", "cell", "rag frechet");
            for cell in cells {
                println!(
                    "{:<28} {:>12}",
                    format!("{}={}", cell.param, cell.value),
                    cell.rag_frechet
                        .map_or("n/a".to_string(), |v| format!("{v:.4}"))
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = serde_json::json!({
                "error": err.to_string(),
                "kind": format!("{err:?}").split(['{', '(']).next().unwrap_or("Unknown").trim(),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
