use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cascade_core::config::{ExperimentConfig, OUTPUT_DIR_ENV};
use cascade_core::error::{Error, Result};
use cascade_core::model::Variant;
use cascade_core::pipeline::{self, Experiment};

/// Noise-robust speaker recognition experiments: enhancement network
/// cascaded with an identification network.
#[derive(Debug, Parser)]
#[command(name = "cascade", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true, default_value = "cascade.toml")]
    config: PathBuf,
    /// Replaces the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restricts train/evaluate/score to one variant, e.g. "SE-MS+SID".
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Replaces `paths.output` from the configuration.
    #[arg(long, global = true, env = OUTPUT_DIR_ENV, hide_env_values = true)]
    output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and noise bank.
    Prepare,
    /// Write the test mixing manifest.
    Mix,
    /// Train checkpoints.
    Train,
    /// Identification accuracy over the noise grid.
    Evaluate,
    /// Verification scores, EER and DCF over the noise grid.
    Score,
    /// Fusion-weight sweep between the two configured variants.
    Fuse,
    /// Merge all result tables.
    Report,
}

fn experiment(cli: &Cli) -> Result<Experiment> {
    let mut config = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.output {
        config.paths.output = out.clone();
    }
    Experiment::new(config)
}

fn variants(cli: &Cli, exp: &Experiment) -> Result<Vec<Variant>> {
    match &cli.variant {
        Some(name) => Ok(vec![name.parse()?]),
        None => Ok(exp.config.variants.clone()),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let exp = experiment(cli)?;
    match cli.command {
        Command::Prepare => {
            let s = pipeline::prepare(&exp)?;
            println!(
                "prepared {} utterances and {} noise recordings",
                s.utterances, s.noise_recordings
            );
        }
        Command::Mix => {
            let records = pipeline::mix(&exp)?;
            println!(
                "wrote {} mixing records to {}",
                records.len(),
                exp.mix_path().display()
            );
        }
        Command::Train => {
            for path in pipeline::train(&exp, &variants(cli, &exp)?)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Evaluate => {
            for (v, rows) in pipeline::evaluate(&exp, &variants(cli, &exp)?)? {
                let mean = rows.iter().map(|r| r.top1).sum::<f64>() / rows.len() as f64;
                println!(
                    "{v}: mean top1 {mean:.4} over {} conditions -> {}",
                    rows.len(),
                    exp.identification_path(v).display()
                );
            }
        }
        Command::Score => {
            for (v, rows) in pipeline::score(&exp, &variants(cli, &exp)?)? {
                let mean = rows.iter().map(|r| r.eer).sum::<f64>() / rows.len() as f64;
                println!(
                    "{v}: mean eer {mean:.4} over {} conditions -> {}",
                    rows.len(),
                    exp.verification_path(v).display()
                );
            }
        }
        Command::Fuse => {
            pipeline::fuse(&exp)?;
            println!("wrote {}", exp.fusion_path().display());
        }
        Command::Report => {
            print!("{}", pipeline::report(&exp)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{} {}", e.code(), one_line(&e));
            ExitCode::FAILURE
        }
    }
}

fn one_line(e: &Error) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}
