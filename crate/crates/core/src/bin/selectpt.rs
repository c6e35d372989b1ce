//! Command-line front end for the selective pre-training pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use selectpt_core::accounting::{prv_epsilon, rdp_epsilon, MechanismSpec};
use selectpt_core::classifier::{
    build_train_set, train_dp, DpTrainConfig, FeaturizerConfig, NoiseSetting,
};
use selectpt_core::pipeline::{read_config, run, validate, worker_threads, Severity};
use selectpt_core::selection::{
    read_corpus, score_corpus, select_top, write_scores, ScoredSequence,
};

#[derive(Parser)]
#[command(name = "selectpt", version, about = "Selective pre-training pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config file without side effects; nonzero exit on errors.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Execute the configured pipeline mode end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the DP domain classifier and score the source corpus only.
    Score {
        #[arg(long)]
        config: PathBuf,
        /// Output scores file (default: <output_dir>/scores.jsonl).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Budgeted selection over a pre-scored corpus.
    Select {
        /// JSON-lines file of {sequence_id, score, token_count} records.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        token_budget: u64,
    },
    /// Accountant query: epsilon of a subsampled Gaussian mechanism.
    Account {
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: u32,
        #[arg(long)]
        delta: f64,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match command {
        Command::Validate { config } => {
            let config = read_config(&config)?;
            let findings = validate(&config);
            for f in &findings {
                println!("{f}");
            }
            if findings.iter().any(|f| f.severity == Severity::Error) {
                Ok(ExitCode::FAILURE)
            } else {
                println!("ok");
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Run { config } => {
            let config = read_config(&config)?;
            let report = run(&config)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Score { config, output } => {
            let config = read_config(&config)?;
            let findings = validate(&config);
            if findings.iter().any(|f| f.severity == Severity::Error) {
                for f in &findings {
                    eprintln!("{f}");
                }
                return Ok(ExitCode::FAILURE);
            }
            let target = read_corpus(&config.target_corpus)?;
            let source = read_corpus(&config.source_corpus)?;
            let featurizer = FeaturizerConfig {
                hash_bits: config.classifier_hash_bits,
                bigrams: true,
            };
            let target_texts: Vec<String> = target.iter().map(|s| s.text.clone()).collect();
            let source_texts: Vec<String> = source.iter().map(|s| s.text.clone()).collect();
            let train_set =
                build_train_set(&target_texts, &source_texts, &featurizer, config.seed)?;
            let plan = selectpt_core::pipeline::plan_privacy(&config, true)?;
            let (spec1, budget1) = plan.stage1.as_ref().expect("stage 1 planned");
            let outcome = train_dp(
                &train_set,
                &featurizer,
                &DpTrainConfig {
                    epochs: config.classifier_epochs,
                    sampling_rate: config.classifier_sampling_rate,
                    clip_norm: config.classifier_clip_norm,
                    learning_rate: config.classifier_learning_rate,
                    hidden: config.classifier_hidden,
                    seed: config.seed,
                    noise: NoiseSetting::Fixed {
                        noise_multiplier: spec1.noise_multiplier,
                        delta: config.delta1,
                    },
                },
            )?;
            let scored = score_corpus(&outcome.model, &featurizer, &source, worker_threads());
            std::fs::create_dir_all(&config.output_dir)?;
            let path = output.unwrap_or_else(|| config.output_dir.join("scores.jsonl"));
            write_scores(&path, &scored)?;
            eprintln!(
                "scored {} sequences (stage epsilon {:.4} at delta {:.1e}) -> {}",
                scored.len(),
                budget1.epsilon(),
                budget1.delta(),
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Select {
            scores,
            token_budget,
        } => {
            let file = std::io::BufReader::new(std::fs::File::open(&scores)?);
            let mut records = Vec::new();
            for line in std::io::BufRead::lines(file) {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                records.push(serde_json::from_str::<ScoredSequence>(&line)?);
            }
            let result = select_top(records, token_budget)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Account {
            sigma,
            q,
            steps,
            delta,
        } => {
            let spec = MechanismSpec::new(sigma, q, steps)?;
            let eps = prv_epsilon(&spec, delta)?;
            let rdp = rdp_epsilon(&spec, delta)?;
            println!("epsilon = {eps:.6}");
            println!("rdp_epsilon = {rdp:.6}");
            Ok(ExitCode::SUCCESS)
        }
    }
}
