use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmer::checkpoint::Checkpoint;
use cmer::config::RunConfig;
use cmer::data::{generate_synthetic, synthesize, Dataset, Split, Vocab};
use cmer::error::{Error, Result};
use cmer::eval::{evaluate, format_result, ranks_csv};
use cmer::train::{profile_strategies, train};
use cmer::Strategy;

#[derive(Parser)]
#[command(
    name = "cmer",
    version,
    about = "Contrastive text-image retrieval for overhead scenes with frozen backbones"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired dataset (manifest, images, vocabulary)
    Synth {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Number of scene classes
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        /// Images per scene
        #[arg(long, default_value_t = 16)]
        per_scene: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frequency floor for vocabulary words
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
    },
    /// Train a model and write checkpoint plus metrics log
    Train {
        /// Manifest file of the training dataset
        #[arg(long)]
        data: PathBuf,
        /// JSON config file; flags below override its values
        #[arg(long)]
        config: Option<PathBuf>,
        /// Final checkpoint path (best-validation copy gets a .best.cmck suffix)
        #[arg(long, default_value = "checkpoint.cmck")]
        out: PathBuf,
        /// JSON-lines metrics log
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Resume from a checkpoint; only --steps / --epochs still apply
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on one split of a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest file; must match the vocabulary the checkpoint carries
        #[arg(long)]
        data: PathBuf,
        /// Which split supplies the queries: train, val, or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Write the result record as JSON here
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-query first-hit ranks as CSV here
        #[arg(long)]
        ranks: Option<PathBuf>,
    },
    /// Profile all three strategies: trainable parameters, saved activation
    /// bytes, throughput
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest file; omitted, a small in-memory dataset is generated
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write the three reports as a JSON array here
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Total optimizer steps; overrides --epochs when nonzero
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    queue_mult: Option<usize>,
    #[arg(long)]
    focus_field: Option<usize>,
    #[arg(long)]
    focus_hidden: Option<usize>,
    #[arg(long)]
    focus_heads: Option<usize>,
    #[arg(long)]
    focus_depth: Option<usize>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    lora_alpha: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Prepend the scene token to every caption (true/false)
    #[arg(long)]
    scene_prompt: Option<bool>,
    #[arg(long)]
    min_freq: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            strategy, epochs, steps, batch_size, learning_rate, weight_decay,
            warmup_steps, seed, margin, beta, temperature, queue_mult,
            focus_field, focus_hidden, focus_heads, focus_depth, lora_rank,
            lora_alpha, image_size, scene_prompt, min_freq
        );
    }
}

fn effective_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!(
            "unknown split {other:?}; expected train, val, or test"
        ))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth {
            out,
            scenes,
            per_scene,
            image_size,
            seed,
            min_freq,
        } => {
            let set = generate_synthetic(&out, scenes, per_scene, image_size, seed, min_freq)?;
            println!(
                "wrote {} images across {} scenes to {}",
                set.manifest.len(),
                set.manifest.scenes.len(),
                out.display()
            );
        }
        Cmd::Train {
            data,
            config,
            out,
            metrics,
            resume,
            overrides,
        } => {
            let (cfg, dataset, ck) = match resume {
                Some(path) => {
                    let mut ck = Checkpoint::load(&path)?;
                    if let Some(s) = overrides.steps {
                        ck.meta.config.steps = s;
                    }
                    if let Some(e) = overrides.epochs {
                        ck.meta.config.epochs = e;
                    }
                    let vocab = Vocab::from_map(ck.meta.vocab.clone())?;
                    let dataset = Dataset::load_with_vocab(&data, &ck.meta.config, vocab)?;
                    (ck.meta.config.clone(), dataset, Some(ck))
                }
                None => {
                    let cfg = effective_config(config.as_deref(), &overrides)?;
                    let dataset = Dataset::load(&data, &cfg)?;
                    (cfg, dataset, None)
                }
            };
            println!("config: {}", serde_json::to_string(&cfg)?);
            let (_, outcome) = train(&cfg, &dataset, Some(&out), metrics.as_deref(), ck.as_ref())?;
            let last = outcome.metrics.last();
            println!(
                "trained {} steps; final loss {}",
                outcome.steps_run,
                last.map(|m| m.loss.to_string()).unwrap_or_else(|| "n/a".into())
            );
            if outcome.best_val_mr.is_finite() {
                println!("best validation mR {:.2}", outcome.best_val_mr);
            }
            if let Some(p) = &outcome.best_checkpoint {
                println!("best checkpoint {}", p.display());
            }
            println!("final checkpoint {}", out.display());
        }
        Cmd::Eval {
            checkpoint,
            data,
            split,
            out,
            ranks,
        } => {
            let split = parse_split(&split)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let vocab = Vocab::from_map(ck.meta.vocab.clone())?;
            let dataset = Dataset::load_with_vocab(&data, &ck.meta.config, vocab)?;
            let (model, _, _, _, _, _) = cmer::train::resume_state(&ck, &dataset)?;
            let ev = evaluate(&model, &dataset, split, &ck.meta.config)?;
            println!("{}", format_result(&ev.result));
            if let Some(p) = out {
                fs::write(&p, serde_json::to_string_pretty(&ev.result)?)?;
                println!("result written to {}", p.display());
            }
            if let Some(p) = ranks {
                fs::write(&p, ranks_csv(&ev.per_query))?;
                println!("per-query ranks written to {}", p.display());
            }
        }
        Cmd::Profile {
            config,
            data,
            out,
            overrides,
        } => {
            let cfg = effective_config(config.as_deref(), &overrides)?;
            let dataset = match data {
                Some(path) => Dataset::load(&path, &cfg)?,
                None => {
                    let set = synthesize(4, 8, cfg.image_size, cfg.seed)?;
                    Dataset::from_synthetic(set, &cfg)?
                }
            };
            let reports = profile_strategies(&cfg, &dataset)?;
            println!(
                "{:<16} {:>16} {:>24} {:>22}",
                "strategy", "trainable_params", "saved_activation_bytes", "throughput_pairs_per_s"
            );
            for r in &reports {
                println!(
                    "{:<16} {:>16} {:>24} {:>22.2}",
                    r.strategy, r.trainable_params, r.saved_activation_bytes, r.throughput_pairs_per_s
                );
            }
            if let Some(p) = out {
                fs::write(&p, serde_json::to_string_pretty(&reports)?)?;
                println!("reports written to {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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
