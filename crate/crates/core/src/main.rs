use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use fullanno::ingest::{read_enriched, read_manifest};
use fullanno::model::{sha256_hex, validate, validate_tokens};
use fullanno::pipeline::{compute_stats, render_table, Engine, PipelineConfig, RunControl, StageSelection};
use fullanno::tokenizer::TokenizerSpec;
use fullanno::{fixture, Error, Result};

#[derive(Parser)]
#[command(name = "fullanno", version, about = "Re-annotate detection datasets with text, regions and dense captions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override `worker_count`.
    #[arg(long)]
    workers: Option<usize>,
    /// Serve every endpoint from built-in stubs.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Load and union the configured inputs; starts a fresh checkpoint.
    Ingest {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run one stage or all of them.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Continue from the checkpoint in `work_dir`.
        #[arg(long)]
        resume: bool,
    },
    /// Print the dataset summary table for enriched files.
    Stats {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
        /// Config whose tokenizer is used for token counts.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the checkpointed dataset as an enriched file.
    Export {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Check an enriched file against every invariant and its manifest.
    Validate {
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic dataset and a dry-run config.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(args: &RunArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(w) = args.workers {
        cfg.worker_count = w;
    }
    if args.dry_run {
        cfg.dry_run = true;
    }
    Ok(cfg)
}

fn tokenizer_spec(config: Option<&Path>) -> Result<TokenizerSpec> {
    match config {
        Some(p) => Ok(PipelineConfig::load(p)?.tokenizer),
        None => Ok(TokenizerSpec::default()),
    }
}

fn print_json(v: &impl serde::Serialize) {
    let text = serde_json::to_string_pretty(v).expect("report serializes");
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Ingest { run } => {
            let engine = Engine::from_config(load_config(&run)?)?;
            let (handle, report) = engine.ingest()?;
            engine.checkpointer().save(&handle)?;
            print_json(&report);
        }
        Command::Run { run, stage, resume } => {
            let engine = Engine::from_config(load_config(&run)?)?;
            let selection = match stage {
                StageArg::One => StageSelection::One(1),
                StageArg::Two => StageSelection::One(2),
                StageArg::Three => StageSelection::One(3),
                StageArg::All => StageSelection::All,
            };
            let outcome = engine.run(selection, resume, &mut RunControl::default())?;
            print_json(&outcome);
        }
        Command::Stats { inputs, json, config } => {
            let tok = tokenizer_spec(config.as_deref())?.build()?;
            let mut reports = Vec::new();
            for input in &inputs {
                reports.push(compute_stats(&read_enriched(input)?, tok.as_ref()));
            }
            if json {
                print_json(&reports);
            } else {
                let _ = write!(std::io::stdout(), "{}", render_table(&reports));
            }
        }
        Command::Export { run, output } => {
            let engine = Engine::from_config(load_config(&run)?)?;
            let (_, handle) = engine
                .checkpointer()
                .load()?
                .ok_or_else(|| Error::Config("no checkpoint to export".into()))?;
            let out = output.unwrap_or_else(|| PathBuf::from(&engine.config().output));
            print_json(&engine.export(&handle, &out)?);
        }
        Command::Validate { input, config } => {
            let tok = tokenizer_spec(config.as_deref())?.build()?;
            let handle = read_enriched(&input)?;
            let mut problems = Vec::new();
            for rec in &handle.images {
                for v in validate(rec).into_iter().chain(validate_tokens(rec, tok.as_ref())) {
                    problems.push(json!({"image_id": rec.image_id, "field": v.field, "rule": v.rule, "detail": v.detail}));
                }
            }
            if let Some(m) = read_manifest(&input)? {
                let bytes = std::fs::read(&input).map_err(|e| Error::io(&input, e))?;
                let sha = sha256_hex(&bytes);
                if sha != m.content_sha256 {
                    problems.push(json!({"field": "manifest.content_sha256", "rule": "manifest_mismatch", "detail": sha}));
                }
                if m.line_count != handle.images.len() as u64 {
                    problems.push(json!({"field": "manifest.line_count", "rule": "manifest_mismatch", "detail": handle.images.len()}));
                }
            }
            print_json(&json!({"records": handle.images.len(), "violations": problems}));
            return Ok(problems.is_empty());
        }
        Command::Fixture { out, images, seed } => {
            let fx = fixture::generate(&out, images, seed)?;
            print_json(&json!({"config": fx.config_path, "instances": fx.instances, "captions": fx.captions}));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let body = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{body}");
            ExitCode::from(1)
        }
    }
}
