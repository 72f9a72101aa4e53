//! `mixres`: corpus synthesis, training, evaluation, FLOPs tables and
//! ablations for the mixed-resolution token allocator.
//!
//! Failures print one JSON error record to stderr and exit nonzero: 2 for
//! usage errors, 1 for everything else.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "mixres", version, about = "Adaptive mixed-resolution token allocation at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (JSON); defaults to the built-in desk setup.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run seed: model initialization, batch order and policy streams. For
    /// `gen` it replaces the corpus seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Allocation policy: adaptive, dense, random_ratio or oracle_mix.
    #[arg(long, global = true, value_name = "NAME")]
    pub policy: Option<String>,
    /// Per-round split thresholds; defaults to the configured ones
    /// (0.005,0.01,0.02 for every preset).
    #[arg(long, global = true, value_name = "a,b,c", value_parser = parse_tau)]
    pub tau: Option<[f64; 3]>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a corpus split as PPM images and 16-bit PGM label maps.
    Gen {
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        /// Number of scenes; defaults to the split size.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the allocator and the sanity head.
    Train {
        /// Overrides the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a model and write the run manifest and overlays.
    Eval {
        /// Parameter container from `train`; a fresh model when omitted.
        #[arg(long, value_name = "PATH")]
        params: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
        split: SplitArg,
        /// Scenes that get selection overlays.
        #[arg(long, default_value_t = 4)]
        overlays: usize,
        /// Scenes whose emitted features are exported.
        #[arg(long, default_value_t = 0)]
        features: usize,
    },
    /// Compare per-scene FLOPs across allocation policies.
    Flops {
        #[arg(long, value_name = "PATH")]
        params: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
        split: SplitArg,
    },
    /// Train and evaluate one ablation variant.
    Ablate {
        #[arg(value_enum)]
        variant: Variant,
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Heldout,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Dense,
    RandomRatio,
    OracleMix,
    Stage1Only,
    NoAuxImage,
    NoResidual,
}

fn parse_tau(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let values: Vec<f64> = parts.iter().map(|p| p.parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    let tau: [f64; 3] = values.try_into().map_err(|v: Vec<f64>| format!("expected 3 thresholds, got {}", v.len()))?;
    if tau.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err("thresholds must be positive and finite".into());
    }
    Ok(tau)
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    command: Option<&'a str>,
    message: String,
}

fn fail(kind: &str, command: Option<&str>, message: String, code: u8) -> ExitCode {
    let record = ErrorRecord { error: ErrorBody { kind, command, message } };
    eprintln!("{}", serde_json::to_string(&record).expect("record serializes"));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => return fail("usage", None, e.render().to_string().trim().to_string(), 2),
    };
    let name = match &cli.command {
        Command::Gen { .. } => "gen",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Flops { .. } => "flops",
        Command::Ablate { .. } => "ablate",
    };
    let c = &cli.common;
    let result = match cli.command {
        Command::Gen { split, count } => commands::gen(c, split, count),
        Command::Train { steps } => commands::train(c, steps),
        Command::Eval { params, split, overlays, features } => commands::eval(c, params.as_deref(), split, overlays, features),
        Command::Flops { params, split } => commands::flops(c, params.as_deref(), split),
        Command::Ablate { variant, steps } => commands::ablate(c, variant, steps),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), Some(name), e.to_string(), 1),
    }
}
