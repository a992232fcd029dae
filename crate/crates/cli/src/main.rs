use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nerfsup::correspondence::Method;

mod commands;
mod config;

/// Train a radiance field on posed images, mine dense correspondences from
/// it, and learn pixel descriptors from those correspondences.
#[derive(Debug, Parser)]
#[command(name = "nerfsup", version)]
pub struct Cli {
    /// TOML file with per-subcommand sections.
    #[arg(long, global = true, env = "NERFSUP_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "NERFSUP_SEED")]
    pub seed: Option<u64>,
    /// Output directory [default: nerfsup-out].
    #[arg(long, global = true, env = "NERFSUP_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "NERFSUP_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic fixture to a posed-image dataset.
    Synth(SynthArgs),
    /// Optimize a radiance field on a dataset.
    TrainField(TrainFieldArgs),
    /// Generate correspondence tuples from a trained field.
    Gen(GenArgs),
    /// Train a descriptor model on correspondence tuples.
    TrainDesc(TrainDescArgs),
    /// Score a matcher on annotated correspondences.
    Eval(EvalArgs),
    /// Render every dataset view from a field.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Fixture name: slab, sphere, rod, paired_sheets or transient_shadow.
    pub fixture: Option<String>,
    /// Fixture description file, instead of a named fixture.
    #[arg(long, conflicts_with = "fixture")]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub cameras: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainFieldArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, env = "NERFSUP_LAMBDA_DEPTH")]
    pub lambda_depth: Option<f64>,
    #[arg(long, env = "NERFSUP_K_SAMPLES")]
    pub k_samples: Option<usize>,
    /// Total optimization steps.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Stop after this many steps in this invocation; continue with --resume.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Continue from field.bin and optimizer.state in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long, env = "NERFSUP_METHOD", value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long, env = "NERFSUP_K_SAMPLES")]
    pub k_samples: Option<usize>,
    #[arg(long, env = "NERFSUP_CYCLE_THRESHOLD")]
    pub cycle_threshold: Option<f64>,
    #[arg(long, env = "NERFSUP_PAIRS")]
    pub pairs: Option<usize>,
    #[arg(long, env = "NERFSUP_SAMPLES_PER_PAIR")]
    pub samples_per_pair: Option<usize>,
    /// Accept tuples without the round-trip check.
    #[arg(long)]
    pub no_cycle_check: bool,
}

#[derive(Debug, Args)]
pub struct TrainDescArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub tuples: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Ground-truth annotations; drawn from the fixture description next to
    /// the manifest when omitted.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Descriptor model to score.
    #[arg(long, conflicts_with_all = ["field", "oracle"])]
    pub model: Option<PathBuf>,
    /// Radiance field to score as a matcher, with --method.
    #[arg(long, conflicts_with = "oracle")]
    pub field: Option<PathBuf>,
    #[arg(long, env = "NERFSUP_METHOD", value_parser = parse_method)]
    pub method: Option<Method>,
    /// Score the analytic scene itself (requires the fixture description).
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, env = "NERFSUP_K_SAMPLES")]
    pub k_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long, env = "NERFSUP_K_SAMPLES")]
    pub k_samples: Option<usize>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
