//! `mixlift`: batch experiments on two-chain mixtures, emitting CSV and JSON.

mod commands;
mod config;
mod output;
mod source;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit codes.
const EXIT_OK: u8 = 0;
const EXIT_FAILURE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_BUDGET: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "mixlift", version, about = "Mixing experiments on lifted two-chain mixtures")]
pub struct Cli {
    /// Output root; defaults to $MIXLIFT_OUT, then ./mixlift-runs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed; every task derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct SpecArgs {
    /// Spec file: a full TOML spec, or a family file (`family = "demo"`).
    #[arg(long)]
    pub spec: PathBuf,
    /// Side size; required for family files.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EnvArgs {
    /// Environment TOML written by `gen-env`; sampled from the seed when absent.
    #[arg(long)]
    pub env: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ChainArg {
    Lifted,
    Projected,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the structural hypotheses of a spec.
    Validate {
        #[command(flatten)]
        spec: SpecArgs,
        /// Largest return length tabulated.
        #[arg(long, default_value_t = 3)]
        l_max: usize,
    },
    /// Sample a matching and write it as TOML.
    GenEnv {
        #[arg(long)]
        n: usize,
    },
    /// Exact distance to stationarity from chosen starts.
    MixProfile {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        starts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.25")]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        t_max: usize,
        #[arg(long, value_enum, default_value_t = ChainArg::Projected)]
        chain: ChainArg,
    },
    /// Mixing times over a grid of sizes with a fitted entropy.
    CutoffScan {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long = "n", value_delimiter = ',', required = true)]
        n_grid: Vec<usize>,
        #[arg(long, default_value_t = 0.25)]
        eps: f64,
        /// Environments per size.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Uniform starts per environment.
        #[arg(long, default_value_t = 4)]
        starts: usize,
        #[arg(long, default_value_t = 1_000_000)]
        t_max: usize,
        #[arg(long, value_enum, default_value_t = ChainArg::Projected)]
        chain: ChainArg,
    },
    /// Regeneration records and renewal statistics on the matching tree.
    QuasitreeStats {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value_t = 48)]
        runs: u64,
        #[arg(long, default_value_t = 2000)]
        t_max: u64,
        #[arg(long, default_value_t = 200)]
        lookahead: u64,
        #[arg(long, value_delimiter = ',', default_value = "10,20,40")]
        k_grid: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        min_hits: usize,
    },
    /// Drift and entropy on the matching tree, optionally audited on a finite environment.
    EstimateH {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, default_value_t = 40)]
        runs: u64,
        #[arg(long, default_value_t = 2000)]
        t_max: u64,
        #[arg(long, default_value_t = 200)]
        lookahead: u64,
        #[arg(long, default_value_t = 200)]
        n_inner: u64,
        #[arg(long, default_value_t = 4)]
        depth_horizon: usize,
        #[arg(long, default_value_t = 20_000)]
        max_ticks: u64,
        /// Length of the finite-environment audit; skipped when absent.
        #[arg(long)]
        audit_t: Option<u64>,
        #[arg(long, default_value_t = 100)]
        audit_runs: u64,
        #[arg(long, default_value_t = 2)]
        r: usize,
        #[arg(long = "big-l", default_value_t = 2)]
        big_l: usize,
    },
    /// Balance of the tree measure on truncated trees.
    InvariantCheck {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value_t = 8)]
        trees: u64,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        /// Largest relative residual accepted.
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Forward neighbourhood of a state.
    ForwardExplore {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, default_value_t = 0)]
        x: usize,
        #[arg(long, default_value_t = 4)]
        l1: usize,
        #[arg(long, default_value_t = 1e-3)]
        w_min: f64,
        #[arg(long, default_value_t = 2)]
        r: usize,
        #[arg(long = "big-l", default_value_t = 2)]
        big_l: usize,
        #[arg(long, default_value_t = 100_000)]
        budget: usize,
        /// Constants TOML; the bundled defaults otherwise.
        #[arg(long)]
        constants: Option<PathBuf>,
    },
    /// Fraction of nice trajectories.
    NiceAudit {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        env: EnvArgs,
        /// Entropy of the chain.
        #[arg(long)]
        h: f64,
        /// Drift of the chain.
        #[arg(long)]
        d: f64,
        #[arg(long, default_value_t = 2)]
        r: usize,
        #[arg(long = "big-l", default_value_t = 2)]
        big_l: usize,
        #[arg(long, default_value_t = 40)]
        m: u64,
        #[arg(long, default_value_t = 20)]
        runs: u64,
        #[arg(long, default_value_t = 100_000)]
        budget: usize,
        #[arg(long)]
        constants: Option<PathBuf>,
    },
    /// Stationary law estimated from regeneration excursions.
    Pihat {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long = "big-l", default_value_t = 2)]
        big_l: usize,
        #[arg(long, default_value_t = 40)]
        m: u64,
        #[arg(long, default_value_t = 240)]
        s0: u64,
        #[arg(long, default_value_t = 20_000)]
        samples: u64,
        #[arg(long, default_value_t = 20)]
        lookahead: u64,
        #[arg(long, default_value_t = 200)]
        max_wait: u64,
    },
    /// Biased-segment chain: find or plant a trap and measure its escape curve.
    Counterexample {
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        l: usize,
        /// Segment copies; the side size is six times this.
        #[arg(long, default_value_t = 4096)]
        copies: usize,
        /// Plant the trap when the search fails.
        #[arg(long)]
        plant: bool,
        /// Centres scanned before giving up; 0 plants at once.
        #[arg(long, default_value_t = 1000)]
        budget: usize,
        /// Escape curve reported at 10^0 .. 10^k.
        #[arg(long, default_value_t = 8)]
        t_exp: u32,
        #[arg(long, default_value_t = 4)]
        typical_starts: usize,
        #[arg(long, default_value_t = 0.25)]
        eps: f64,
        /// Skip the escape curve and typical mixing times.
        #[arg(long)]
        no_escape: bool,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<mixlift::Error>() {
        Some(e) if e.is_budget() => EXIT_BUDGET,
        Some(_) => EXIT_VALIDATION,
        None => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(out) => {
            println!("{} [{}]", out.summary, out.dir.display());
            ExitCode::from(out.code)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
