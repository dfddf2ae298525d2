//! Command-line front end for the Bethe-strip laboratory: spectral-set
//! reports, Lyapunov and phase-diagram scans, fractional-moment decay,
//! resonance counting, square-sum ladders, and a selftest battery.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::run_config;
use crate::config::materialize;
use crate::output::{render, write_document};

/// Numerical laboratory for random Schrödinger operators on the Bethe strip.
#[derive(Debug, Parser)]
#[command(name = "brl", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Report the spectral sets S_eps and S_eps^- for a model.
    Sets(CommonArgs),
    /// Estimate the Lyapunov exponent on an (E, eta) grid.
    Lyapunov(CommonArgs),
    /// Classify an (E, lambda) grid against the delocalization threshold.
    Phase(CommonArgs),
    /// Estimate fractional-moment decay exponents phi(s).
    Phi(CommonArgs),
    /// Count resonance events on tree spheres and report moment ratios.
    Resonance(CommonArgs),
    /// Accumulate Green-function square sums down an eta ladder.
    Sw(CommonArgs),
    /// Run the built-in oracle checks.
    Selftest(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Sets(_) => "sets",
            Command::Lyapunov(_) => "lyapunov",
            Command::Phase(_) => "phase",
            Command::Phi(_) => "phi",
            Command::Resonance(_) => "resonance",
            Command::Sw(_) => "sw",
            Command::Selftest(_) => "selftest",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Sets(a)
            | Command::Lyapunov(a)
            | Command::Phase(a)
            | Command::Phi(a)
            | Command::Resonance(a)
            | Command::Sw(a)
            | Command::Selftest(a) => a,
        }
    }
}

/// Every knob accepted by every subcommand.  Unset flags fall back to the
/// config file (if given) and then to the built-in defaults.
#[derive(Debug, Args)]
struct CommonArgs {
    /// Config file with key=value lines; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Branching number of the tree.
    #[arg(long = "K")]
    k: Option<String>,
    /// Strip width.
    #[arg(long = "W")]
    w: Option<String>,
    /// Base block: diag:v1,...,vW | rows:r1;...;rW | file:<path>.
    #[arg(long = "A")]
    a: Option<String>,
    /// Potential ensemble: goe | cauchy:<scale> | diag-normal | diag-uniform:<h>.
    #[arg(long)]
    ensemble: Option<String>,
    /// Coupling strength: number, comma list, or lo:hi:step.
    #[arg(long)]
    lambda: Option<String>,
    /// Energy: number, comma list, or lo:hi:step.
    #[arg(long = "E")]
    e: Option<String>,
    /// Imaginary offset eta: number or comma list.
    #[arg(long)]
    eta: Option<String>,
    /// Shrinkage for the spectral-set report.
    #[arg(long)]
    eps: Option<String>,
    /// Ray-chain length for Lyapunov estimates.
    #[arg(long)]
    chain: Option<String>,
    /// Message-pool size.
    #[arg(long)]
    pool: Option<String>,
    /// Pool burn-in generations.
    #[arg(long = "burn-in")]
    burn_in: Option<String>,
    /// Independent estimator replicas.
    #[arg(long)]
    replicas: Option<String>,
    /// Tree replicas for resonance counting.
    #[arg(long)]
    trees: Option<String>,
    /// Fractional exponent(s) for phi scans.
    #[arg(long)]
    s: Option<String>,
    /// Resonance-rate slack delta.
    #[arg(long)]
    delta: Option<String>,
    /// Quantile level for the quantile event mode.
    #[arg(long)]
    p: Option<String>,
    /// Tree depth for phi scans and square sums.
    #[arg(long)]
    depth: Option<String>,
    /// Sphere radii for resonance counting (comma list).
    #[arg(long)]
    radii: Option<String>,
    /// Rays per rung for sampled square sums.
    #[arg(long)]
    rays: Option<String>,
    /// Monte Carlo samples per distance for phi scans.
    #[arg(long)]
    samples: Option<String>,
    /// Reference Lyapunov rate for resonance thresholds, or auto.
    #[arg(long = "l-ref")]
    l_ref: Option<String>,
    /// Resonance event mode: diagonal | quantile.
    #[arg(long)]
    mode: Option<String>,
    /// Quantile threshold xi, or auto.
    #[arg(long)]
    xi: Option<String>,
    /// Square-sum mode: sampled | exact.
    #[arg(long = "sw-mode")]
    sw_mode: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<String>,
    /// Output path, or - for stdout.
    #[arg(long)]
    out: Option<String>,
    /// Output format: csv | json.
    #[arg(long)]
    format: Option<String>,
    /// Number of shards the unit grid is split into.
    #[arg(long)]
    shards: Option<String>,
    /// Pool checkpoint path, written every 100 generations.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Resume the pool from a checkpoint file.
    #[arg(long)]
    resume: Option<String>,
}

impl CommonArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut pairs = Vec::new();
        let mut push = |key: &str, value: &Option<String>| {
            if let Some(v) = value {
                pairs.push((key.to_string(), v.clone()));
            }
        };
        push("k", &self.k);
        push("w", &self.w);
        push("a", &self.a);
        push("ensemble", &self.ensemble);
        push("lambda", &self.lambda);
        push("e", &self.e);
        push("eta", &self.eta);
        push("eps", &self.eps);
        push("chain", &self.chain);
        push("pool", &self.pool);
        push("burn_in", &self.burn_in);
        push("replicas", &self.replicas);
        push("trees", &self.trees);
        push("s", &self.s);
        push("delta", &self.delta);
        push("p", &self.p);
        push("depth", &self.depth);
        push("radii", &self.radii);
        push("rays", &self.rays);
        push("samples", &self.samples);
        push("l_ref", &self.l_ref);
        push("mode", &self.mode);
        push("xi", &self.xi);
        push("sw_mode", &self.sw_mode);
        push("seed", &self.seed);
        push("out", &self.out);
        push("format", &self.format);
        push("shards", &self.shards);
        push("checkpoint", &self.checkpoint);
        push("resume", &self.resume);
        pairs
    }
}

/// Parses arguments, runs the subcommand, and returns the process exit
/// code: 0 success, 1 usage error, 2 numerical failure, 3 selftest failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits.
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return code;
        }
    };
    let common = cli.command.args();
    let file_text = match &common.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => Some(text),
            Err(e) => {
                eprintln!("error reading {}: {e}", path.display());
                return 1;
            }
        },
        None => None,
    };
    let mut config =
        match materialize(cli.command.name(), file_text.as_deref(), &common.overrides()) {
            Ok(config) => config,
            Err(e) => {
                eprintln!("{e}");
                return 1;
            }
        };
    let result = match run_config(&mut config) {
        Ok(result) => result,
        Err(e) => {
            eprintln!("{}", e.record());
            return e.exit_code();
        }
    };
    for line in &result.printed {
        println!("{line}");
    }
    if config.subcommand != "selftest" {
        let document = render(&config, &result.table);
        if let Err(e) = write_document(&config.out, &document) {
            eprintln!("error writing {}: {e}", config.out);
            return 2;
        }
    }
    if result.selftest_failures > 0 {
        3
    } else {
        0
    }
}
