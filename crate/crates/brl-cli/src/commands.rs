//! Subcommand drivers: each consumes a materialized [`RunConfig`], runs
//! the corresponding estimators, and returns printable lines plus a
//! result table.
//!
//! Work units (grid points, exponent values, sphere radii) draw their
//! randomness from sub-streams keyed by absolute unit index, so the
//! results are independent of how units are partitioned into shards.

use std::path::Path;

use num_complex::Complex64;
use thiserror::Error;

use brl_core::ensembles::{
    correlation, mean_and_variance, sample_goe, ModelError, ModelSpec,
};
use brl_core::fracmom::{estimate_phi, goe_quadform_lower_bound, FracmomError};
use brl_core::linalg::{operator_norm, ComplexBlock, Projector, RealSymBlock};
use brl_core::lyapunov::{
    delocalization_threshold, equilibrated_pool, estimate_l, free_fixed_point_block,
    free_gamma_scalar, free_l0, spectral_sets, EstimateError, EstimatorSchedule,
    IntervalUnion, PoolSchedule,
};
use brl_core::pool::{GammaPool, PoolError};
use brl_core::resonance::{
    gamma_quantile, moment_statistics, pz_probability, resonance_events,
    simon_wolff_sum, upper_quantile, EventMode, ResonanceConfig, ResonanceError,
    SumMode, SW_STREAM_TAG,
};
use brl_core::rng::RngStream;
use brl_core::tree::{
    dense_resolvent_oracle, sample_tree_potentials, SpectralPoint, TreeError,
    TreeGeometry, TreeGreens,
};

use crate::config::{ConfigError, RunConfig};
use crate::output::{cell, RunTable};

/// Pool checkpoint cadence in generations.
pub const CHECKPOINT_EVERY: u64 = 100;

/// Stream tags separating the subcommands' randomness ("cly", "cph",
/// "cfi", "cre", "csw", "clr", "cxi").
pub const CLI_LYAPUNOV_TAG: u64 = 0x0063_6c79;
pub const CLI_PHASE_TAG: u64 = 0x0063_7068;
pub const CLI_PHI_TAG: u64 = 0x0063_6669;
pub const CLI_RESONANCE_TAG: u64 = 0x0063_7265;
pub const CLI_SW_TAG: u64 = 0x0063_7377;
pub const CLI_LREF_TAG: u64 = 0x0063_6c72;
pub const CLI_XI_TAG: u64 = 0x0063_7869;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Usage(#[from] ConfigError),
    #[error("{kind}: {message}")]
    Core { kind: &'static str, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit code for this error: 1 for usage problems, 2 for
    /// numerical or io failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core { .. } | CliError::Io(_) => 2,
        }
    }

    /// Machine-readable single-line error record.
    pub fn record(&self) -> String {
        let (kind, message) = match self {
            CliError::Usage(e) => ("usage", e.to_string()),
            CliError::Core { kind, message } => (*kind, message.clone()),
            CliError::Io(e) => ("io", e.to_string()),
        };
        serde_json::json!({"error": {"kind": kind, "message": message}}).to_string()
    }
}

macro_rules! core_error {
    ($type:ty, $kind:literal) => {
        impl From<$type> for CliError {
            fn from(e: $type) -> Self {
                CliError::Core {
                    kind: $kind,
                    message: e.to_string(),
                }
            }
        }
    };
}

core_error!(EstimateError, "estimate");
core_error!(PoolError, "pool");
core_error!(TreeError, "tree");
core_error!(ResonanceError, "resonance");
core_error!(FracmomError, "fracmom");
core_error!(ModelError, "model");

/// Result of one subcommand: lines for stdout and the tabular records.
#[derive(Debug, Default)]
pub struct CommandOutput {
    pub printed: Vec<String>,
    pub table: RunTable,
    /// Nonzero only for `selftest`: the number of failed checks.
    pub selftest_failures: usize,
}

/// Dispatches the materialized config to its subcommand driver.  The
/// config is mutable because `auto` knobs (`l_ref`, `xi`) are materialized
/// to their computed values before anything is emitted.
pub fn run_config(config: &mut RunConfig) -> Result<CommandOutput, CliError> {
    match config.subcommand.clone().as_str() {
        "sets" => run_sets(config),
        "lyapunov" => run_lyapunov(config),
        "phase" => run_phase(config),
        "phi" => run_phi(config),
        "resonance" => run_resonance(config),
        "sw" => run_sw(config),
        "selftest" => Ok(run_selftest()),
        other => Err(CliError::Usage(ConfigError::BadValue {
            key: "subcommand".to_string(),
            value: other.to_string(),
            reason: "expected sets, lyapunov, phase, phi, resonance, sw, or selftest"
                .to_string(),
        })),
    }
}

fn single_lambda(config: &RunConfig) -> Result<f64, CliError> {
    let lambdas = config.lambda_grid()?;
    Ok(config.single("lambda", &lambdas)?)
}

fn single_e(config: &RunConfig) -> Result<f64, CliError> {
    let energies = config.e_grid()?;
    Ok(config.single("e", &energies)?)
}

fn single_eta(config: &RunConfig) -> Result<f64, CliError> {
    let etas = config.eta_list()?;
    Ok(config.single("eta", &etas)?)
}

/// Rounds for the human-readable interval lines; table cells keep full
/// precision.
fn round5(x: f64) -> f64 {
    (x * 1.0e5).round() / 1.0e5
}

fn format_union(u: &IntervalUnion) -> String {
    if u.is_empty() {
        return "{}".to_string();
    }
    u.intervals()
        .iter()
        .map(|(lo, hi)| format!("[{}, {}]", round5(*lo), round5(*hi)))
        .collect::<Vec<_>>()
        .join(" u ")
}

fn run_sets(config: &mut RunConfig) -> Result<CommandOutput, CliError> {
    let lambda = single_lambda(config)?;
    let model = config.model_at(lambda)?;
    let sets = spectral_sets(config.k, &model.base_eigenvalues(), config.eps);
    let printed = vec![
        format!("S_eps = {}", format_union(&sets.s_eps)),
        format!("S_eps^- = {}", format_union(&sets.s_eps_minus)),
    ];
    let mut table = RunTable::new(vec!["set", "interval", "lo", "hi"]);
    for (name, union) in [("s_eps", &sets.s_eps), ("s_eps_minus", &sets.s_eps_minus)] {
        for (i, (lo, hi)) in union.intervals().iter().enumerate() {
            table.push(vec![
                name.to_string(),
                i.to_string(),
                cell(*lo),
                cell(*hi),
            ]);
        }
    }
    Ok(CommandOutput {
        printed,
        table,
        selftest_failures: 0,
    })
}

/// Builds the pool for one spectral point, honoring `--resume` and
/// `--checkpoint`.  Fresh pools are seeded at the free fixed point and
/// burned in along the annealing ladder, exactly like the library's
/// equilibrated pools; a resumed pool is topped up to the configured
/// burn-in depth.
fn build_pool(
    config: &RunConfig,
    model: &ModelSpec,
    point: SpectralPoint,
    stream: &RngStream,
) -> Result<GammaPool, CliError> {
    let mut pool = if !config.resume.is_empty() {
        let loaded = GammaPool::load(Path::new(&config.resume))?;
        if loaded.model() != model || loaded.point() != point {
            return Err(CliError::Usage(ConfigError::BadValue {
                key: "resume".to_string(),
                value: config.resume.clone(),
                reason: "checkpoint was written for a different model or spectral point"
                    .to_string(),
            }));
        }
        loaded
    } else {
        GammaPool::from_constant(
            model,
            point,
            config.pool,
            free_fixed_point_block(model, point),
        )?
    };
    let remaining = config.burn_in.saturating_sub(pool.generation());
    if remaining > 0 {
        if config.checkpoint.is_empty() {
            pool.burn_in(stream, remaining)?;
        } else {
            pool.burn_in_checkpointed(
                stream,
                remaining,
                CHECKPOINT_EVERY,
                Path::new(&config.checkpoint),
            )?;
        }
    } else if !config.checkpoint.is_empty() {
        pool.save(Path::new(&config.checkpoint))?;
    }
    Ok(pool)
}

fn run_lyapunov(config: &mut RunConfig) -> Result<CommandOutput, CliError> {
    let lambda = single_lambda(config)?;
    let model = config.model_at(lambda)?;
    let energies = config.e_grid()?;
    let etas = config.eta_list()?;
    let units = energies.len() * etas.len();
    if units != 1 && (!config.checkpoint.is_empty() || !config.resume.is_empty()) {
        return Err(CliError::Usage(ConfigError::BadValue {
            key: "checkpoint".to_string(),
            value: format!("{units} grid points"),
            reason: "pool checkpointing needs a single (E, eta) point".to_string(),
        }));
    }
    let schedule = EstimatorSchedule {
        chain_steps: config.chain,
        replicas: config.replicas,
    };
    let base = RngStream::from_seed(config.seed).derive(CLI_LYAPUNOV_TAG);
    let mut table = RunTable::new(vec![
        "E", "eta", "lambda", "L_hat", "stderr", "n", "replicas",
    ]);
    for (i, &eta) in etas.iter().enumerate() {
        for (j, &e) in energies.iter().enumerate() {
            let idx = (i * energies.len() + j) as u64;
            let stream = base.derive(idx);
            let point = SpectralPoint::new(e, eta);
            let pool = build_pool(config, &model, point, &stream)?;
            let estimate = estimate_l(&pool, schedule, &stream)?;
            table.push(vec![
                cell(e),
                cell(eta),
                cell(lambda),
                cell(estimate.mean),
                cell(estimate.stderr),
                config.chain.to_string(),
                config.replicas.to_string(),
            ]);
        }
    }
    Ok(CommandOutput {
        printed: Vec::new(),
        table,
        selftest_failures: 0,
    })
}

fn run_phase(config: &mut RunConfig) -> Result<CommandOutput, CliError> {
    let lambdas = config.lambda_grid()?;
    let energies = config.e_grid()?;
    let etas = config.eta_list()?;
    let eta = config.single("eta", &etas)?;
    let threshold = delocalization_threshold(config.k);
    let pool_schedule = PoolSchedule {
        size: config.pool,
        burn_in_generations: config.burn_in,
    };
    let schedule = EstimatorSchedule {
        chain_steps: config.chain,
        replicas: config.replicas,
    };
    let base = RngStream::from_seed(config.seed).derive(CLI_PHASE_TAG);
    let mut table = RunTable::new(vec![
        "E", "lambda", "eta", "L_hat", "stderr", "logK", "class",
    ]);
    for (i, &lambda) in lambdas.iter().enumerate() {
        // A zero-coupling row needs no burn-in: the pool starts exactly at
        // the free fixed point, and in-band resampling would precess
        // around it.
        let row_schedule = if lambda == 0.0 {
            PoolSchedule {
                size: config.pool,
                burn_in_generations: 0,
            }
        } else {
            pool_schedule
        };
        let model = config.model_at(lambda)?;
        for (j, &e) in energies.iter().enumerate() {
            let idx = (i * energies.len() + j) as u64;
            let stream = base.derive(idx);
            let point = SpectralPoint::new(e, eta);
            let pool = equilibrated_pool(&model, point, row_schedule, &stream)?;
            let estimate = estimate_l(&pool, schedule, &stream)?;
            let class = if estimate.mean + 3.0 * estimate.stderr < threshold {
                "deloc"
            } else if estimate.mean - 3.0 * estimate.stderr > threshold {
                "loc"
            } else {
                "boundary"
            };
            table.push(vec![
                cell(e),
                cell(lambda),
                cell(eta),
                cell(estimate.mean),
                cell(estimate.stderr),
                cell(threshold),
                class.to_string(),
            ]);
        }
    }
    Ok(CommandOutput {
        printed: Vec::new(),
        table,
        selftest_failures: 0,
    })
}

fn run_phi(config: &mut RunConfig) -> Result<CommandOutput, CliError> {
    let lambda = single_lambda(config)?;
    let model = config.model_at(lambda)?;
    let e = single_e(config)?;
    let eta = single_eta(config)?;
    let exponents = config.s_list()?;
    let point = SpectralPoint::new(e, eta);
    let base = RngStream::from_seed(config.seed).derive(CLI_PHI_TAG);
    let pool = equilibrated_pool(
        &model,
        point,
        PoolSchedule {
            size: config.pool,
            burn_in_generations: config.burn_in,
        },
        &base,
    )?;
    let distances: Vec<usize> = (0..=config.depth).collect();
    let mut table = RunTable::new(vec![
        "s",
        "E",
        "eta",
        "lambda",
        "phi",
        "stderr",
        "heavy_tail",
        "flagged",
        "samples",
    ]);
    for (j, &s) in exponents.iter().enumerate() {
        let scan = estimate_phi(
            &pool,
            s,
            &distances,
            config.samples,
            &base.derive(j as u64 + 1),
        )?;
        table.push(vec![
            cell(s),
            cell(e),
            cell(eta),
            cell(lambda),
            cell(scan.phi),
            cell(scan.phi_stderr),
            scan.heavy_tail.iter().any(|f| *f).to_string(),
            scan.exponent_flagged.to_string(),
            config.samples.to_string(),
        ]);
    }
    Ok(CommandOutput {
        printed: Vec::new(),
        table,
        selftest_failures: 0,
    })
}

fn run_resonance(config: &mut RunConfig) -> Result<CommandOutput, CliError> {
    let lambda = single_lambda(config)?;
    let model = config.model_at(lambda)?;
    let e = single_e(config)?;
    let eta = single_eta(config)?;
    let point = SpectralPoint::new(e, eta);
    let radii = config.radii_list()?;
    let base = RngStream::from_seed(config.seed);
    let pool_schedule = PoolSchedule {
        size: config.pool,
        burn_in_generations: config.burn_in,
    };
    let l_ref = if config.l_ref == "auto" {
        let stream = base.derive(CLI_LREF_TAG);
        let pool = equilibrated_pool(&model, point, pool_schedule, &stream)?;
        let estimate = estimate_l(
            &pool,
            EstimatorSchedule {
                chain_steps: config.chain,
                replicas: config.replicas,
            },
            &stream,
        )?;
        config.l_ref = estimate.mean.to_string();
        estimate.mean
    } else {
        config.l_ref.parse::<f64>().map_err(|_| {
            CliError::Usage(ConfigError::BadValue {
                key: "l_ref".to_string(),
                value: config.l_ref.clone(),
                reason: "expected auto or a number".to_string(),
            })
        })?
    };
    let mode = match config.mode.as_str() {
        "diagonal" => EventMode::Diagonal,
        "quantile" => {
            let xi = if config.xi == "auto" {
                let stream = base.derive(CLI_XI_TAG);
                let pool = equilibrated_pool(&model, point, pool_schedule, &stream)?;
                let xi = gamma_quantile(pool.members(), config.p)?;
                config.xi = xi.to_string();
                xi
            } else {
                config.xi.parse::<f64>().map_err(|_| {
                    CliError::Usage(ConfigError::BadValue {
                        key: "xi".to_string(),
                        value: config.xi.clone(),
                        reason: "expected auto or a number".to_string(),
                    })
                })?
            };
            EventMode::Quantile { p: config.p, xi: Some(xi) }
        }
        other => {
            return Err(CliError::Usage(ConfigError::BadValue {
                key: "mode".to_string(),
                value: other.to_string(),
                reason: "expected diagonal or quantile".to_string(),
            }))
        }
    };
    let mut table = RunTable::new(vec![
        "n",
        "trees",
        "mean_count",
        "mean_count_stderr",
        "r1",
        "r1_stderr",
        "r2",
        "r2_stderr",
        "pz_empirical",
        "pz_bound",
        "l_ref",
        "tau",
    ]);
    let unit_base = base.derive(CLI_RESONANCE_TAG);
    for (i, &n) in radii.iter().enumerate() {
        let rconfig = ResonanceConfig {
            n,
            delta: config.delta,
            l_ref,
            mode: mode.clone(),
        };
        let stats = moment_statistics(
            &model,
            point,
            &rconfig,
            config.trees,
            &unit_base.derive(i as u64),
        )?;
        let pz = pz_probability(&stats.counts)?;
        table.push(vec![
            n.to_string(),
            config.trees.to_string(),
            cell(stats.mean_count),
            cell(stats.mean_count_stderr),
            cell(stats.r1),
            cell(stats.r1_stderr),
            cell(stats.r2),
            cell(stats.r2_stderr),
            cell(pz.empirical),
            cell(pz.bound),
            cell(l_ref),
            cell(rconfig.tau()),
        ]);
    }
    Ok(CommandOutput {
        printed: Vec::new(),
        table,
        selftest_failures: 0,
    })
}

fn run_sw(config: &mut RunConfig) -> Result<CommandOutput, CliError> {
    let lambda = single_lambda(config)?;
    let model = config.model_at(lambda)?;
    let e = single_e(config)?;
    let etas = config.eta_list()?;
    let mode = match config.sw_mode.as_str() {
        "exact" => SumMode::Exact,
        "sampled" => SumMode::Sampled { rays: config.rays },
        other => {
            return Err(CliError::Usage(ConfigError::BadValue {
                key: "sw_mode".to_string(),
                value: other.to_string(),
                reason: "expected sampled or exact".to_string(),
            }))
        }
    };
    let report = simon_wolff_sum(
        &model,
        e,
        &etas,
        config.depth,
        mode,
        &RngStream::from_seed(config.seed).derive(CLI_SW_TAG),
    )?;
    let slope = report
        .divergence_slope
        .map(cell)
        .unwrap_or_default();
    let mut table = RunTable::new(vec![
        "E",
        "lambda",
        "depth",
        "eta",
        "total",
        "growth_r2",
        "tail_ratio",
        "divergence_slope",
        "sampled",
        "rays",
    ]);
    for rung in &report.rungs {
        table.push(vec![
            cell(e),
            cell(lambda),
            config.depth.to_string(),
            cell(rung.eta),
            cell(rung.total),
            cell(rung.growth_r2),
            cell(rung.tail_ratio),
            slope.clone(),
            report.sampled.to_string(),
            report.rays.to_string(),
        ]);
    }
    Ok(CommandOutput {
        printed: Vec::new(),
        table,
        selftest_failures: 0,
    })
}

// ---------------------------------------------------------------------------
// Selftest: closed-form and brute-force oracle checks for every estimator.

fn expect_close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, want {want} (tol {tol})"))
    }
}

fn err_str<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn check_interval_report() -> Result<(), String> {
    let sets = spectral_sets(2, &[0.0, 4.0], 0.5);
    let full = sets.s_eps.intervals();
    if full.len() != 1 {
        return Err(format!("S_eps has {} intervals", full.len()));
    }
    expect_close("S_eps lo", full[0].0, -2.5, 1.0e-9)?;
    expect_close("S_eps hi", full[0].1, 6.5, 1.0e-9)?;
    let band = sets.s_eps_minus.intervals();
    if band.len() != 1 {
        return Err(format!("S_eps^- has {} intervals", band.len()));
    }
    let r8 = 8.0_f64.sqrt();
    expect_close("S_eps^- lo", band[0].0, 4.0 - r8 + 0.5, 1.0e-9)?;
    expect_close("S_eps^- hi", band[0].1, r8 - 0.5, 1.0e-9)
}

fn check_free_message_band_center() -> Result<(), String> {
    let eta = 1.0e-3;
    let g = free_gamma_scalar(2, SpectralPoint::new(0.0, eta));
    expect_close("Re Gamma", g.re, 0.0, 1.0e-12)?;
    expect_close(
        "Im Gamma",
        g.im,
        ((8.0 + eta * eta).sqrt() - eta) / 4.0,
        1.0e-12,
    )?;
    expect_close("frozen Im Gamma", g.im, 0.706_856_78, 1.0e-6)
}

fn check_free_message_band_edges() -> Result<(), String> {
    let g3 = free_gamma_scalar(2, SpectralPoint::new(3.0, 1.0e-9));
    expect_close("Gamma(3)", g3.re, -0.5, 1.0e-6)?;
    let g4 = free_gamma_scalar(2, SpectralPoint::new(4.0, 1.0e-9));
    expect_close("Gamma(4)", g4.re, 1.0 / 2.0_f64.sqrt() - 1.0, 1.0e-6)
}

fn check_free_lyapunov_values() -> Result<(), String> {
    expect_close(
        "L0 at the full-spectrum edge",
        free_l0(2, &[0.0], 3.0),
        2.0_f64.ln(),
        1.0e-9,
    )?;
    expect_close(
        "L0 in the band",
        free_l0(2, &[0.0], 0.0),
        0.5 * 2.0_f64.ln(),
        1.0e-9,
    )?;
    expect_close(
        "L0 two-channel frozen value",
        free_l0(2, &[0.0, 4.0], -2.9),
        0.571_067_8,
        1.0e-6,
    )
}

fn check_dense_oracle_diagonals() -> Result<(), String> {
    let a = RealSymBlock::diagonal(&[0.0, 0.5]);
    let model = ModelSpec::new(2, 2, a, brl_core::ensembles::EnsembleSpec::Goe, 0.4)
        .map_err(err_str)?;
    let geom = TreeGeometry::new(2, 3).map_err(err_str)?;
    let point = SpectralPoint::new(0.9, 0.1);
    let stream = RngStream::from_seed(17);
    let greens = TreeGreens::build(&model, &geom, point, &stream).map_err(err_str)?;
    let potentials = sample_tree_potentials(&model, &geom, &stream);
    let full = dense_resolvent_oracle(&geom, &potentials, point, &[]).map_err(err_str)?;
    for x in 0..geom.vertex_count() {
        let diff = greens
            .diagonal(x)
            .sub(&full.block(x, x).map_err(err_str)?)
            .max_abs_entry();
        if diff > 1.0e-10 {
            return Err(format!("diagonal at vertex {x} off by {diff}"));
        }
    }
    for x in 1..geom.vertex_count() {
        let recursive = operator_norm(&greens.path_green(x).map_err(err_str)?);
        let dense = operator_norm(&full.block(0, x).map_err(err_str)?);
        if (recursive - dense).abs() > 1.0e-10 {
            return Err(format!(
                "path block to vertex {x}: norm {recursive} vs dense {dense}"
            ));
        }
    }
    Ok(())
}

fn check_dense_oracle_punctured() -> Result<(), String> {
    let model = ModelSpec::scalar_goe(2, 0.5);
    let geom = TreeGeometry::new(2, 3).map_err(err_str)?;
    let point = SpectralPoint::new(1.1, 0.01);
    let stream = RngStream::from_seed(19);
    let greens = TreeGreens::build(&model, &geom, point, &stream).map_err(err_str)?;
    let potentials = sample_tree_potentials(&model, &geom, &stream);
    for x in geom.sphere(3).map_err(err_str)? {
        let punctured =
            dense_resolvent_oracle(&geom, &potentials, point, &[x]).map_err(err_str)?;
        let path = geom.path_vertices(x);
        let x_minus = path[path.len() - 2];
        let dense = operator_norm(&punctured.block(0, x_minus).map_err(err_str)?);
        let recursive = greens.punctured_path_green(x).map_err(err_str)?.norm;
        if (recursive - dense).abs() > 1.0e-10 {
            return Err(format!(
                "punctured path into {x}: norm {recursive} vs dense {dense}"
            ));
        }
    }
    Ok(())
}

fn check_triple_factorization() -> Result<(), String> {
    let a = RealSymBlock::diagonal(&[0.0, 1.0]);
    let model = ModelSpec::new(2, 2, a, brl_core::ensembles::EnsembleSpec::Goe, 0.4)
        .map_err(err_str)?;
    let geom = TreeGeometry::new(2, 4).map_err(err_str)?;
    let point = SpectralPoint::new(0.7, 0.02);
    let greens = TreeGreens::build(&model, &geom, point, &RngStream::from_seed(11))
        .map_err(err_str)?;
    let mut x = 0;
    while !geom.children(x).is_empty() {
        x = geom.children(x).start;
    }
    let path = geom.path_vertices(x);
    for u_level in 1..path.len() - 2 {
        let u = path[u_level];
        let u_plus = path[u_level + 1];
        let lhs = greens.punctured_path_green(x).map_err(err_str)?.block;
        let head = greens.punctured_path_green(u).map_err(err_str)?.block;
        let mid = greens.punctured_diagonal(u, x).map_err(err_str)?;
        let tail = greens
            .punctured_path_green_from(u_plus, x)
            .map_err(err_str)?
            .block;
        let diff = lhs.sub(&head.mul(&mid).mul(&tail)).max_abs_entry();
        if diff > 1.0e-10 {
            return Err(format!("cut at level {u_level}: residual {diff}"));
        }
    }
    Ok(())
}

fn check_herglotz_pool() -> Result<(), String> {
    let a = RealSymBlock::diagonal(&[0.0, 4.0]);
    let model = ModelSpec::new(2, 2, a, brl_core::ensembles::EnsembleSpec::Goe, 0.4)
        .map_err(err_str)?;
    let pool = equilibrated_pool(
        &model,
        SpectralPoint::new(1.0, 1.0e-2),
        PoolSchedule {
            size: 100,
            burn_in_generations: 80,
        },
        &RngStream::from_seed(23),
    )
    .map_err(err_str)?;
    let min_eig = pool.min_skew_eigenvalue();
    if min_eig < -1.0e-10 {
        return Err(format!("pool skew part dipped to {min_eig}"));
    }
    Ok(())
}

fn check_phi_free_corridor() -> Result<(), String> {
    let model = ModelSpec::scalar_goe(2, 0.0);
    let distances: Vec<usize> = (0..=10).collect();
    for (e, corridor) in [(0.0, -0.173_286_8), (3.0, -0.346_573_6)] {
        let point = SpectralPoint::new(e, 1.0e-3);
        let pool = GammaPool::from_constant(
            &model,
            point,
            64,
            free_fixed_point_block(&model, point),
        )
        .map_err(err_str)?;
        let scan = estimate_phi(&pool, 0.5, &distances, 64, &RngStream::from_seed(29))
            .map_err(err_str)?;
        let gamma = free_gamma_scalar(2, point);
        expect_close(
            &format!("phi at E = {e} against the free message"),
            scan.phi,
            0.5 * gamma.norm().ln(),
            1.0e-9,
        )?;
        expect_close(
            &format!("phi at E = {e} against the corridor value"),
            scan.phi,
            corridor,
            5.0e-4,
        )?;
    }
    Ok(())
}

fn check_quadform_baseline() -> Result<(), String> {
    let sigma = ComplexBlock::zeros(2);
    let e1 = [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)];
    let estimate = goe_quadform_lower_bound(
        2,
        0.5,
        1.0,
        &sigma,
        &e1,
        &e1,
        100_000,
        &RngStream::from_seed(90),
    )
    .map_err(err_str)?;
    if !estimate.stable() {
        return Err(format!(
            "estimate unstable: {} +- {}",
            estimate.mean, estimate.stderr
        ));
    }
    expect_close("frozen quadform moment", estimate.mean, 1.404_16, 0.01)
}

fn check_sw_exact_vs_dense() -> Result<(), String> {
    let model = ModelSpec::scalar_goe(2, 0.4);
    let base = RngStream::from_seed(31);
    let report = simon_wolff_sum(&model, 1.1, &[0.1], 5, SumMode::Exact, &base)
        .map_err(err_str)?;
    let geom = TreeGeometry::new(2, 5).map_err(err_str)?;
    let potentials = sample_tree_potentials(&model, &geom, &base.derive(SW_STREAM_TAG));
    let oracle = dense_resolvent_oracle(
        &geom,
        &potentials,
        SpectralPoint::new(1.1, 0.1),
        &[],
    )
    .map_err(err_str)?;
    let mut expected = 0.0;
    for x in 0..geom.vertex_count() {
        expected += operator_norm(&oracle.block(0, x).map_err(err_str)?).powi(2);
    }
    let total = report.rungs[0].total;
    if (total - expected).abs() > 1.0e-8 * expected {
        return Err(format!("square sum {total} vs dense {expected}"));
    }
    Ok(())
}

fn check_sw_geometric_tail() -> Result<(), String> {
    let model = ModelSpec::scalar_goe(2, 0.0);
    let report = simon_wolff_sum(
        &model,
        4.0,
        &[1.0e-6],
        40,
        SumMode::Sampled { rays: 2 },
        &RngStream::from_seed(43),
    )
    .map_err(err_str)?;
    let expected = 2.0 * (1.0 / 2.0_f64.sqrt() - 1.0).powi(2);
    let ratio = report.rungs[0].tail_ratio;
    if (ratio / expected - 1.0).abs() > 0.05 {
        return Err(format!("shell ratio {ratio} vs prediction {expected}"));
    }
    Ok(())
}

fn check_resonance_dense_flags() -> Result<(), String> {
    let model = ModelSpec::scalar_goe(2, 0.5);
    let point = SpectralPoint::new(2.9, 1.0e-3);
    let config = ResonanceConfig::diagonal(3, 0.62);
    let stream = RngStream::from_seed(7);
    let sample = resonance_events(&model, point, &config, &stream).map_err(err_str)?;
    let geom = TreeGeometry::new(2, 4).map_err(err_str)?;
    let potentials = sample_tree_potentials(&model, &geom, &stream);
    for v in &sample.vertices {
        let x = v.vertex;
        let punctured =
            dense_resolvent_oracle(&geom, &potentials, point, &[x]).map_err(err_str)?;
        let path = geom.path_vertices(x);
        let block = punctured
            .block(0, path[path.len() - 2])
            .map_err(err_str)?;
        let r_flag = operator_norm(&block) >= config.r_threshold();
        if r_flag != v.r_flag {
            return Err(format!("R flag at vertex {x} disagrees with the oracle"));
        }
    }
    Ok(())
}

fn check_pz_bernoulli() -> Result<(), String> {
    let mut stream = RngStream::from_seed(23);
    let coin: Vec<usize> = (0..800)
        .map(|_| usize::from(stream.normal() > 0.0))
        .collect();
    let pz = pz_probability(&coin).map_err(err_str)?;
    expect_close("Bernoulli bound", pz.bound, 0.5, 0.06)?;
    if pz.empirical < pz.bound - 3.0 * (pz.bound_stderr + pz.empirical_stderr) {
        return Err(format!(
            "P = {} fell below the bound {}",
            pz.empirical, pz.bound
        ));
    }
    Ok(())
}

fn check_uniform_quantile() -> Result<(), String> {
    let mut stream = RngStream::from_seed(53);
    let values: Vec<f64> = (0..10_000).map(|_| stream.uniform()).collect();
    let xi = upper_quantile(&values, 0.25).map_err(err_str)?;
    expect_close("uniform upper quantile", xi, 0.75, 0.02)
}

fn check_goe_sampler_moments() -> Result<(), String> {
    let mut stream = RngStream::from_seed(47);
    let n = 20_000;
    let mut diag = Vec::with_capacity(n);
    let mut off = Vec::with_capacity(n);
    let mut head = Vec::with_capacity(n);
    let mut tail = Vec::with_capacity(n);
    let p = Projector::from_coordinates(2, &[0]).map_err(err_str)?;
    for _ in 0..n {
        let v = sample_goe(2, &mut stream);
        diag.push(v.at(0, 0));
        off.push(v.at(0, 1));
        let (pvp, _, _, qvq) = brl_core::ensembles::projected_blocks(&v, &p);
        head.push(pvp.at(0, 0).re);
        tail.push(qvq.at(1, 1).re);
    }
    let (diag_mean, diag_var) = mean_and_variance(&diag);
    let (off_mean, off_var) = mean_and_variance(&off);
    expect_close("diagonal mean", diag_mean, 0.0, 0.03)?;
    expect_close("diagonal variance", diag_var, 1.0, 0.05)?;
    expect_close("off-diagonal mean", off_mean, 0.0, 0.03)?;
    expect_close("off-diagonal variance", off_var, 0.5, 0.03)?;
    let corr = correlation(&head, &tail);
    if corr.abs() > 0.03 {
        return Err(format!("projected blocks correlate: {corr}"));
    }
    Ok(())
}

fn check_norm_pair_bound() -> Result<(), String> {
    let mut stream = RngStream::from_seed(59);
    for trial in 0..500 {
        let dim = 1 + trial % 8;
        let v = sample_goe(dim, &mut stream);
        let norm = operator_norm(&v.to_complex());
        let mut diag_max = 0.0_f64;
        for j in 0..dim {
            diag_max = diag_max.max(v.at(j, j).abs());
        }
        let mut pair_max = 0.0_f64;
        for j in 0..dim {
            for k in 0..dim {
                if j != k {
                    let q = v.at(j, j) + v.at(k, k) + 2.0 * v.at(j, k);
                    pair_max = pair_max.max(q.abs());
                }
            }
        }
        let bound = 3.0 * dim as f64 * diag_max.max(pair_max);
        if norm > bound {
            return Err(format!(
                "trial {trial} dim {dim}: norm {norm} above bound {bound}"
            ));
        }
    }
    Ok(())
}

type Check = fn() -> Result<(), String>;

/// Runs every oracle check and reports one `[ok]`/`[FAIL]` line each.
pub fn run_selftest() -> CommandOutput {
    let checks: Vec<(&str, Check)> = vec![
        ("interval-report", check_interval_report),
        ("free-message-band-center", check_free_message_band_center),
        ("free-message-band-edges", check_free_message_band_edges),
        ("free-lyapunov-values", check_free_lyapunov_values),
        ("dense-oracle-diagonals", check_dense_oracle_diagonals),
        ("dense-oracle-punctured", check_dense_oracle_punctured),
        ("triple-factorization", check_triple_factorization),
        ("herglotz-pool", check_herglotz_pool),
        ("phi-free-corridor", check_phi_free_corridor),
        ("quadform-baseline", check_quadform_baseline),
        ("sw-exact-vs-dense", check_sw_exact_vs_dense),
        ("sw-geometric-tail", check_sw_geometric_tail),
        ("resonance-dense-flags", check_resonance_dense_flags),
        ("pz-bernoulli", check_pz_bernoulli),
        ("uniform-quantile", check_uniform_quantile),
        ("goe-sampler-moments", check_goe_sampler_moments),
        ("norm-pair-bound", check_norm_pair_bound),
    ];
    let mut printed = Vec::with_capacity(checks.len() + 1);
    let mut failures = 0;
    for (name, check) in &checks {
        match check() {
            Ok(()) => printed.push(format!("[ok] {name}")),
            Err(message) => {
                failures += 1;
                printed.push(format!("[FAIL] {name}: {message}"));
            }
        }
    }
    printed.push(format!(
        "{} checks, {} failed",
        checks.len(),
        failures
    ));
    CommandOutput {
        printed,
        table: RunTable::default(),
        selftest_failures: failures,
    }
}
