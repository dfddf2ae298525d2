//! Resonance-counting statistics over tree spheres.
//!
//! A resonance at a sphere vertex `x` in `S_n` is the joint event that the
//! punctured path block into `x` has survived to the expected Lyapunov
//! scale,
//!
//! ```text
//!   R_x = { ||G^{T_x}(0, x_-)|| >= e^{-(L + delta) n} } ,
//! ```
//!
//! and the diagonal element at `x` is anomalously large,
//!
//! ```text
//!   E_x = { |<G(x, x) v, w>| >= tau } ,   tau = e^{+(L + 2 delta) n} ,
//! ```
//!
//! with the direction pair set by the event mode.  The count
//! `N = sum_x 1_{R_x and E_x}` (and `I_x` in quantile mode) feeds
//! first/second-moment scaling checks and a second-moment lower bound on
//! `P{N >= 1}`.  The module also provides Simon-Wolff square sums over
//! whole trees with a divergence diagnostic, and empirical quantiles of
//! the skew part of the forward messages.

use thiserror::Error;

use crate::ensembles::{mean_and_variance, ModelError, ModelSpec};
use crate::fracmom::{ray_log_norms, FracmomError};
use crate::linalg::{operator_norm, quad_form, skew_part, w_max_vector, ComplexBlock, LinalgError};
use crate::lyapunov::{equilibrated_pool, EstimateError, PoolSchedule};
use crate::pool::PoolError;
use crate::rng::RngStream;
use crate::tree::{
    sample_tree_potentials, SpectralPoint, TreeError, TreeGeometry, TreeGreens,
};

/// Stream tag for per-tree resonance sampling ("res").
pub const RESONANCE_STREAM_TAG: u64 = 0x0072_6573;

/// Stream tag for Simon-Wolff disorder and rays ("sw").
pub const SW_STREAM_TAG: u64 = 0x0000_7377;

/// Default excess-decay margin in the event thresholds.
pub const DEFAULT_DELTA: f64 = 0.05;

/// Largest sphere radius for exact per-vertex event computation; the tree
/// of depth `n + 1` must stay inside the dense-oracle cross-check budget.
pub const MAX_SPHERE_RADIUS: usize = 8;

/// Vertex budget for the exact Simon-Wolff mode.
pub const MAX_EXACT_SW_VERTICES: usize = 262_144;

/// Pool size behind the sampled Simon-Wolff mode.
pub const SW_POOL_SIZE: usize = 256;

/// Burn-in generations for the sampled Simon-Wolff pool at nonzero
/// disorder.  At `lambda = 0` the pool is seeded exactly at the free fixed
/// point and must not be stepped: in-band the fixed point is only
/// O(eta)-damped and resampling would precess around it.
pub const SW_BURN_IN_GENERATIONS: u64 = 80;

#[derive(Debug, Error)]
pub enum ResonanceError {
    #[error("sphere radius n = {n} outside the supported range 1..={max}")]
    RadiusOutOfRange { n: usize, max: usize },
    #[error("threshold margin delta = {delta} must be positive")]
    InvalidDelta { delta: f64 },
    #[error("quantile level p = {p} outside the open range (0, 1)")]
    InvalidLevel { p: f64 },
    #[error("quantile mode needs a xi estimate; compute one with gamma_quantile")]
    MissingQuantile,
    #[error("empty sample list")]
    EmptySample,
    #[error("exact mode at depth {depth} needs {vertices} vertices, budget {max}")]
    DepthTooLarge {
        depth: usize,
        vertices: usize,
        max: usize,
    },
    #[error("eta ladder must be nonempty, positive, and strictly decreasing")]
    BadEtaLadder,
    #[error("at least {min} trees required, got {got}")]
    TooFewTrees { got: usize, min: usize },
    #[error("sampled mode needs at least {min} rays, got {got}")]
    TooFewRays { got: usize, min: usize },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Fracmom(#[from] FracmomError),
}

/// Direction pair and extra event used when testing `E_x`.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub enum EventMode {
    /// `E_x` compresses `G(x,x)` onto the top singular direction `v` of the
    /// punctured path block on both sides.
    Diagonal,
    /// Adds the event `I_x = { ||skew_part(Gamma(x))|| >= xi }` and pairs
    /// `G(x,x)` against the top eigenvector of `skew_part(Gamma(y))` for
    /// the first child `y` of `x` on one side, keeping `v` on the other.
    Quantile { p: f64, xi: Option<f64> },
}

/// Thresholds for the resonance events on the sphere `S_n`.
///
/// `tau` and the `R_x` threshold are always recomputed from
/// `(l_ref, delta, n)` on demand so the stored fields cannot drift out of
/// sync with each other.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ResonanceConfig {
    /// Sphere radius `n`; the sampled tree has depth `n + 1` so every
    /// sphere vertex keeps forward messages below it.
    pub n: usize,
    /// Excess-decay margin `delta`.
    pub delta: f64,
    /// Lyapunov reference `L` entering both thresholds; estimate it with
    /// the Lyapunov machinery (or the free channel formula at zero
    /// disorder) and record it alongside results.
    pub l_ref: f64,
    pub mode: EventMode,
}

impl ResonanceConfig {
    /// Diagonal-mode config with the default margin.
    pub fn diagonal(n: usize, l_ref: f64) -> Self {
        ResonanceConfig {
            n,
            delta: DEFAULT_DELTA,
            l_ref,
            mode: EventMode::Diagonal,
        }
    }

    pub fn validate(&self) -> Result<(), ResonanceError> {
        if self.n == 0 || self.n > MAX_SPHERE_RADIUS {
            return Err(ResonanceError::RadiusOutOfRange {
                n: self.n,
                max: MAX_SPHERE_RADIUS,
            });
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(ResonanceError::InvalidDelta { delta: self.delta });
        }
        if let EventMode::Quantile { p, .. } = self.mode {
            if !(p > 0.0 && p < 1.0) {
                return Err(ResonanceError::InvalidLevel { p });
            }
        }
        Ok(())
    }

    /// `tau = exp((l_ref + 2 delta) n)`: the `E_x` threshold.
    pub fn tau(&self) -> f64 {
        ((self.l_ref + 2.0 * self.delta) * self.n as f64).exp()
    }

    /// `exp(-(l_ref + delta) n)`: the `R_x` threshold.
    pub fn r_threshold(&self) -> f64 {
        (-(self.l_ref + self.delta) * self.n as f64).exp()
    }
}

/// Event data for one sphere vertex.
#[derive(Clone, Debug, serde::Serialize)]
pub struct VertexEvents {
    pub vertex: usize,
    /// `||G^{T_x}(0, x_-)||`.
    pub path_block_norm: f64,
    /// `|<G(x,x) v, w>|` for the mode's direction pair.
    pub element_abs: f64,
    /// `||skew_part(Gamma(x))||` in quantile mode.
    pub gamma_tilde_norm: Option<f64>,
    pub r_flag: bool,
    pub e_flag: bool,
    /// Quantile-mode event `I_x`.
    pub i_flag: Option<bool>,
}

/// One sampled tree with its per-vertex events and resonance count.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ResonanceSample {
    pub n: usize,
    /// `N`: vertices with every required flag set.
    pub count: usize,
    pub vertices: Vec<VertexEvents>,
}

/// Samples one tree of depth `n + 1` and evaluates the resonance events at
/// every vertex of the sphere `S_n`.
pub fn resonance_events(
    model: &ModelSpec,
    point: SpectralPoint,
    config: &ResonanceConfig,
    stream: &RngStream,
) -> Result<ResonanceSample, ResonanceError> {
    config.validate()?;
    let xi = match config.mode {
        EventMode::Diagonal => None,
        EventMode::Quantile { xi, .. } => Some(xi.ok_or(ResonanceError::MissingQuantile)?),
    };
    let geom = TreeGeometry::new(model.k, config.n + 1)?;
    let greens = TreeGreens::build(model, &geom, point, stream)?;
    let tau = config.tau();
    let r_threshold = config.r_threshold();
    let sphere = geom.sphere(config.n)?;
    let mut vertices = Vec::with_capacity(sphere.len());
    let mut count = 0usize;
    for x in sphere {
        let pg = greens.punctured_path_green(x)?;
        let r_flag = pg.norm >= r_threshold;
        let (element_abs, gamma_tilde_norm, i_flag) = match xi {
            None => {
                let element = quad_form(greens.diagonal(x), &pg.w_vector, &pg.w_vector);
                (element.norm(), None, None)
            }
            Some(xi) => {
                let tilde_x = skew_part(greens.gamma(x));
                let tilde_norm = operator_norm(&tilde_x);
                let y = geom.children(x).start;
                let (_, pair) = w_max_vector(&skew_part(greens.gamma(y)))?;
                let element = quad_form(greens.diagonal(x), &pair, &pg.w_vector);
                (element.norm(), Some(tilde_norm), Some(tilde_norm >= xi))
            }
        };
        let e_flag = element_abs >= tau;
        if r_flag && e_flag && i_flag.unwrap_or(true) {
            count += 1;
        }
        vertices.push(VertexEvents {
            vertex: x,
            path_block_norm: pg.norm,
            element_abs,
            gamma_tilde_norm,
            r_flag,
            e_flag,
            i_flag,
        });
    }
    Ok(ResonanceSample {
        n: config.n,
        count,
        vertices,
    })
}

/// First and second factorial moments of the resonance count over
/// independent trees, with the normalized scaling ratios.
#[derive(Clone, Debug, serde::Serialize)]
pub struct MomentStatistics {
    pub n: usize,
    pub trees: usize,
    /// Sample mean of `N`.
    pub mean_count: f64,
    pub mean_count_stderr: f64,
    /// Sample mean of `N (N - 1)`.
    pub mean_pairs: f64,
    pub mean_pairs_stderr: f64,
    /// `mean_count * tau / K^n`: bounded below by a positive constant in
    /// the first-moment scaling regime.
    pub r1: f64,
    pub r1_stderr: f64,
    /// `mean_pairs * tau^2 / K^{2n}`: bounded above in the second-moment
    /// scaling regime.
    pub r2: f64,
    pub r2_stderr: f64,
    /// Raw counts, one per tree, for downstream probability bounds.
    pub counts: Vec<usize>,
}

/// Samples `trees` independent trees and reports the moment scaling of the
/// resonance count.
pub fn moment_statistics(
    model: &ModelSpec,
    point: SpectralPoint,
    config: &ResonanceConfig,
    trees: usize,
    base: &RngStream,
) -> Result<MomentStatistics, ResonanceError> {
    if trees < 2 {
        return Err(ResonanceError::TooFewTrees {
            got: trees,
            min: 2,
        });
    }
    config.validate()?;
    let tree_base = base.derive(RESONANCE_STREAM_TAG);
    let mut counts = Vec::with_capacity(trees);
    for i in 0..trees {
        let stream = tree_base.derive(i as u64);
        counts.push(resonance_events(model, point, config, &stream)?.count);
    }
    let count_vals: Vec<f64> = counts.iter().map(|c| *c as f64).collect();
    let pair_vals: Vec<f64> = counts
        .iter()
        .map(|c| (*c * c.saturating_sub(1)) as f64)
        .collect();
    let (mean_count, var_count) = mean_and_variance(&count_vals);
    let (mean_pairs, var_pairs) = mean_and_variance(&pair_vals);
    let nf = trees as f64;
    let mean_count_stderr = (var_count / nf).sqrt();
    let mean_pairs_stderr = (var_pairs / nf).sqrt();
    let kn = (model.k as f64).powi(config.n as i32);
    let scale1 = config.tau() / kn;
    let scale2 = config.tau().powi(2) / kn.powi(2);
    Ok(MomentStatistics {
        n: config.n,
        trees,
        mean_count,
        mean_count_stderr,
        mean_pairs,
        mean_pairs_stderr,
        r1: mean_count * scale1,
        r1_stderr: mean_count_stderr * scale1,
        r2: mean_pairs * scale2,
        r2_stderr: mean_pairs_stderr * scale2,
        counts,
    })
}

/// Second-moment lower bound on `P{N >= 1}` against the empirical
/// frequency.
#[derive(Clone, Debug, serde::Serialize)]
pub struct PzBound {
    /// Empirical `P{N >= 1}`.
    pub empirical: f64,
    /// Binomial standard error of the frequency.
    pub empirical_stderr: f64,
    /// `(E N)^2 / E N^2`; zero when every count is zero.
    pub bound: f64,
    /// Delete-one jackknife error of the bound.
    pub bound_stderr: f64,
    pub samples: usize,
}

/// Computes the Paley-Zygmund pair for a list of counts: the empirical
/// `P{N >= 1}` and the lower bound `(E N)^2 / E N^2`.
pub fn pz_probability(counts: &[usize]) -> Result<PzBound, ResonanceError> {
    if counts.is_empty() {
        return Err(ResonanceError::EmptySample);
    }
    let nf = counts.len() as f64;
    let positive = counts.iter().filter(|c| **c >= 1).count() as f64;
    let empirical = positive / nf;
    let empirical_stderr = (empirical * (1.0 - empirical) / nf).sqrt();
    let sum: f64 = counts.iter().map(|c| *c as f64).sum();
    let sum_sq: f64 = counts.iter().map(|c| (*c * *c) as f64).sum();
    let bound_of = |s: f64, s2: f64, count: f64| -> f64 {
        if s2 == 0.0 {
            0.0
        } else {
            (s / count).powi(2) / (s2 / count)
        }
    };
    let bound = bound_of(sum, sum_sq, nf);
    let mut bound_stderr = 0.0;
    if counts.len() > 1 {
        let mut leave_one_out = Vec::with_capacity(counts.len());
        for c in counts {
            let cf = *c as f64;
            leave_one_out.push(bound_of(sum - cf, sum_sq - cf * cf, nf - 1.0));
        }
        let (loo_mean, _) = mean_and_variance(&leave_one_out);
        let ss: f64 = leave_one_out
            .iter()
            .map(|v| (v - loo_mean).powi(2))
            .sum();
        bound_stderr = ((nf - 1.0) / nf * ss).sqrt();
    }
    Ok(PzBound {
        empirical,
        empirical_stderr,
        bound,
        bound_stderr,
        samples: counts.len(),
    })
}

/// How the Simon-Wolff square sums are computed.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub enum SumMode {
    /// Every vertex of an exact finite tree; subject to the vertex budget.
    Exact,
    /// Shell estimates `K^d E||G(0, x_d)||^2` from pool-backed rays; the
    /// report is flagged as sampled.
    Sampled { rays: usize },
}

/// Square sums at one imaginary part.
#[derive(Clone, Debug, serde::Serialize)]
pub struct SimonWolffRung {
    pub eta: f64,
    /// `sum_{|x| = d} ||G(0, x)||^2` per shell, index `d = 0..=depth`.
    pub shell_sums: Vec<f64>,
    /// Cumulative sums through each depth.
    pub partial_sums: Vec<f64>,
    pub total: f64,
    /// R^2 of the linear fit of the partial sums against depth: near one
    /// when shells keep contributing (divergence), lower when the sum has
    /// converged.
    pub growth_r2: f64,
    /// `shell[depth] / shell[depth - 1]`: geometric tail indicator.
    pub tail_ratio: f64,
}

/// Simon-Wolff square sums across an eta ladder at fixed disorder.
#[derive(Clone, Debug, serde::Serialize)]
pub struct SimonWolffReport {
    pub e: f64,
    pub depth: usize,
    /// True when the shells are ray-sampled estimates rather than exact
    /// sums.
    pub sampled: bool,
    pub rays: usize,
    pub rungs: Vec<SimonWolffRung>,
    /// Least-squares slope of `log total` against `log(1/eta)`: near one
    /// when the sums diverge like `1/eta`, near zero when they converge.
    /// Needs at least two rungs.
    pub divergence_slope: Option<f64>,
}

fn rung_from_shells(eta: f64, shell_sums: Vec<f64>) -> SimonWolffRung {
    let mut partial_sums = Vec::with_capacity(shell_sums.len());
    let mut acc = 0.0;
    for s in &shell_sums {
        acc += s;
        partial_sums.push(acc);
    }
    let total = acc;
    let xs: Vec<f64> = (0..partial_sums.len()).map(|d| d as f64).collect();
    let n = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = partial_sums.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&partial_sums)
        .map(|(x, y)| (x - x_mean) * (y - y_mean))
        .sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let ss_res: f64 = xs
        .iter()
        .zip(&partial_sums)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let ss_tot: f64 = partial_sums.iter().map(|y| (y - y_mean).powi(2)).sum();
    let growth_r2 = if ss_tot == 0.0 {
        0.0
    } else {
        1.0 - ss_res / ss_tot
    };
    let d = shell_sums.len() - 1;
    let tail_ratio = if d >= 1 && shell_sums[d - 1] > 0.0 {
        shell_sums[d] / shell_sums[d - 1]
    } else {
        f64::NAN
    };
    SimonWolffRung {
        eta,
        shell_sums,
        partial_sums,
        total,
        growth_r2,
        tail_ratio,
    }
}

/// Computes `sum_{|x| <= d} ||G(0, x; E + i eta)||^2` per depth and per
/// eta rung.
///
/// Exact mode samples one tree and reuses the same disorder at every rung,
/// walking all vertices with renormalization-free prefix products (depths
/// inside the budget keep the products well-scaled).  Sampled mode
/// estimates each shell as `K^d` times the ray average of
/// `||G(0, x_d)||^2`, with an independent equilibrated pool per rung; at
/// zero disorder the pool sits exactly at the free fixed point.
pub fn simon_wolff_sum(
    model: &ModelSpec,
    e: f64,
    etas: &[f64],
    depth: usize,
    mode: SumMode,
    base: &RngStream,
) -> Result<SimonWolffReport, ResonanceError> {
    model.validate()?;
    if etas.is_empty()
        || etas.iter().any(|eta| !(*eta > 0.0 && eta.is_finite()))
        || etas.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(ResonanceError::BadEtaLadder);
    }
    let mut rungs = Vec::with_capacity(etas.len());
    match mode {
        SumMode::Exact => {
            let mut vertices = 1usize;
            let mut level = 1usize;
            for _ in 0..depth {
                level = level
                    .checked_mul(model.k)
                    .filter(|_| vertices <= MAX_EXACT_SW_VERTICES)
                    .ok_or(ResonanceError::DepthTooLarge {
                        depth,
                        vertices: usize::MAX,
                        max: MAX_EXACT_SW_VERTICES,
                    })?;
                vertices += level;
            }
            if vertices > MAX_EXACT_SW_VERTICES {
                return Err(ResonanceError::DepthTooLarge {
                    depth,
                    vertices,
                    max: MAX_EXACT_SW_VERTICES,
                });
            }
            let geom = TreeGeometry::new(model.k, depth)?;
            let potentials =
                sample_tree_potentials(model, &geom, &base.derive(SW_STREAM_TAG));
            for &eta in etas {
                let greens = TreeGreens::from_potentials(
                    geom.clone(),
                    potentials.clone(),
                    SpectralPoint::new(e, eta),
                )?;
                let mut shells = vec![0.0; depth + 1];
                // Depth-first prefix products G(0,0) Gamma(x_1) ... Gamma(x_d);
                // the dropped hop signs do not move the norms.
                let mut stack: Vec<(usize, usize, ComplexBlock)> =
                    vec![(0, 0, greens.diagonal(0).clone())];
                while let Some((v, d, product)) = stack.pop() {
                    shells[d] += operator_norm(&product).powi(2);
                    for c in geom.children(v) {
                        stack.push((c, d + 1, product.mul(greens.gamma(c))));
                    }
                }
                rungs.push(rung_from_shells(eta, shells));
            }
        }
        SumMode::Sampled { rays } => {
            if rays < 2 {
                return Err(ResonanceError::TooFewRays { got: rays, min: 2 });
            }
            let schedule = PoolSchedule {
                size: SW_POOL_SIZE,
                burn_in_generations: if model.lambda == 0.0 {
                    0
                } else {
                    SW_BURN_IN_GENERATIONS
                },
            };
            let log_k = (model.k as f64).ln();
            for (r, &eta) in etas.iter().enumerate() {
                let point = SpectralPoint::new(e, eta);
                let rung_base = base.derive(SW_STREAM_TAG).derive(r as u64);
                let pool = equilibrated_pool(model, point, schedule, &rung_base)?;
                let ray_base = rung_base.derive(1);
                let mut rows = Vec::with_capacity(rays);
                for j in 0..rays {
                    let mut stream = ray_base.derive(j as u64);
                    rows.push(ray_log_norms(&pool, depth, &mut stream)?);
                }
                let mut shells = Vec::with_capacity(depth + 1);
                for d in 0..=depth {
                    // log-mean-exp of 2 t_d keeps rare large rays finite.
                    let m = rows
                        .iter()
                        .map(|row| 2.0 * row[d])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mean: f64 = rows
                        .iter()
                        .map(|row| (2.0 * row[d] - m).exp())
                        .sum::<f64>()
                        / rays as f64;
                    shells.push((d as f64 * log_k + m + mean.ln()).exp());
                }
                rungs.push(rung_from_shells(eta, shells));
            }
        }
    }
    let divergence_slope = if rungs.len() >= 2 {
        let xs: Vec<f64> = rungs.iter().map(|r| (1.0 / r.eta).ln()).collect();
        let ys: Vec<f64> = rungs.iter().map(|r| r.total.ln()).collect();
        let n = xs.len() as f64;
        let x_mean = xs.iter().sum::<f64>() / n;
        let y_mean = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
        let sxy: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - x_mean) * (y - y_mean))
            .sum();
        Some(sxy / sxx)
    } else {
        None
    };
    Ok(SimonWolffReport {
        e,
        depth,
        sampled: matches!(mode, SumMode::Sampled { .. }),
        rays: match mode {
            SumMode::Exact => 0,
            SumMode::Sampled { rays } => rays,
        },
        rungs,
        divergence_slope,
    })
}

/// Largest `t` whose empirical upper-tail probability `P{X >= t}` still
/// reaches `p`: the `ceil(p N)`-th largest sample.
///
/// The literal infimum of `{t : P{X >= t} >= p}` is degenerate because the
/// tail function is decreasing, so the usable quantile is the supremum of
/// that set; it satisfies `P{X >= xi(p)} >= p` by construction.
pub fn upper_quantile(values: &[f64], p: f64) -> Result<f64, ResonanceError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ResonanceError::InvalidLevel { p });
    }
    if values.is_empty() {
        return Err(ResonanceError::EmptySample);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let rank = ((p * sorted.len() as f64).ceil() as usize)
        .max(1)
        .min(sorted.len());
    Ok(sorted[rank - 1])
}

/// Empirical `p`-th upper quantile `xi(p)` of `||skew_part(Gamma)||` over
/// a list of forward-message samples, typically a burned-in pool.
pub fn gamma_quantile(members: &[ComplexBlock], p: f64) -> Result<f64, ResonanceError> {
    let norms: Vec<f64> = members
        .iter()
        .map(|g| operator_norm(&skew_part(g)))
        .collect();
    upper_quantile(&norms, p)
}
