//! Fractional moments of Green-function blocks.
//!
//! The central object is the decay exponent of the fractional moment along a
//! ray,
//!
//! ```text
//!   phi(s; z) = lim_{d -> inf} (1/d) log E ||G(0, x_d; z)||^s ,
//! ```
//!
//! estimated here by a least-squares slope over pool-backed ray chains.  The
//! module also provides the factorization-ratio diagnostics that control
//! moments of path blocks when a path is cut at an intermediate vertex, the
//! sigma decomposition of a diagonal matrix element into a scalar Gaussian
//! plus an independent remainder, a Monte Carlo lower bound for fractional
//! moments of GOE resolvent quadratic forms, and decoupling ratios for
//! Mobius-type integrands.

use num_complex::Complex64;
use thiserror::Error;

use crate::ensembles::{mean_and_variance, sample_goe, sample_potential, ModelError, ModelSpec};
use crate::linalg::{
    inner, invert_block, operator_norm, quad_form, schur_restricted_inverse, vector_norm,
    ComplexBlock, LinalgError, Projector,
};
use crate::pool::{GammaPool, PoolError};
use crate::rng::RngStream;
use crate::tree::{
    recursion_matrix, sample_tree_potentials, SpectralPoint, TreeError, TreeGeometry, TreeGreens,
};

/// Stream tag for ray chains of the moment scan ("phi").
pub const PHI_STREAM_TAG: u64 = 0x0070_6869;

/// Stream tag for factorization-ratio tree sampling ("rat").
pub const RATIO_STREAM_TAG: u64 = 0x0072_6174;

/// Stream tag for GOE quadratic-form sampling ("qdf").
pub const QUADFORM_STREAM_TAG: u64 = 0x0071_6466;

/// Stream tag for decoupling-ratio sampling ("dec").
pub const DECOUPLE_STREAM_TAG: u64 = 0x0064_6563;

/// Largest admissible moment exponent for [`estimate_phi`].
pub const MAX_MOMENT_EXPONENT: f64 = 2.0;

/// Exponents at or above this value are outside the heavy-tail-safe regime
/// for resolvent moments and are flagged in the scan output.
pub const FLAGGED_MOMENT_EXPONENT: f64 = 1.0;

/// Shortest distance entering the slope fit; smaller distances carry
/// boundary transients from the root factor.
pub const MIN_FIT_DISTANCE: usize = 4;

/// Fraction of samples counted as the extreme tail by the heavy-tail flag.
pub const HEAVY_TAIL_TOP_FRACTION: f64 = 0.01;

/// A distance is flagged when its top tail carries more than this fraction
/// of the sample mean.
pub const HEAVY_TAIL_MASS_FRACTION: f64 = 0.5;

/// Imaginary parts at which the factorization ratios are reported.
pub const RATIO_ETA_RUNGS: [f64; 3] = [1.0e-1, 1.0e-2, 1.0e-3];

/// A Monte Carlo estimate counts as stable when the mean exceeds this many
/// standard errors.
pub const STABILITY_FACTOR: f64 = 10.0;

/// Independent sample groups used for the replica route of the slope error
/// bar.
const SLOPE_REPLICAS: usize = 4;

#[derive(Debug, Error)]
pub enum FracmomError {
    #[error("moment exponent s = {s} outside the supported range (0, {MAX_MOMENT_EXPONENT}]")]
    InvalidExponent { s: f64 },
    #[error("fractional exponent s = {s} outside the open range (0, 1)")]
    ExponentNotFractional { s: f64 },
    #[error(
        "decoupling exponents (alpha, beta) = ({alpha}, {beta}) must satisfy 0 < alpha < beta < 1"
    )]
    InvalidExponents { alpha: f64, beta: f64 },
    #[error("zero vector passed where a nonzero direction is required")]
    ZeroVector,
    #[error("distance list must be nonempty and strictly increasing")]
    BadDistances,
    #[error("at least {min} samples required, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error("slope fit needs at least two distances >= {MIN_FIT_DISTANCE}, got {points}")]
    FitUnderdetermined { points: usize },
    #[error("tree depth {depth} too small for the path factorization; need at least {min}")]
    DepthTooSmall { depth: usize, min: usize },
    #[error("a shifted-reciprocal map needs at least one coordinate")]
    EmptyShifts,
    #[error("operator or vector shapes disagree with the requested width {w}")]
    ShapeMismatch { w: usize },
    #[error("pool is mid-anneal: eta_current = {current} has not reached eta_target = {target}")]
    MidAnneal { current: f64, target: f64 },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A plain Monte Carlo mean with its standard error.
#[derive(Clone, Debug, serde::Serialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl MomentEstimate {
    /// Whether the mean clears [`STABILITY_FACTOR`] standard errors.
    pub fn stable(&self) -> bool {
        self.mean > STABILITY_FACTOR * self.stderr
    }
}

/// Per-distance fractional-moment scan with the fitted decay slope.
#[derive(Clone, Debug, serde::Serialize)]
pub struct MomentScan {
    pub s: f64,
    pub point: SpectralPoint,
    /// Distances at which the log-moments were estimated.
    pub distances: Vec<usize>,
    /// `log E ||G(0, x_d)||^s` per distance.
    pub log_moments: Vec<f64>,
    pub log_moment_stderrs: Vec<f64>,
    /// Fitted slope of the log-moments over the distances >=
    /// [`MIN_FIT_DISTANCE`].
    pub phi: f64,
    /// The larger of the residual-based and replica-spread slope errors.
    pub phi_stderr: f64,
    /// Number of distances that entered the fit.
    pub fitted_points: usize,
    /// Per-distance heavy-tail flag: the top [`HEAVY_TAIL_TOP_FRACTION`] of
    /// samples carries more than [`HEAVY_TAIL_MASS_FRACTION`] of the sum.
    pub heavy_tail: Vec<bool>,
    /// Set when `s >= FLAGGED_MOMENT_EXPONENT`: the estimate is outside the
    /// heavy-tail-safe contract for resolvent moments.
    pub exponent_flagged: bool,
    pub samples: usize,
}

/// Log operator norms `log ||G(0, x_d)||` for `d = 0 ..= d_max` along one
/// pool-backed ray.
///
/// The chain is built bottom-up exactly like the Lyapunov ray estimator
/// (pool draws first, fresh potential second), then closed with a root
/// factor whose remaining `K - 1` subtrees are pool draws.  The products
/// are accumulated top-down with operator-norm renormalization, so the
/// entries are exact log norms of the signed path blocks.
pub(crate) fn ray_log_norms(
    pool: &GammaPool,
    d_max: usize,
    stream: &mut RngStream,
) -> Result<Vec<f64>, FracmomError> {
    let model = pool.model();
    let z = pool.point().z();
    let k = model.k;
    let mut messages: Vec<ComplexBlock> = Vec::with_capacity(d_max);
    for step in 0..d_max {
        let inv = {
            let boundary = if step == 0 { k } else { k - 1 };
            let mut subtractions: Vec<&ComplexBlock> =
                (0..boundary).map(|_| pool.draw(stream)).collect();
            if let Some(prev) = messages.last() {
                subtractions.push(prev);
            }
            let u = sample_potential(model, stream);
            invert_block(&recursion_matrix(&u, z, &subtractions))?
        };
        messages.push(inv);
    }
    let root = {
        let boundary = if messages.is_empty() { k } else { k - 1 };
        let mut subtractions: Vec<&ComplexBlock> =
            (0..boundary).map(|_| pool.draw(stream)).collect();
        if let Some(top) = messages.last() {
            subtractions.push(top);
        }
        let u = sample_potential(model, stream);
        invert_block(&recursion_matrix(&u, z, &subtractions))?
    };
    let mut log_norms = Vec::with_capacity(d_max + 1);
    let mut acc = 0.0;
    let mut q = root;
    let n0 = operator_norm(&q);
    log_norms.push(n0.ln());
    acc += n0.ln();
    q = q.scale(Complex64::new(1.0 / n0, 0.0));
    // The last message computed is the child of the root, so the top-down
    // product walks the stored messages in reverse.
    for block in messages.iter().rev() {
        q = q.mul(block);
        let n = operator_norm(&q);
        log_norms.push(acc + n.ln());
        acc += n.ln();
        q = q.scale(Complex64::new(1.0 / n, 0.0));
    }
    Ok(log_norms)
}

/// Log of the empirical mean of `exp(s * t_i)` with its relative standard
/// error, computed against the sample maximum for stability.
fn log_moment_of(ts: &[f64], s: f64) -> (f64, f64, bool) {
    let m = ts
        .iter()
        .map(|t| s * t)
        .fold(f64::NEG_INFINITY, f64::max);
    let vals: Vec<f64> = ts.iter().map(|t| (s * t - m).exp()).collect();
    let (mean, var) = mean_and_variance(&vals);
    let stderr = (var / vals.len() as f64).sqrt() / mean;
    let mut sorted = vals.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = ((HEAVY_TAIL_TOP_FRACTION * sorted.len() as f64).ceil() as usize).max(1);
    let top_sum: f64 = sorted[..top.min(sorted.len())].iter().sum();
    let total: f64 = sorted.iter().sum();
    let heavy = top_sum > HEAVY_TAIL_MASS_FRACTION * total;
    (m + mean.ln(), stderr, heavy)
}

/// Unweighted least-squares line through `(xs, ys)`: returns the slope, the
/// intercept, and the residual-based slope standard error.
fn least_squares_line(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - x_mean) * (y - y_mean))
        .sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    if xs.len() <= 2 {
        return (slope, intercept, 0.0);
    }
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let stderr = (ss_res / (n - 2.0) / sxx).sqrt();
    (slope, intercept, stderr)
}

/// Estimates the fractional-moment decay exponent `phi(s; z)` from
/// pool-backed ray chains.
///
/// For each sample, one chain produces `log ||G(0, x_d)||` at every
/// requested distance; the per-distance moments `E ||G(0, x_d)||^s` are
/// averaged in a max-shifted exponential scale and the slope of their logs
/// is fitted over the distances >= [`MIN_FIT_DISTANCE`].  The slope error
/// is the larger of the least-squares residual error and the spread over
/// [`SLOPE_REPLICAS`] sample groups.
pub fn estimate_phi(
    pool: &GammaPool,
    s: f64,
    distances: &[usize],
    samples: usize,
    base: &RngStream,
) -> Result<MomentScan, FracmomError> {
    if !(s > 0.0 && s <= MAX_MOMENT_EXPONENT) || !s.is_finite() {
        return Err(FracmomError::InvalidExponent { s });
    }
    if distances.is_empty() || distances.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FracmomError::BadDistances);
    }
    if samples < 2 {
        return Err(FracmomError::TooFewSamples {
            got: samples,
            min: 2,
        });
    }
    let point = pool.point();
    if pool.eta_current() != point.eta {
        return Err(FracmomError::MidAnneal {
            current: pool.eta_current(),
            target: point.eta,
        });
    }
    let d_max = *distances.last().expect("nonempty");
    let chain_base = base.derive(PHI_STREAM_TAG);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(samples);
    for i in 0..samples {
        let mut stream = chain_base.derive(i as u64);
        rows.push(ray_log_norms(pool, d_max, &mut stream)?);
    }
    let mut log_moments = Vec::with_capacity(distances.len());
    let mut log_moment_stderrs = Vec::with_capacity(distances.len());
    let mut heavy_tail = Vec::with_capacity(distances.len());
    for &d in distances {
        let ts: Vec<f64> = rows.iter().map(|row| row[d]).collect();
        let (lm, se, heavy) = log_moment_of(&ts, s);
        log_moments.push(lm);
        log_moment_stderrs.push(se);
        heavy_tail.push(heavy);
    }
    let fit: Vec<(f64, f64)> = distances
        .iter()
        .zip(&log_moments)
        .filter(|(d, _)| **d >= MIN_FIT_DISTANCE)
        .map(|(d, lm)| (*d as f64, *lm))
        .collect();
    if fit.len() < 2 {
        return Err(FracmomError::FitUnderdetermined { points: fit.len() });
    }
    let xs: Vec<f64> = fit.iter().map(|(x, _)| *x).collect();
    let ys: Vec<f64> = fit.iter().map(|(_, y)| *y).collect();
    let (slope, _, residual_se) = least_squares_line(&xs, &ys);
    // Replica route: independent sample groups give independently fitted
    // slopes; their spread stays honest when per-distance estimates are
    // correlated through shared chains.
    let mut replica_se = 0.0;
    if samples >= 2 * SLOPE_REPLICAS {
        let mut group_slopes = Vec::with_capacity(SLOPE_REPLICAS);
        for r in 0..SLOPE_REPLICAS {
            let lo = r * samples / SLOPE_REPLICAS;
            let hi = (r + 1) * samples / SLOPE_REPLICAS;
            let mut g_ys = Vec::with_capacity(xs.len());
            for &d in distances.iter().filter(|d| **d >= MIN_FIT_DISTANCE) {
                let ts: Vec<f64> = rows[lo..hi].iter().map(|row| row[d]).collect();
                let (lm, _, _) = log_moment_of(&ts, s);
                g_ys.push(lm);
            }
            let (g_slope, _, _) = least_squares_line(&xs, &g_ys);
            group_slopes.push(g_slope);
        }
        let (_, var) = mean_and_variance(&group_slopes);
        replica_se = (var / group_slopes.len() as f64).sqrt();
    }
    Ok(MomentScan {
        s,
        point,
        distances: distances.to_vec(),
        log_moments,
        log_moment_stderrs,
        phi: slope,
        phi_stderr: residual_se.max(replica_se),
        fitted_points: fit.len(),
        heavy_tail,
        exponent_flagged: s >= FLAGGED_MOMENT_EXPONENT,
        samples,
    })
}

/// A ratio of empirical moments with a delete-one jackknife standard error.
#[derive(Clone, Debug, serde::Serialize)]
pub struct RatioEstimate {
    pub value: f64,
    pub stderr: f64,
}

/// Ratio of sample means `num / (den1 * den2)` with jackknife error.
fn jackknife_ratio(num: &[f64], den1: &[f64], den2: Option<&[f64]>) -> RatioEstimate {
    let n = num.len();
    let nf = n as f64;
    let sum_num: f64 = num.iter().sum();
    let sum_d1: f64 = den1.iter().sum();
    let sum_d2: Option<f64> = den2.map(|d| d.iter().sum());
    let eval = |s_num: f64, s_d1: f64, s_d2: Option<f64>, count: f64| -> f64 {
        let base = (s_num / count) / (s_d1 / count);
        match s_d2 {
            Some(s2) => base / (s2 / count),
            None => base,
        }
    };
    let value = eval(sum_num, sum_d1, sum_d2, nf);
    let mut leave_one_out = Vec::with_capacity(n);
    for i in 0..n {
        leave_one_out.push(eval(
            sum_num - num[i],
            sum_d1 - den1[i],
            sum_d2.map(|s| s - den2.expect("paired slice")[i]),
            nf - 1.0,
        ));
    }
    let (loo_mean, _) = mean_and_variance(&leave_one_out);
    let ss: f64 = leave_one_out
        .iter()
        .map(|v| (v - loo_mean).powi(2))
        .sum();
    RatioEstimate {
        value,
        stderr: ((nf - 1.0) / nf * ss).sqrt(),
    }
}

/// Factorization ratios at one imaginary part.
#[derive(Clone, Debug, serde::Serialize)]
pub struct RatioRung {
    pub eta: f64,
    /// `E||G^{T_x}(0,x_-)||^s / (E||G^{T_u}(0,u_-)||^s E||G^{T_{u,x}}(u_+,x_-)||^s)`:
    /// the triple-factorization ratio for the mid-path cut vertex `u`.
    pub triple: RatioEstimate,
    /// `E||G^{T_x}(0,x_-)||^s / E||G^{T_{x_-}}(0,x_--)||^s`: one recursion
    /// step of the punctured-path moment.
    pub parent_step: RatioEstimate,
    /// `E||G(0,x_-)||^s / E||G^{T_x}(0,x_-)||^s`: the cost of removing the
    /// subtree of `x` from the full path block.
    pub puncture_effect: RatioEstimate,
}

/// Factorization-moment ratios across the eta rungs of
/// [`RATIO_ETA_RUNGS`], sampled on exact finite trees with shared disorder
/// per sample.
#[derive(Clone, Debug, serde::Serialize)]
pub struct RatioReport {
    pub s: f64,
    pub e: f64,
    pub depth: usize,
    pub samples: usize,
    /// Deep path vertex `x` (first vertex of the bottom sphere).
    pub target: usize,
    /// Mid-path cut vertex `u`.
    pub mid_vertex: usize,
    pub rungs: Vec<RatioRung>,
}

/// Monte Carlo estimates of the path-moment factorization ratios on exact
/// trees of the given depth.
///
/// `x` is the first vertex of the bottom sphere and `u` the path vertex at
/// level `min(ceil(depth/2), depth - 2)`.  Each sample draws one set of
/// vertex potentials which is reused at every eta rung, so rung-to-rung
/// variation reflects the spectral parameter rather than fresh disorder.
pub fn factorization_moment_ratios(
    model: &ModelSpec,
    e: f64,
    s: f64,
    depth: usize,
    samples: usize,
    base: &RngStream,
) -> Result<RatioReport, FracmomError> {
    if !(s > 0.0 && s < 1.0) {
        return Err(FracmomError::ExponentNotFractional { s });
    }
    if depth < 3 {
        return Err(FracmomError::DepthTooSmall { depth, min: 3 });
    }
    if samples < 2 {
        return Err(FracmomError::TooFewSamples {
            got: samples,
            min: 2,
        });
    }
    model.validate()?;
    let geom = TreeGeometry::new(model.k, depth)?;
    let x = geom.sphere(depth)?.start;
    let path = geom.path_vertices(x);
    let u_level = depth.div_ceil(2).min(depth - 2).max(1);
    let u = path[u_level];
    let u_plus = path[u_level + 1];
    let x_minus = path[depth - 1];
    let rung_count = RATIO_ETA_RUNGS.len();
    let mut full = vec![Vec::with_capacity(samples); rung_count];
    let mut punctured = vec![Vec::with_capacity(samples); rung_count];
    let mut head = vec![Vec::with_capacity(samples); rung_count];
    let mut tail = vec![Vec::with_capacity(samples); rung_count];
    let mut parent = vec![Vec::with_capacity(samples); rung_count];
    let sample_base = base.derive(RATIO_STREAM_TAG);
    for i in 0..samples {
        let stream = sample_base.derive(i as u64);
        let potentials = sample_tree_potentials(model, &geom, &stream);
        for (r, &eta) in RATIO_ETA_RUNGS.iter().enumerate() {
            let greens = TreeGreens::from_potentials(
                geom.clone(),
                potentials.clone(),
                SpectralPoint::new(e, eta),
            )?;
            punctured[r].push(greens.punctured_path_green(x)?.norm.powf(s));
            head[r].push(greens.punctured_path_green(u)?.norm.powf(s));
            tail[r].push(greens.punctured_path_green_from(u_plus, x)?.norm.powf(s));
            parent[r].push(greens.punctured_path_green(x_minus)?.norm.powf(s));
            full[r].push(operator_norm(&greens.path_green(x_minus)?).powf(s));
        }
    }
    let rungs = RATIO_ETA_RUNGS
        .iter()
        .enumerate()
        .map(|(r, &eta)| RatioRung {
            eta,
            triple: jackknife_ratio(&punctured[r], &head[r], Some(&tail[r])),
            parent_step: jackknife_ratio(&punctured[r], &parent[r], None),
            puncture_effect: jackknife_ratio(&full[r], &punctured[r], None),
        })
        .collect();
    Ok(RatioReport {
        s,
        e,
        depth,
        samples,
        target: x,
        mid_vertex: u,
        rungs,
    })
}

/// Decomposition of a diagonal matrix element against the top singular
/// direction of its punctured path block.
///
/// With `v` the top eigenvector of `G^{T_x}(0,x_-)^* G^{T_x}(0,x_-)` and
/// `P` the projection onto `v`, the compressed diagonal element satisfies
///
/// ```text
///   <G(x,x) v, v> = 1 / (g - sigma) ,       g = lambda <V(x) v, v> ,
/// ```
///
/// where `sigma` collects the base energy, the spectral parameter, the
/// neighbor Green blocks, and a Schur product through the complement of
/// `v`; `sigma` is independent of the Gaussian scalar `g` under the GOE
/// block decomposition.  The three fields hold the same quantity computed
/// by different routes and should agree to rounding.
#[derive(Clone, Debug)]
pub struct SigmaDecomposition {
    /// Assembled term by term from the explicit decomposition.
    pub sigma: Complex64,
    /// Via the Schur-restricted inverse of the recursion matrix.
    pub sigma_schur: Complex64,
    /// Via the full diagonal block: `g - 1 / <G(x,x) v, v>`.
    pub sigma_resolvent: Complex64,
    /// The Gaussian scalar `lambda <V(x) v, v>`.
    pub g: f64,
    /// The compressed diagonal element `<G(x,x) v, v>`.
    pub diagonal_element: Complex64,
    /// The direction `v` the element is compressed onto.
    pub v_tilde: Vec<Complex64>,
}

/// Computes the sigma decomposition of `<G(x,x) v, v>` at a non-root
/// vertex of a computed tree.
pub fn sigma_decomposition(
    greens: &TreeGreens,
    model: &ModelSpec,
    x: usize,
) -> Result<SigmaDecomposition, FracmomError> {
    let w = model.w;
    if greens.potentials()[0].dim() != w || model.a.dim() != w {
        return Err(FracmomError::ShapeMismatch { w });
    }
    let v = greens.punctured_path_green(x)?.w_vector;
    let geom = greens.geometry();
    let z = greens.point().z();
    // Neighbor Green blocks of x with x removed: the parent-side backward
    // message plus the forward messages of all children.
    let mut neighbor_sum = greens.gamma_hat(x)?.clone();
    for c in geom.children(x) {
        neighbor_sum.add_assign(greens.gamma(c));
    }
    let u_full = greens.potentials()[x].to_complex();
    let a_c = model.a.to_complex();
    let lambda_v = u_full.sub(&a_c);
    let g_exact = quad_form(&lambda_v, &v, &v);
    let projector = Projector::from_vector(&v)?;
    // Explicit assembly: -<A v, v> + z + <sum_y G'(y,y) v, v> plus the
    // Schur product through the complement of v.  The spectral parameter
    // only survives on the diagonal, and the coupling term cancels in the
    // compressed block.
    let a_pp = quad_form(&a_c, &v, &v);
    let m_pp = quad_form(&neighbor_sum, &v, &v);
    let complement = projector.complement_basis()?;
    let cross = if complement.is_empty() {
        Complex64::new(0.0, 0.0)
    } else {
        let um = u_full.sub(&neighbor_sum);
        let c = complement.len();
        let mut b = ComplexBlock::zeros(c);
        let mut kappa = Vec::with_capacity(c);
        let mut rho = Vec::with_capacity(c);
        for (j, cj) in complement.iter().enumerate() {
            let um_cj = um.apply(cj);
            rho.push(inner(&um_cj, &v));
            for (i, ci) in complement.iter().enumerate() {
                b.set(i, j, inner(&um_cj, ci));
            }
        }
        for i in 0..c {
            b.set(i, i, b.at(i, i) - z);
        }
        let um_v = um.apply(&v);
        for ci in &complement {
            kappa.push(inner(&um_v, ci));
        }
        let b_inv = invert_block(&b)?;
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, rj) in rho.iter().enumerate() {
            for (i, ki) in kappa.iter().enumerate() {
                acc += rj * b_inv.at(j, i) * ki;
            }
        }
        acc
    };
    let sigma = -a_pp + z + m_pp + cross;
    // Schur route through the same recursion matrix.
    let subtractions: Vec<&ComplexBlock> = vec![&neighbor_sum];
    let t = recursion_matrix(&greens.potentials()[x], z, &subtractions);
    let restricted = schur_restricted_inverse(&t, &projector)?;
    let sigma_schur = g_exact - restricted.at(0, 0).inv();
    // Resolvent route through the independently inverted full diagonal.
    let diagonal_element = quad_form(greens.diagonal(x), &v, &v);
    let sigma_resolvent = g_exact - diagonal_element.inv();
    Ok(SigmaDecomposition {
        sigma,
        sigma_schur,
        sigma_resolvent,
        g: g_exact.re,
        diagonal_element,
        v_tilde: v,
    })
}

/// Monte Carlo estimate of the normalized fractional moment
///
/// ```text
///   E |<(lambda V - sigma)^{-1} phi, psi>|^s / (||phi||^s ||psi||^s)
/// ```
///
/// over GOE draws `V`.  The lower-bound statement this exercises is that
/// the estimate stays strictly positive uniformly in the direction pair,
/// including orthogonal `phi, psi`.
#[allow(clippy::too_many_arguments)]
pub fn goe_quadform_lower_bound(
    w: usize,
    s: f64,
    lambda: f64,
    sigma: &ComplexBlock,
    phi: &[Complex64],
    psi: &[Complex64],
    samples: usize,
    base: &RngStream,
) -> Result<MomentEstimate, FracmomError> {
    if !(s > 0.0 && s < 1.0) {
        return Err(FracmomError::ExponentNotFractional { s });
    }
    if sigma.dim() != w || phi.len() != w || psi.len() != w {
        return Err(FracmomError::ShapeMismatch { w });
    }
    if samples < 2 {
        return Err(FracmomError::TooFewSamples {
            got: samples,
            min: 2,
        });
    }
    let phi_norm = vector_norm(phi);
    let psi_norm = vector_norm(psi);
    if phi_norm == 0.0 || psi_norm == 0.0 {
        return Err(FracmomError::ZeroVector);
    }
    let denom = phi_norm.powf(s) * psi_norm.powf(s);
    let sample_base = base.derive(QUADFORM_STREAM_TAG);
    let mut vals = Vec::with_capacity(samples);
    for i in 0..samples {
        let mut stream = sample_base.derive(i as u64);
        let v = sample_goe(w, &mut stream).scale(lambda);
        let m = v.to_complex().sub(sigma);
        let inv = invert_block(&m)?;
        vals.push(quad_form(&inv, phi, psi).norm().powf(s) / denom);
    }
    let (mean, var) = mean_and_variance(&vals);
    Ok(MomentEstimate {
        mean,
        stderr: (var / samples as f64).sqrt(),
        samples,
    })
}

/// A function of independent standard normals that is fractional-linear in
/// every coordinate separately.
#[derive(Clone, Debug)]
pub enum MobiusFn {
    /// The constant function (arity zero).
    Constant(f64),
    /// `1 / (prod_i (x_i - shift_i) - offset)`.
    ShiftedReciprocal { shifts: Vec<f64>, offset: f64 },
}

impl MobiusFn {
    /// Number of coordinates consumed per evaluation.
    pub fn arity(&self) -> usize {
        match self {
            MobiusFn::Constant(_) => 0,
            MobiusFn::ShiftedReciprocal { shifts, .. } => shifts.len(),
        }
    }

    pub fn eval(&self, xs: &[f64]) -> f64 {
        match self {
            MobiusFn::Constant(c) => *c,
            MobiusFn::ShiftedReciprocal { shifts, offset } => {
                let prod: f64 = shifts.iter().zip(xs).map(|(c, x)| x - c).product();
                1.0 / (prod - offset)
            }
        }
    }
}

/// Ratio of two normalized fractional moments of a Mobius-type function.
#[derive(Clone, Debug, serde::Serialize)]
pub struct DecouplingEstimate {
    /// `(E|f|^beta)^{1/beta} / (E|f|^alpha)^{1/alpha}`.
    pub ratio: f64,
    /// Delete-one jackknife error of the ratio.
    pub stderr: f64,
    /// `(E|f|^alpha)^{1/alpha}`.
    pub lower_moment: f64,
    /// `(E|f|^beta)^{1/beta}`.
    pub upper_moment: f64,
    pub samples: usize,
}

/// Monte Carlo estimate of the moment ratio
/// `(E|f|^beta)^{1/beta} / (E|f|^alpha)^{1/alpha}` for `0 < alpha < beta <
/// 1` with i.i.d. standard normal inputs.
pub fn decoupling_ratio(
    f: &MobiusFn,
    alpha: f64,
    beta: f64,
    samples: usize,
    base: &RngStream,
) -> Result<DecouplingEstimate, FracmomError> {
    if !(0.0 < alpha && alpha < beta && beta < 1.0) {
        return Err(FracmomError::InvalidExponents { alpha, beta });
    }
    if samples < 2 {
        return Err(FracmomError::TooFewSamples {
            got: samples,
            min: 2,
        });
    }
    if let MobiusFn::ShiftedReciprocal { shifts, .. } = f {
        if shifts.is_empty() {
            return Err(FracmomError::EmptyShifts);
        }
    }
    let arity = f.arity();
    let sample_base = base.derive(DECOUPLE_STREAM_TAG);
    let mut lower_vals = Vec::with_capacity(samples);
    let mut upper_vals = Vec::with_capacity(samples);
    for i in 0..samples {
        let mut stream = sample_base.derive(i as u64);
        let xs: Vec<f64> = (0..arity).map(|_| stream.normal()).collect();
        let fv = f.eval(&xs).abs();
        lower_vals.push(fv.powf(alpha));
        upper_vals.push(fv.powf(beta));
    }
    let nf = samples as f64;
    let sum_lower: f64 = lower_vals.iter().sum();
    let sum_upper: f64 = upper_vals.iter().sum();
    let eval = |s_low: f64, s_up: f64, count: f64| -> f64 {
        (s_up / count).powf(1.0 / beta) / (s_low / count).powf(1.0 / alpha)
    };
    let ratio = eval(sum_lower, sum_upper, nf);
    let mut leave_one_out = Vec::with_capacity(samples);
    for i in 0..samples {
        leave_one_out.push(eval(
            sum_lower - lower_vals[i],
            sum_upper - upper_vals[i],
            nf - 1.0,
        ));
    }
    let (loo_mean, _) = mean_and_variance(&leave_one_out);
    let ss: f64 = leave_one_out
        .iter()
        .map(|v| (v - loo_mean).powi(2))
        .sum();
    Ok(DecouplingEstimate {
        ratio,
        stderr: ((nf - 1.0) / nf * ss).sqrt(),
        lower_moment: (sum_lower / nf).powf(1.0 / alpha),
        upper_moment: (sum_upper / nf).powf(1.0 / beta),
        samples,
    })
}
