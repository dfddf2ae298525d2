//! Lyapunov exponents of the forward-message cocycle and the spectral sets
//! they classify.
//!
//! Along a ray to depth `n` the off-diagonal Green block factorizes into a
//! product of forward messages, so
//!
//! ```text
//! L(E) = lim_n -(1/(n+1)) E log || M_0 M_1 ... M_n ||
//! ```
//!
//! is the decay rate of `||G(0, x_n)||`.  The spectrum splits by comparing
//! `L(E)` with `log K`: decay slower than `log K` leaves room for the
//! `K^n`-fold volume growth of spheres (the delocalized regime), faster
//! decay pins resolvents to single rays (the localized regime).
//!
//! Without disorder everything is explicit: each eigenvalue `a` of the base
//! operator contributes a scalar channel whose message fixed point solves
//! `K g^2 + (z - a) g + 1 = 0`, and `L_0(E)` is the smallest channel rate
//! `-log |g|`.  The closed forms here serve as oracles for the Monte Carlo
//! estimator, which runs stationary ray chains against a burned-in
//! [`GammaPool`].

use num_complex::Complex64;
use thiserror::Error;

use crate::ensembles::{mean_and_variance, sample_potential, ModelSpec};
use crate::linalg::{
    hermitian_eigen, invert_block, operator_norm, ComplexBlock, LinalgError,
};
use crate::pool::{GammaPool, PoolError};
use crate::rng::RngStream;
use crate::tree::{recursion_matrix, SpectralPoint, TreeError};

/// Stream tag for ray chains run by the estimator.
const RAY_STREAM_TAG: u64 = 0x0072_6179;
/// Stream tag for per-grid-point work in integrals and scans.
const GRID_STREAM_TAG: u64 = 0x6772_6964;

/// Contiguous increments averaged into one batch when estimating the
/// standard error of a single chain.
pub const BATCH_WINDOW: usize = 50;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("pool is mid-anneal: current eta {current} differs from target {target}")]
    MidAnneal { current: f64, target: f64 },
    #[error("estimator needs at least one replica and one chain step")]
    EmptySchedule,
    #[error("energy grid needs at least two points")]
    GridTooSmall,
    #[error(
        "no sign change of L - log K on [{lo}, {hi}] (L offsets {f_lo:.4} and {f_hi:.4})"
    )]
    NoSignChange { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Delocalization threshold `log K` for branching number `K`.
pub fn delocalization_threshold(k: usize) -> f64 {
    (k as f64).ln()
}

/// Physical root of the free fixed-point equation `K g^2 + z g + 1 = 0`.
///
/// For `eta > 0` this is the unique root in the upper half plane.  On the
/// real axis the limit depends on the position of `E`: inside the band
/// `E^2 < 4K` the boundary value keeps a positive imaginary part, outside
/// it is the real root of modulus at most `1/sqrt(K)`, evaluated in the
/// cancellation-free form.
pub fn free_gamma_scalar(k: usize, point: SpectralPoint) -> Complex64 {
    let kf = k as f64;
    let z = point.z();
    if point.eta > 0.0 {
        let disc = (z * z - 4.0 * kf).sqrt();
        let r1 = (-z + disc) / (2.0 * kf);
        let r2 = (-z - disc) / (2.0 * kf);
        if r1.im > r2.im {
            r1
        } else {
            r2
        }
    } else {
        let e = point.e;
        if e * e < 4.0 * kf {
            Complex64::new(-e, (4.0 * kf - e * e).sqrt()) / (2.0 * kf)
        } else {
            // Roots multiply to 1/K; divide out the large one, assembled
            // from |E| + disc to avoid cancellation.
            let disc = (e * e - 4.0 * kf).sqrt();
            let large_q = (e.abs() + disc) / 2.0;
            Complex64::new(-e.signum() / large_q, 0.0)
        }
    }
}

/// Per-channel free Lyapunov exponent `-log |g|` at the shifted energy
/// `E - a`.
pub fn free_channel_l(k: usize, point: SpectralPoint) -> f64 {
    -free_gamma_scalar(k, point).norm().ln()
}

/// Free Lyapunov exponent of the strip: the smallest channel rate over the
/// base-operator eigenvalues, at `eta = 0`.
pub fn free_l0(k: usize, base_eigenvalues: &[f64], e: f64) -> f64 {
    free_l_at(k, base_eigenvalues, SpectralPoint::new(e, 0.0))
}

/// Free Lyapunov exponent of the strip at an arbitrary spectral point.
pub fn free_l_at(k: usize, base_eigenvalues: &[f64], point: SpectralPoint) -> f64 {
    base_eigenvalues
        .iter()
        .map(|a| free_channel_l(k, SpectralPoint::new(point.e - a, point.eta)))
        .fold(f64::INFINITY, f64::min)
}

/// Matrix fixed point of the free recursion
/// `Gamma = (A - z - K Gamma)^{-1}`, assembled channel by channel in the
/// eigenbasis of the base operator.
pub fn free_fixed_point_block(
    model: &ModelSpec,
    point: SpectralPoint,
) -> ComplexBlock {
    let (values, vectors) = hermitian_eigen(&model.a.to_complex());
    let gammas: Vec<Complex64> = values
        .iter()
        .map(|a| free_gamma_scalar(model.k, SpectralPoint::new(point.e - a, point.eta)))
        .collect();
    // V diag(g_j) V^adj; V is real orthogonal up to roundoff here.
    vectors
        .mul(&ComplexBlock::diagonal(&gammas))
        .mul(&vectors.adjoint())
}

/// Union of closed intervals kept sorted, disjoint, and merged.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalUnion {
    intervals: Vec<(f64, f64)>,
}

impl IntervalUnion {
    pub fn empty() -> Self {
        IntervalUnion { intervals: Vec::new() }
    }

    /// Builds the canonical form: degenerate inputs are dropped, touching or
    /// overlapping intervals merge.
    pub fn new(mut raw: Vec<(f64, f64)>) -> Self {
        raw.retain(|(lo, hi)| hi >= lo);
        raw.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut intervals: Vec<(f64, f64)> = Vec::with_capacity(raw.len());
        for (lo, hi) in raw {
            match intervals.last_mut() {
                Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
                _ => intervals.push((lo, hi)),
            }
        }
        IntervalUnion { intervals }
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, x: f64) -> bool {
        self.intervals.iter().any(|(lo, hi)| *lo <= x && x <= *hi)
    }

    pub fn total_length(&self) -> f64 {
        self.intervals.iter().map(|(lo, hi)| hi - lo).sum()
    }

    /// Shrinks every interval by `eps` from both ends, dropping the ones
    /// that vanish.
    pub fn shrink(&self, eps: f64) -> IntervalUnion {
        IntervalUnion::new(
            self.intervals
                .iter()
                .map(|(lo, hi)| (lo + eps, hi - eps))
                .collect(),
        )
    }
}

/// Free spectral sets of the strip at tolerance `eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralSets {
    /// `eps`-interior of the full free spectrum: the union over channels of
    /// `a_j + [-(K+1), K+1]`.
    pub s_eps: IntervalUnion,
    /// `eps`-interior of the energies where every channel sits inside its
    /// `l^2` band `a_j + [-2 sqrt(K), 2 sqrt(K)]`.
    pub s_eps_minus: IntervalUnion,
}

/// Computes both spectral sets from the base-operator eigenvalues.
pub fn spectral_sets(k: usize, base_eigenvalues: &[f64], eps: f64) -> SpectralSets {
    let kf = k as f64;
    let full_half_width = kf + 1.0;
    let band_half_width = 2.0 * kf.sqrt();
    let s_eps = IntervalUnion::new(
        base_eigenvalues
            .iter()
            .map(|a| (a - full_half_width, a + full_half_width))
            .collect(),
    )
    .shrink(eps);
    let lo = base_eigenvalues
        .iter()
        .fold(f64::NEG_INFINITY, |acc, a| acc.max(a - band_half_width));
    let hi = base_eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, a| acc.min(a + band_half_width));
    let s_eps_minus = IntervalUnion::new(vec![(lo, hi)]).shrink(eps);
    SpectralSets { s_eps, s_eps_minus }
}

/// Schedule for the ray-chain estimator.
#[derive(Clone, Copy, Debug)]
pub struct EstimatorSchedule {
    /// Steps per ray beyond the bottom boundary, giving `chain_steps + 1`
    /// log increments.
    pub chain_steps: usize,
    /// Independent rays.
    pub replicas: usize,
}

impl Default for EstimatorSchedule {
    fn default() -> Self {
        EstimatorSchedule {
            chain_steps: 2000,
            replicas: 4,
        }
    }
}

/// Monte Carlo Lyapunov estimate with both error-bar routes.
#[derive(Clone, Debug)]
pub struct LyapunovEstimate {
    pub mean: f64,
    /// Final standard error: the larger of the two routes below.
    pub stderr: f64,
    /// Spread of per-ray means across replicas.
    pub replica_stderr: f64,
    /// Batch-mean error over windows of [`BATCH_WINDOW`] increments pooled
    /// from all rays; stays honest when replicas agree exactly.
    pub batch_stderr: f64,
    pub replica_means: Vec<f64>,
    pub chain_steps: usize,
}

/// Estimates the Lyapunov exponent by running stationary ray chains against
/// the (frozen) pool.
///
/// Each ray starts from a bulk vertex whose `K` subtrees are pool draws and
/// walks `chain_steps` levels up, feeding the previous message back in with
/// `K - 1` fresh pool draws.  The estimate is the negative mean log growth
/// of the accumulated message product, renormalized in operator norm every
/// step.
pub fn estimate_l(
    pool: &GammaPool,
    schedule: EstimatorSchedule,
    base: &RngStream,
) -> Result<LyapunovEstimate, EstimateError> {
    if schedule.replicas == 0 || schedule.chain_steps == 0 {
        return Err(EstimateError::EmptySchedule);
    }
    let point = pool.point();
    if pool.eta_current() != point.eta {
        return Err(EstimateError::MidAnneal {
            current: pool.eta_current(),
            target: point.eta,
        });
    }
    let model = pool.model();
    let z = point.z();
    let k = model.k;
    let w = model.w;
    let ray_base = base.derive(RAY_STREAM_TAG);
    let mut replica_means = Vec::with_capacity(schedule.replicas);
    let mut batch_means = Vec::new();
    for ray in 0..schedule.replicas {
        let mut s = ray_base.derive(ray as u64);
        let mut message: Option<ComplexBlock> = None;
        let mut product = ComplexBlock::identity(w);
        let mut increments = Vec::with_capacity(schedule.chain_steps + 1);
        for _ in 0..=schedule.chain_steps {
            // Pool draws first, fresh potential second, matching the pool's
            // own update convention.
            let boundary_draws = if message.is_some() { k - 1 } else { k };
            let mut subtractions: Vec<&ComplexBlock> = (0..boundary_draws)
                .map(|_| pool.draw(&mut s))
                .collect();
            if let Some(prev) = message.as_ref() {
                subtractions.push(prev);
            }
            let u = sample_potential(model, &mut s);
            let mat = recursion_matrix(&u, z, &subtractions);
            let next = invert_block(&mat)?;
            let grown = product.mul(&next);
            let growth = operator_norm(&grown);
            increments.push(-growth.ln());
            product = grown.scale(Complex64::new(1.0 / growth, 0.0));
            message = Some(next);
        }
        for chunk in increments.chunks_exact(BATCH_WINDOW) {
            batch_means.push(chunk.iter().sum::<f64>() / chunk.len() as f64);
        }
        replica_means.push(increments.iter().sum::<f64>() / increments.len() as f64);
    }
    let (mean, replica_var) = mean_and_variance(&replica_means);
    let replica_stderr = if replica_means.len() > 1 {
        (replica_var / replica_means.len() as f64).sqrt()
    } else {
        0.0
    };
    let batch_stderr = if batch_means.len() > 1 {
        let (_, batch_var) = mean_and_variance(&batch_means);
        (batch_var / batch_means.len() as f64).sqrt()
    } else {
        0.0
    };
    Ok(LyapunovEstimate {
        mean,
        stderr: replica_stderr.max(batch_stderr),
        replica_stderr,
        batch_stderr,
        replica_means,
        chain_steps: schedule.chain_steps,
    })
}

/// Pool construction schedule used by grid scans.
#[derive(Clone, Copy, Debug)]
pub struct PoolSchedule {
    pub size: usize,
    pub burn_in_generations: u64,
}

impl Default for PoolSchedule {
    fn default() -> Self {
        PoolSchedule {
            size: 2000,
            burn_in_generations: 300,
        }
    }
}

/// Builds a pool at the spectral point, seeded at the free fixed point and
/// burned in under the annealing ladder.
pub fn equilibrated_pool(
    model: &ModelSpec,
    point: SpectralPoint,
    schedule: PoolSchedule,
    base: &RngStream,
) -> Result<GammaPool, EstimateError> {
    let seed_block = free_fixed_point_block(model, point);
    let mut pool = GammaPool::from_constant(model, point, schedule.size, seed_block)?;
    if schedule.burn_in_generations > 0 {
        pool.burn_in(base, schedule.burn_in_generations)?;
    }
    Ok(pool)
}

/// One grid point of an energy scan.
#[derive(Clone, Debug)]
pub struct GridEstimate {
    pub e: f64,
    pub estimate: LyapunovEstimate,
}

/// Trapezoid integral of `L` over an energy grid, with the delocalization
/// witness set.
#[derive(Clone, Debug)]
pub struct IntegratedL {
    pub value: f64,
    pub stderr: f64,
    /// Grid intervals on which `L + 3 stderr < log K` held at both ends:
    /// certified delocalization within the scan resolution.
    pub witness: IntervalUnion,
    pub grid: Vec<GridEstimate>,
}

/// Estimates `L` on every grid energy and integrates by the trapezoid rule.
///
/// Every grid point gets its own pool (fresh sub-stream, free-fixed-point
/// seed, annealed burn-in), so the per-point errors are independent and the
/// integral error adds in quadrature with the trapezoid weights.
pub fn integrated_l(
    model: &ModelSpec,
    eta: f64,
    energies: &[f64],
    pool_schedule: PoolSchedule,
    estimator_schedule: EstimatorSchedule,
    base: &RngStream,
) -> Result<IntegratedL, EstimateError> {
    if energies.len() < 2 {
        return Err(EstimateError::GridTooSmall);
    }
    let grid_base = base.derive(GRID_STREAM_TAG);
    let threshold = delocalization_threshold(model.k);
    let mut grid = Vec::with_capacity(energies.len());
    for (i, &e) in energies.iter().enumerate() {
        let stream = grid_base.derive(i as u64);
        let point = SpectralPoint::new(e, eta);
        let pool = equilibrated_pool(model, point, pool_schedule, &stream)?;
        let estimate = estimate_l(&pool, estimator_schedule, &stream)?;
        grid.push(GridEstimate { e, estimate });
    }
    let mut value = 0.0;
    for pair in grid.windows(2) {
        let h = pair[1].e - pair[0].e;
        value += 0.5 * h * (pair[0].estimate.mean + pair[1].estimate.mean);
    }
    let mut var = 0.0;
    for (i, point) in grid.iter().enumerate() {
        let left = if i > 0 { grid[i - 1].e } else { grid[0].e };
        let right = if i + 1 < grid.len() {
            grid[i + 1].e
        } else {
            grid[grid.len() - 1].e
        };
        let weight = 0.5 * (right - left);
        var += (weight * point.estimate.stderr).powi(2);
    }
    let witness = IntervalUnion::new(
        grid.windows(2)
            .filter(|pair| {
                pair.iter().all(|p| {
                    p.estimate.mean + 3.0 * p.estimate.stderr < threshold
                })
            })
            .map(|pair| (pair[0].e, pair[1].e))
            .collect(),
    );
    Ok(IntegratedL {
        value,
        stderr: var.sqrt(),
        witness,
        grid,
    })
}

/// Locates the energy where the estimated `L` crosses `log K` by bisection.
///
/// Each evaluation equilibrates a fresh pool at the probe energy; the
/// endpoints must bracket a sign change of `L - log K`.
pub fn find_threshold_crossing(
    model: &ModelSpec,
    eta: f64,
    pool_schedule: PoolSchedule,
    estimator_schedule: EstimatorSchedule,
    mut lo: f64,
    mut hi: f64,
    e_tolerance: f64,
    base: &RngStream,
) -> Result<f64, EstimateError> {
    let threshold = delocalization_threshold(model.k);
    let scan_base = base.derive(GRID_STREAM_TAG);
    let mut eval_counter = 0u64;
    let eval = |e: f64, counter: &mut u64| -> Result<f64, EstimateError> {
        let stream = scan_base.derive(*counter);
        *counter += 1;
        let point = SpectralPoint::new(e, eta);
        let pool = equilibrated_pool(model, point, pool_schedule, &stream)?;
        Ok(estimate_l(&pool, estimator_schedule, &stream)?.mean - threshold)
    };
    let mut f_lo = eval(lo, &mut eval_counter)?;
    let mut f_hi = eval(hi, &mut eval_counter)?;
    if f_lo.signum() == f_hi.signum() {
        return Err(EstimateError::NoSignChange { lo, hi, f_lo, f_hi });
    }
    while hi - lo > e_tolerance {
        let mid = 0.5 * (lo + hi);
        let f_mid = eval(mid, &mut eval_counter)?;
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
            f_hi = f_mid;
        }
    }
    let _ = (f_lo, f_hi);
    Ok(0.5 * (lo + hi))
}
