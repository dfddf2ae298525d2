//! Random-potential ensembles and the model description.
//!
//! A model on the Bethe strip is a branching number `K`, a strip width `W`,
//! a real symmetric base operator `A`, a disorder ensemble for the vertex
//! potentials `V(x)`, and a coupling `lambda`; the vertex potential entering
//! the recursions is `U(x) = A + lambda V(x)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{ComplexBlock, Projector, RealSymBlock};
use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("branching number must be at least 2, got {k}")]
    BranchingTooSmall { k: usize },
    #[error("strip width must be between 1 and {max}, got {w}")]
    WidthOutOfRange { w: usize, max: usize },
    #[error("base operator has dimension {a_dim} but the strip width is {w}")]
    BaseOperatorMismatch { a_dim: usize, w: usize },
    #[error("ensemble {ensemble} requires strip width {required}, got {w}")]
    EnsembleWidthMismatch {
        ensemble: &'static str,
        required: usize,
        w: usize,
    },
    #[error("coupling must be non-negative and finite, got {lambda}")]
    BadCoupling { lambda: f64 },
}

/// Upper guard on the strip width; the dense kernels assume small blocks.
pub const MAX_STRIP_WIDTH: usize = 32;

/// Disorder law for the vertex potential `V(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EnsembleSpec {
    /// Gaussian orthogonal ensemble: `V = (M + M^T)/2` with `M` filled by
    /// i.i.d. standard normals, so diagonal entries have variance 1 and
    /// off-diagonal entries variance 1/2.
    Goe,
    /// Scalar Cauchy disorder (width 1 only) with the given scale.
    ScalarCauchy { scale: f64 },
    /// Independent diagonal entries with a common scalar law.
    DiagIid { law: DiagLaw },
}

/// Scalar law for `DiagIid`; the default is the standard normal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DiagLaw {
    StandardNormal,
    Uniform { half_width: f64 },
}

impl EnsembleSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EnsembleSpec::Goe => "goe",
            EnsembleSpec::ScalarCauchy { .. } => "cauchy",
            EnsembleSpec::DiagIid { .. } => "diag",
        }
    }
}

/// Full model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub k: usize,
    pub w: usize,
    pub a: RealSymBlock,
    pub ensemble: EnsembleSpec,
    pub lambda: f64,
}

impl ModelSpec {
    pub fn new(
        k: usize,
        w: usize,
        a: RealSymBlock,
        ensemble: EnsembleSpec,
        lambda: f64,
    ) -> Result<Self, ModelError> {
        let model = ModelSpec {
            k,
            w,
            a,
            ensemble,
            lambda,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.k < 2 {
            return Err(ModelError::BranchingTooSmall { k: self.k });
        }
        if self.w == 0 || self.w > MAX_STRIP_WIDTH {
            return Err(ModelError::WidthOutOfRange {
                w: self.w,
                max: MAX_STRIP_WIDTH,
            });
        }
        if self.a.dim() != self.w {
            return Err(ModelError::BaseOperatorMismatch {
                a_dim: self.a.dim(),
                w: self.w,
            });
        }
        if let EnsembleSpec::ScalarCauchy { .. } = self.ensemble {
            if self.w != 1 {
                return Err(ModelError::EnsembleWidthMismatch {
                    ensemble: "cauchy",
                    required: 1,
                    w: self.w,
                });
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(ModelError::BadCoupling {
                lambda: self.lambda,
            });
        }
        Ok(())
    }

    /// Convenience constructor for the scalar free model (`W = 1`, `A = 0`).
    pub fn scalar_goe(k: usize, lambda: f64) -> ModelSpec {
        ModelSpec::new(k, 1, RealSymBlock::zeros(1), EnsembleSpec::Goe, lambda)
            .expect("scalar model is always valid")
    }

    /// Eigenvalues of the base operator, ascending.
    pub fn base_eigenvalues(&self) -> Vec<f64> {
        self.a.eigenvalues()
    }
}

/// One GOE sample of the given width: `V = (M + M^T)/2`, `M` i.i.d. standard
/// normal, drawn row-major from the stream.
pub fn sample_goe(w: usize, stream: &mut RngStream) -> RealSymBlock {
    let mut raw = vec![0.0_f64; w * w];
    for entry in raw.iter_mut() {
        *entry = stream.normal();
    }
    RealSymBlock::symmetrized(w, &raw)
}

/// One sample of the disorder matrix `V(x)` for the model's ensemble.
pub fn sample_disorder(model: &ModelSpec, stream: &mut RngStream) -> RealSymBlock {
    match &model.ensemble {
        EnsembleSpec::Goe => sample_goe(model.w, stream),
        EnsembleSpec::ScalarCauchy { scale } => {
            RealSymBlock::diagonal(&[stream.cauchy(*scale)])
        }
        EnsembleSpec::DiagIid { law } => {
            let entries: Vec<f64> = (0..model.w)
                .map(|_| match law {
                    DiagLaw::StandardNormal => stream.normal(),
                    DiagLaw::Uniform { half_width } => {
                        (stream.uniform() * 2.0 - 1.0) * half_width
                    }
                })
                .collect();
            RealSymBlock::diagonal(&entries)
        }
    }
}

/// One sample of the full vertex potential `U(x) = A + lambda V(x)`.
pub fn sample_potential(model: &ModelSpec, stream: &mut RngStream) -> RealSymBlock {
    if model.lambda == 0.0 {
        // Keep the draw count identical to the disordered case so that
        // downstream streams are unaffected by the coupling value.
        let _ = sample_disorder(model, stream);
        return model.a.clone();
    }
    model.a.add(&sample_disorder(model, stream).scale(model.lambda))
}

/// The four projected pieces `(PVP, PVQ, QVP, QVQ)` of a disorder sample,
/// returned as full `W x W` operators so that they sum back to `V` exactly.
pub fn projected_blocks(
    v: &RealSymBlock,
    p: &Projector,
) -> (ComplexBlock, ComplexBlock, ComplexBlock, ComplexBlock) {
    let pm = p.matrix();
    let vm = v.to_complex();
    let n = v.dim();
    let id = ComplexBlock::identity(n);
    let qm = id.sub(&pm);
    let pvp = pm.mul(&vm).mul(&pm);
    let pvq = pm.mul(&vm).mul(&qm);
    let qvp = qm.mul(&vm).mul(&pm);
    let qvq = qm.mul(&vm).mul(&qm);
    (pvp, pvq, qvp, qvq)
}

/// Sample mean and variance (unbiased) of a slice.
pub fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Pearson correlation of two equally long slices.
pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    cov / (vx * vy).sqrt().max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{operator_norm, quad_form};
    use num_complex::Complex64;

    fn goe_model(k: usize, w: usize, lambda: f64) -> ModelSpec {
        ModelSpec::new(k, w, RealSymBlock::zeros(w), EnsembleSpec::Goe, lambda).unwrap()
    }

    #[test]
    fn goe_sampling_is_deterministic_per_stream() {
        let root = RngStream::from_seed(11);
        let a = sample_goe(3, &mut root.derive(4));
        let b = sample_goe(3, &mut root.derive(4));
        assert_eq!(a, b);
        let c = sample_goe(3, &mut root.derive(5));
        assert_ne!(a, c);
    }

    #[test]
    fn goe_entry_moments_match_the_law() {
        let n = 100_000;
        let mut stream = RngStream::from_seed(2024);
        let mut diag = Vec::with_capacity(n);
        let mut off = Vec::with_capacity(n);
        for _ in 0..n {
            let v = sample_goe(2, &mut stream);
            diag.push(v.at(0, 0));
            off.push(v.at(0, 1));
        }
        let (mean_d, var_d) = mean_and_variance(&diag);
        let (mean_o, var_o) = mean_and_variance(&off);
        assert!(mean_d.abs() < 0.02, "diag mean {mean_d}");
        assert!(mean_o.abs() < 0.02, "offdiag mean {mean_o}");
        assert!((0.97..=1.03).contains(&var_d), "diag variance {var_d}");
        assert!((0.485..=0.515).contains(&var_o), "offdiag variance {var_o}");
    }

    #[test]
    fn goe_statistics_are_orthogonally_invariant() {
        // Rotate by a fixed orthogonal matrix and compare entry moments
        // against 3-sigma CLT bands.
        let n = 50_000;
        let theta = 0.7_f64;
        let (c, s) = (theta.cos(), theta.sin());
        let mut stream = RngStream::from_seed(500);
        let mut rot_diag = Vec::with_capacity(n);
        let mut rot_off = Vec::with_capacity(n);
        for _ in 0..n {
            let v = sample_goe(2, &mut stream);
            // O V O^T entries for O = [[c, -s], [s, c]].
            let r00 = c * c * v.at(0, 0) - 2.0 * c * s * v.at(0, 1) + s * s * v.at(1, 1);
            let r01 = c * s * (v.at(0, 0) - v.at(1, 1)) + (c * c - s * s) * v.at(0, 1);
            rot_diag.push(r00);
            rot_off.push(r01);
        }
        let (mean_d, var_d) = mean_and_variance(&rot_diag);
        let (mean_o, var_o) = mean_and_variance(&rot_off);
        let nf = n as f64;
        assert!(mean_d.abs() < 3.0 / nf.sqrt());
        assert!(mean_o.abs() < 3.0 * (0.5_f64).sqrt() / nf.sqrt());
        assert!((var_d - 1.0).abs() < 3.0 * (2.0 / nf).sqrt() + 0.005, "var {var_d}");
        assert!((var_o - 0.5).abs() < 3.0 * 0.5 * (2.0 / nf).sqrt() + 0.005, "var {var_o}");
    }

    #[test]
    fn zero_coupling_returns_the_base_operator_exactly() {
        let a = RealSymBlock::diagonal(&[0.0, 4.0]);
        let model = ModelSpec::new(2, 2, a.clone(), EnsembleSpec::Goe, 0.0).unwrap();
        let mut stream = RngStream::from_seed(1);
        for _ in 0..10 {
            assert_eq!(sample_potential(&model, &mut stream), a);
        }
    }

    #[test]
    fn cauchy_disorder_has_median_near_zero() {
        let model = ModelSpec::new(
            2,
            1,
            RealSymBlock::zeros(1),
            EnsembleSpec::ScalarCauchy { scale: 1.0 },
            1.0,
        )
        .unwrap();
        let mut stream = RngStream::from_seed(77);
        let n = 40_000;
        let below = (0..n)
            .filter(|_| sample_potential(&model, &mut stream).at(0, 0) < 0.0)
            .count();
        let frac = below as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "fraction below zero {frac}");
    }

    #[test]
    fn cauchy_requires_width_one() {
        let err = ModelSpec::new(
            2,
            2,
            RealSymBlock::zeros(2),
            EnsembleSpec::ScalarCauchy { scale: 1.0 },
            1.0,
        )
        .unwrap_err();
        match err {
            ModelError::EnsembleWidthMismatch { .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn projected_blocks_reassemble_exactly() {
        let mut stream = RngStream::from_seed(9);
        let v = sample_goe(4, &mut stream);
        let p = Projector::from_coordinates(4, &[0, 2]).unwrap();
        let (pvp, pvq, qvp, qvq) = projected_blocks(&v, &p);
        let sum = pvp.add(&pvq).add(&qvp).add(&qvq);
        let diff = sum.sub(&v.to_complex());
        assert!(operator_norm(&diff) < 1.0e-12);
    }

    #[test]
    fn coordinate_projection_picks_out_entries() {
        let v = RealSymBlock::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![2.0, 4.0, 5.0],
            vec![3.0, 5.0, 6.0],
        ]);
        let p = Projector::from_coordinates(3, &[0]).unwrap();
        let (pvp, pvq, _, qvq) = projected_blocks(&v, &p);
        assert!((pvp.at(0, 0) - Complex64::new(1.0, 0.0)).norm() < 1.0e-14);
        assert!(pvp.at(1, 1).norm() < 1.0e-14);
        assert!((pvq.at(0, 1) - Complex64::new(2.0, 0.0)).norm() < 1.0e-14);
        assert!((qvq.at(1, 1) - Complex64::new(4.0, 0.0)).norm() < 1.0e-14);
        assert!(qvq.at(0, 0).norm() < 1.0e-14);
    }

    #[test]
    fn goe_projected_diagonal_block_is_independent_of_the_rest() {
        // For GOE the compression onto a fixed direction is independent of
        // the complementary blocks; with 1e5 samples the empirical
        // correlations must sit inside +-0.02.
        let n = 100_000;
        let mut stream = RngStream::from_seed(31);
        let w = 3;
        let sqrt2inv = 1.0 / 2.0_f64.sqrt();
        let u: Vec<Complex64> = vec![
            Complex64::new(sqrt2inv, 0.0),
            Complex64::new(sqrt2inv, 0.0),
            Complex64::new(0.0, 0.0),
        ];
        let p = Projector::from_vector(&u).unwrap();
        let complement = p.complement_basis().unwrap();
        let mut pvp_samples = Vec::with_capacity(n);
        let mut pvq_samples = Vec::with_capacity(n);
        let mut qvq_samples = Vec::with_capacity(n);
        for _ in 0..n {
            let v = sample_goe(w, &mut stream).to_complex();
            let uu = quad_form(&v, &u, &u).re;
            let uq = quad_form(&v, &complement[0], &u).re;
            let qq = quad_form(&v, &complement[0], &complement[0]).re;
            pvp_samples.push(uu);
            pvq_samples.push(uq);
            qvq_samples.push(qq);
        }
        let c1 = correlation(&pvp_samples, &pvq_samples);
        let c2 = correlation(&pvp_samples, &qvq_samples);
        assert!(c1.abs() < 0.02, "corr(PVP, PVQ) = {c1}");
        assert!(c2.abs() < 0.02, "corr(PVP, QVQ) = {c2}");
    }

    #[test]
    fn model_validation_rejects_bad_parameters() {
        assert!(ModelSpec::new(1, 1, RealSymBlock::zeros(1), EnsembleSpec::Goe, 1.0).is_err());
        assert!(ModelSpec::new(2, 2, RealSymBlock::zeros(1), EnsembleSpec::Goe, 1.0).is_err());
        assert!(ModelSpec::new(2, 1, RealSymBlock::zeros(1), EnsembleSpec::Goe, -1.0).is_err());
        assert!(goe_model(2, 2, 0.5).validate().is_ok());
    }
}
