//! Dense complex linear algebra on small blocks.
//!
//! Everything in the recursions works on `W x W` blocks with `W <= 8`, so the
//! kernels here are deliberately simple: LU with partial pivoting for
//! inversion, and a cyclic Jacobi sweep for Hermitian eigenproblems.  At these
//! sizes Jacobi is both fast and bitwise deterministic, which the rest of the
//! crate relies on (the selected top eigenvector must not depend on libm
//! quirks of a black-box solver).

use num_complex::Complex64;
use thiserror::Error;

/// Relative pivot threshold below which LU elimination reports a singular
/// matrix.
pub const SINGULAR_PIVOT_RELATIVE_EPSILON: f64 = 1.0e-14;

/// Convergence threshold for the cyclic Jacobi sweep: the sweep stops once the
/// off-diagonal Frobenius mass drops below this factor times the scale of the
/// matrix (max of |trace| and Frobenius norm).
pub const JACOBI_OFFDIAG_RELATIVE_TOLERANCE: f64 = 1.0e-14;

/// Maximum number of Jacobi sweeps; at `W <= 8` convergence takes well under
/// ten sweeps, the cap only guards against a logic error looping forever.
const JACOBI_MAX_SWEEPS: usize = 128;

/// Relative deviation from `M = M*` above which eigenvector extraction
/// refuses the input.
pub const HERMITIAN_DEVIATION_TOLERANCE: f64 = 1.0e-8;

/// Eigenvalues within this relative distance of the largest one are treated
/// as tied when selecting the top eigenvector.
pub const EIGENVALUE_TIE_RELATIVE_TOLERANCE: f64 = 1.0e-10;

/// Orthonormality tolerance for projector bases.
pub const PROJECTOR_ORTHONORMALITY_TOLERANCE: f64 = 1.0e-12;

/// Residual-norm threshold for accepting a complement basis vector during
/// Gram-Schmidt; anything smaller is considered inside the span.
const COMPLEMENT_RESIDUAL_THRESHOLD: f64 = 1.0e-8;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is numerically singular (pivot {pivot_index} has magnitude {pivot_magnitude:.3e}, threshold {threshold:.3e})")]
    SingularMatrix {
        pivot_index: usize,
        pivot_magnitude: f64,
        threshold: f64,
    },
    #[error("matrix deviates from Hermitian symmetry by {deviation:.3e} relative to norm {norm:.3e}")]
    NotHermitian { deviation: f64, norm: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("projector basis is not orthonormal (worst Gram deviation {deviation:.3e})")]
    NotOrthonormal { deviation: f64 },
    #[error("cannot build a projector direction from a zero vector")]
    ZeroVector,
    #[error("complement of the projector range is rank deficient")]
    SingularComplement,
    #[error("coordinate index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
}

/// Dense square complex matrix in row-major order.
///
/// The type is used both for the `W x W` blocks of the recursions and for the
/// moderately sized matrices assembled by the dense oracle, so no hard cap is
/// baked in here.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexBlock {
    dim: usize,
    data: Vec<Complex64>,
}

impl ComplexBlock {
    pub fn zeros(dim: usize) -> Self {
        ComplexBlock {
            dim,
            data: vec![Complex64::new(0.0, 0.0); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = ComplexBlock::zeros(dim);
        for i in 0..dim {
            m.set(i, i, Complex64::new(1.0, 0.0));
        }
        m
    }

    pub fn from_rows(rows: &[Vec<Complex64>]) -> Self {
        let dim = rows.len();
        let mut m = ComplexBlock::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), dim, "row {i} has wrong length");
            for (j, v) in row.iter().enumerate() {
                m.set(i, j, *v);
            }
        }
        m
    }

    /// Matrix from a flat row-major entry vector of length `dim * dim`.
    pub fn from_entries(dim: usize, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), dim * dim, "entry count must equal dim^2");
        ComplexBlock { dim, data }
    }

    /// Diagonal matrix with the given complex entries.
    pub fn diagonal(entries: &[Complex64]) -> Self {
        let mut m = ComplexBlock::zeros(entries.len());
        for (i, v) in entries.iter().enumerate() {
            m.set(i, i, *v);
        }
        m
    }

    /// `z * I`.
    pub fn scalar(dim: usize, z: Complex64) -> Self {
        let mut m = ComplexBlock::zeros(dim);
        for i in 0..dim {
            m.set(i, i, z);
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        self.data[i * self.dim + j] = v;
    }

    #[inline]
    pub fn entries(&self) -> &[Complex64] {
        &self.data
    }

    pub fn add(&self, other: &ComplexBlock) -> ComplexBlock {
        assert_eq!(self.dim, other.dim);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        ComplexBlock { dim: self.dim, data }
    }

    pub fn sub(&self, other: &ComplexBlock) -> ComplexBlock {
        assert_eq!(self.dim, other.dim);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        ComplexBlock { dim: self.dim, data }
    }

    pub fn add_assign(&mut self, other: &ComplexBlock) {
        assert_eq!(self.dim, other.dim);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: Complex64) -> ComplexBlock {
        let data = self.data.iter().map(|a| a * s).collect();
        ComplexBlock { dim: self.dim, data }
    }

    /// Matrix product `self * other`.
    pub fn mul(&self, other: &ComplexBlock) -> ComplexBlock {
        assert_eq!(self.dim, other.dim);
        let n = self.dim;
        let mut out = ComplexBlock::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.at(i, k);
                if a == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..n {
                    let v = out.at(i, j) + a * other.at(k, j);
                    out.set(i, j, v);
                }
            }
        }
        out
    }

    /// Conjugate transpose `M*`.
    pub fn adjoint(&self) -> ComplexBlock {
        let n = self.dim;
        let mut out = ComplexBlock::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, self.at(j, i).conj());
            }
        }
        out
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.dim).map(|i| self.at(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Matrix-vector product `M v`.
    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(v.len(), self.dim);
        let n = self.dim;
        let mut out = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..n {
                acc += self.at(i, j) * v[j];
            }
            out[i] = acc;
        }
        out
    }
}

/// Real symmetric `W x W` matrix (vertex potentials and the base operator A).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RealSymBlock {
    dim: usize,
    data: Vec<f64>,
}

impl RealSymBlock {
    pub fn zeros(dim: usize) -> Self {
        RealSymBlock {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn diagonal(entries: &[f64]) -> Self {
        let mut m = RealSymBlock::zeros(entries.len());
        for (i, v) in entries.iter().enumerate() {
            m.set(i, i, *v);
        }
        m
    }

    /// Builds a symmetric matrix from arbitrary square data by averaging with
    /// its transpose.
    pub fn symmetrized(dim: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), dim * dim);
        let mut m = RealSymBlock::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m.set(i, j, 0.5 * (data[i * dim + j] + data[j * dim + i]));
            }
        }
        m
    }

    /// Builds from entries that are already symmetric; debug-asserts symmetry.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.len();
        let mut m = RealSymBlock::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), dim);
            for (j, v) in row.iter().enumerate() {
                m.data[i * dim + j] = *v;
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                debug_assert!(
                    (m.at(i, j) - m.at(j, i)).abs() <= 1.0e-12 * m.max_abs_entry().max(1.0),
                    "input rows are not symmetric"
                );
            }
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn add(&self, other: &RealSymBlock) -> RealSymBlock {
        assert_eq!(self.dim, other.dim);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        RealSymBlock { dim: self.dim, data }
    }

    pub fn scale(&self, s: f64) -> RealSymBlock {
        let data = self.data.iter().map(|a| a * s).collect();
        RealSymBlock { dim: self.dim, data }
    }

    pub fn to_complex(&self) -> ComplexBlock {
        let data = self
            .data
            .iter()
            .map(|v| Complex64::new(*v, 0.0))
            .collect();
        ComplexBlock {
            dim: self.dim,
            data,
        }
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let (mut vals, _) = hermitian_eigen(&self.to_complex());
        vals.sort_by(|a, b| a.partial_cmp(b).expect("eigenvalues are finite"));
        vals
    }

    pub fn is_diagonal(&self) -> bool {
        for i in 0..self.dim {
            for j in 0..self.dim {
                if i != j && self.at(i, j) != 0.0 {
                    return false;
                }
            }
        }
        true
    }
}

/// Inner product `<u, v> = sum_i u_i conj(v_i)` (linear in the first slot).
pub fn inner(u: &[Complex64], v: &[Complex64]) -> Complex64 {
    assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b.conj()).sum()
}

pub fn vector_norm(v: &[Complex64]) -> f64 {
    v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
}

/// Quadratic form `<M v, w> = w* M v`.
pub fn quad_form(m: &ComplexBlock, v: &[Complex64], w: &[Complex64]) -> Complex64 {
    inner(&m.apply(v), w)
}

/// Inverts a square complex matrix by LU elimination with partial pivoting.
///
/// A pivot whose magnitude falls below `SINGULAR_PIVOT_RELATIVE_EPSILON`
/// times the largest entry of the input is reported as singular; on the
/// recursion path (`Im z > 0`) this cannot trigger because the inverted
/// matrices have a definite skew part.
pub fn invert_block(m: &ComplexBlock) -> Result<ComplexBlock, LinalgError> {
    let n = m.dim;
    if n == 0 {
        return Ok(m.clone());
    }
    let threshold = SINGULAR_PIVOT_RELATIVE_EPSILON * m.max_abs_entry().max(f64::MIN_POSITIVE);
    // Augmented elimination: `work` carries the matrix, `out` the identity.
    let mut work = m.data.clone();
    let mut out = ComplexBlock::identity(n);
    for col in 0..n {
        // Partial pivoting: pick the largest magnitude in this column.
        let mut pivot_row = col;
        let mut pivot_mag = work[col * n + col].norm();
        for row in (col + 1)..n {
            let mag = work[row * n + col].norm();
            if mag > pivot_mag {
                pivot_mag = mag;
                pivot_row = row;
            }
        }
        if pivot_mag < threshold {
            return Err(LinalgError::SingularMatrix {
                pivot_index: col,
                pivot_magnitude: pivot_mag,
                threshold,
            });
        }
        if pivot_row != col {
            for j in 0..n {
                work.swap(col * n + j, pivot_row * n + j);
            }
            for j in 0..n {
                let a = out.at(col, j);
                let b = out.at(pivot_row, j);
                out.set(col, j, b);
                out.set(pivot_row, j, a);
            }
        }
        let pivot = work[col * n + col];
        let inv_pivot = Complex64::new(1.0, 0.0) / pivot;
        for j in 0..n {
            work[col * n + j] *= inv_pivot;
        }
        for j in 0..n {
            let v = out.at(col, j) * inv_pivot;
            out.set(col, j, v);
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = work[row * n + col];
            if factor == Complex64::new(0.0, 0.0) {
                continue;
            }
            for j in 0..n {
                let v = work[row * n + j] - factor * work[col * n + j];
                work[row * n + j] = v;
            }
            for j in 0..n {
                let v = out.at(row, j) - factor * out.at(col, j);
                out.set(row, j, v);
            }
        }
    }
    Ok(out)
}

/// Eigendecomposition of a Hermitian matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvector `k` stored as
/// column `k`; the pairing follows the Jacobi diagonal order (unsorted),
/// which is deterministic for identical input bits.  The caller is expected
/// to pass a Hermitian matrix; only the lower/upper averaged part is used.
pub fn hermitian_eigen(m: &ComplexBlock) -> (Vec<f64>, ComplexBlock) {
    let n = m.dim;
    // Work on the Hermitian average so floating ties cannot break symmetry.
    let mut a = ComplexBlock::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let v = 0.5 * (m.at(i, j) + m.at(j, i).conj());
            a.set(i, j, v);
        }
    }
    let mut vectors = ComplexBlock::identity(n);
    let scale = a.frobenius_norm().max(a.trace().norm());
    if scale == 0.0 {
        return (vec![0.0; n], vectors);
    }
    let tol = JACOBI_OFFDIAG_RELATIVE_TOLERANCE * scale;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.at(p, q).norm_sqr();
            }
        }
        if (2.0 * off).sqrt() < tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.at(p, q);
                let mag = apq.norm();
                if mag == 0.0 {
                    continue;
                }
                let phase = apq / mag; // e^{i phi}
                let app = a.at(p, p).re;
                let aqq = a.at(q, q).re;
                // Rotation angle for the real 2x2 [[app, mag], [mag, aqq]]:
                // zeroing the rotated off-diagonal needs
                // mag (1 - t^2) + t (aqq - app) = 0, whose small root is
                // t = -sign(theta) / (|theta| + sqrt(theta^2 + 1)).
                let theta = (aqq - app) / (2.0 * mag);
                let t = if theta >= 0.0 {
                    -1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Unitary plane rotation U: columns p,q mix with the phase of
                // a_pq folded in so the rotated (p,q) entry vanishes.
                let s_phase = s * phase; // acts as s * e^{i phi}
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a.at(k, p);
                    let akq = a.at(k, q);
                    let new_kp = c * akp + s_phase.conj() * akq;
                    let new_kq = -s_phase * akp + c * akq;
                    a.set(k, p, new_kp);
                    a.set(k, q, new_kq);
                    a.set(p, k, new_kp.conj());
                    a.set(q, k, new_kq.conj());
                }
                let new_pp = app * c * c + aqq * s * s + 2.0 * c * s * mag;
                let new_qq = app * s * s + aqq * c * c - 2.0 * c * s * mag;
                a.set(p, p, Complex64::new(new_pp, 0.0));
                a.set(q, q, Complex64::new(new_qq, 0.0));
                a.set(p, q, Complex64::new(0.0, 0.0));
                a.set(q, p, Complex64::new(0.0, 0.0));
                for k in 0..n {
                    let vkp = vectors.at(k, p);
                    let vkq = vectors.at(k, q);
                    vectors.set(k, p, c * vkp + s_phase.conj() * vkq);
                    vectors.set(k, q, -s_phase * vkp + c * vkq);
                }
            }
        }
    }
    let values = (0..n).map(|i| a.at(i, i).re).collect();
    (values, vectors)
}

/// Largest singular value of `M`, computed as `sqrt(lambda_max(M* M))`.
pub fn operator_norm(m: &ComplexBlock) -> f64 {
    let gram = m.adjoint().mul(m);
    let (values, _) = hermitian_eigen(&gram);
    let lambda_max = values.iter().fold(0.0_f64, |acc, v| acc.max(*v));
    lambda_max.max(0.0).sqrt()
}

/// Smallest eigenvalue of a Hermitian matrix (used for positivity checks).
pub fn min_hermitian_eigenvalue(m: &ComplexBlock) -> f64 {
    let (values, _) = hermitian_eigen(m);
    values.iter().fold(f64::INFINITY, |acc, v| acc.min(*v))
}

/// Skew (Herglotz) part `(M - M*) / 2i`; Hermitian by construction.
pub fn skew_part(m: &ComplexBlock) -> ComplexBlock {
    let n = m.dim;
    let mut out = ComplexBlock::zeros(n);
    let half_over_i = Complex64::new(0.0, -0.5); // 1 / (2i)
    for i in 0..n {
        for j in 0..n {
            let v = (m.at(i, j) - m.at(j, i).conj()) * half_over_i;
            out.set(i, j, v);
        }
    }
    out
}

/// Top eigenvalue and a deterministically chosen unit eigenvector of a
/// Hermitian matrix.
///
/// Among eigenvalues within `EIGENVALUE_TIE_RELATIVE_TOLERANCE` (relative) of
/// the maximum, the eigenvector whose largest-magnitude coordinate has the
/// lowest index wins, and its phase is fixed so that coordinate is real
/// positive.  Identical input bits therefore always produce identical output
/// bits.
pub fn w_max_vector(m: &ComplexBlock) -> Result<(f64, Vec<Complex64>), LinalgError> {
    let norm = operator_norm(m);
    let deviation = operator_norm(&m.sub(&m.adjoint()));
    if deviation > HERMITIAN_DEVIATION_TOLERANCE * norm.max(f64::MIN_POSITIVE) {
        return Err(LinalgError::NotHermitian { deviation, norm });
    }
    let n = m.dim;
    let (values, vectors) = hermitian_eigen(m);
    let lambda_max = values.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
    let tie_width = EIGENVALUE_TIE_RELATIVE_TOLERANCE * lambda_max.abs().max(f64::MIN_POSITIVE);
    // Candidates tied with the top eigenvalue, in Jacobi output order.
    let mut best: Option<(usize, usize)> = None; // (anchor coordinate, column)
    for col in 0..n {
        if lambda_max - values[col] > tie_width {
            continue;
        }
        let mut anchor = 0;
        let mut anchor_mag = 0.0;
        for row in 0..n {
            let mag = vectors.at(row, col).norm();
            if mag > anchor_mag {
                anchor_mag = mag;
                anchor = row;
            }
        }
        match best {
            None => best = Some((anchor, col)),
            Some((best_anchor, _)) if anchor < best_anchor => best = Some((anchor, col)),
            _ => {}
        }
    }
    let (anchor, col) = best.expect("a Hermitian matrix has at least one eigenvalue");
    let mut v: Vec<Complex64> = (0..n).map(|row| vectors.at(row, col)).collect();
    let anchor_value = v[anchor];
    let anchor_mag = anchor_value.norm();
    if anchor_mag > 0.0 {
        let phase = anchor_value.conj() / anchor_mag;
        for entry in v.iter_mut() {
            *entry *= phase;
        }
    }
    let nrm = vector_norm(&v);
    if nrm > 0.0 {
        for entry in v.iter_mut() {
            *entry /= nrm;
        }
    }
    // The anchor coordinate is real positive up to rounding; make it exact.
    v[anchor] = Complex64::new(v[anchor].re.abs(), 0.0);
    Ok((lambda_max, v))
}

/// Orthogonal projector described by an orthonormal basis of its range.
#[derive(Clone, Debug)]
pub struct Projector {
    dim: usize,
    basis: Vec<Vec<Complex64>>,
}

impl Projector {
    /// Projector onto the span of the given coordinate directions.
    pub fn from_coordinates(dim: usize, indices: &[usize]) -> Result<Self, LinalgError> {
        let mut basis = Vec::with_capacity(indices.len());
        let mut seen = vec![false; dim];
        for &idx in indices {
            if idx >= dim {
                return Err(LinalgError::IndexOutOfRange { index: idx, dim });
            }
            if seen[idx] {
                return Err(LinalgError::NotOrthonormal { deviation: 1.0 });
            }
            seen[idx] = true;
            let mut v = vec![Complex64::new(0.0, 0.0); dim];
            v[idx] = Complex64::new(1.0, 0.0);
            basis.push(v);
        }
        Ok(Projector { dim, basis })
    }

    /// Rank-one projector onto the direction of `v` (normalized internally).
    pub fn from_vector(v: &[Complex64]) -> Result<Self, LinalgError> {
        let nrm = vector_norm(v);
        if nrm < 1.0e-300 {
            return Err(LinalgError::ZeroVector);
        }
        let unit = v.iter().map(|a| a / nrm).collect();
        Ok(Projector {
            dim: v.len(),
            basis: vec![unit],
        })
    }

    /// General constructor; verifies orthonormality of the supplied basis.
    pub fn from_basis(dim: usize, basis: Vec<Vec<Complex64>>) -> Result<Self, LinalgError> {
        let mut worst = 0.0_f64;
        for (i, u) in basis.iter().enumerate() {
            if u.len() != dim {
                return Err(LinalgError::DimensionMismatch {
                    left: u.len(),
                    right: dim,
                });
            }
            for (j, v) in basis.iter().enumerate() {
                let g = inner(u, v);
                let target = if i == j {
                    Complex64::new(1.0, 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                worst = worst.max((g - target).norm());
            }
        }
        if worst > PROJECTOR_ORTHONORMALITY_TOLERANCE {
            return Err(LinalgError::NotOrthonormal { deviation: worst });
        }
        Ok(Projector { dim, basis })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[Vec<Complex64>] {
        &self.basis
    }

    /// The projector as a `dim x dim` matrix `sum_k b_k b_k*`.
    pub fn matrix(&self) -> ComplexBlock {
        let mut p = ComplexBlock::zeros(self.dim);
        for b in &self.basis {
            for i in 0..self.dim {
                for j in 0..self.dim {
                    let v = p.at(i, j) + b[i] * b[j].conj();
                    p.set(i, j, v);
                }
            }
        }
        p
    }

    /// Deterministic orthonormal basis of the orthogonal complement, built by
    /// Gram-Schmidt over the standard basis in coordinate order.
    pub fn complement_basis(&self) -> Result<Vec<Vec<Complex64>>, LinalgError> {
        let want = self.dim - self.rank();
        let mut complement: Vec<Vec<Complex64>> = Vec::with_capacity(want);
        for coord in 0..self.dim {
            if complement.len() == want {
                break;
            }
            let mut v = vec![Complex64::new(0.0, 0.0); self.dim];
            v[coord] = Complex64::new(1.0, 0.0);
            for b in self.basis.iter().chain(complement.iter()) {
                let overlap = inner(&v, b);
                for (x, bx) in v.iter_mut().zip(b) {
                    *x -= overlap * bx;
                }
            }
            let nrm = vector_norm(&v);
            if nrm > COMPLEMENT_RESIDUAL_THRESHOLD {
                for x in v.iter_mut() {
                    *x /= nrm;
                }
                complement.push(v);
            }
        }
        if complement.len() != want {
            return Err(LinalgError::SingularComplement);
        }
        Ok(complement)
    }
}

/// Compression `B* T B` of `t` to the span of `basis` (entries in basis
/// coordinates).
pub fn compress(t: &ComplexBlock, basis: &[Vec<Complex64>]) -> ComplexBlock {
    let r = basis.len();
    let mut out = ComplexBlock::zeros(r);
    for (j, bj) in basis.iter().enumerate() {
        let tbj = t.apply(bj);
        for (i, bi) in basis.iter().enumerate() {
            out.set(i, j, inner(&tbj, bi));
        }
    }
    out
}

/// Cross compression `B* T C` for two bases, returned row-major as a flat
/// matrix of shape `B.len() x C.len()`.
fn cross_compress(t: &ComplexBlock, rows: &[Vec<Complex64>], cols: &[Vec<Complex64>]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); rows.len() * cols.len()];
    for (j, cj) in cols.iter().enumerate() {
        let tcj = t.apply(cj);
        for (i, ri) in rows.iter().enumerate() {
            out[i * cols.len() + j] = inner(&tcj, ri);
        }
    }
    out
}

/// Restriction of `T^{-1}` to the range of `P`, computed without forming the
/// full inverse:
///
/// `P T^{-1} P = (P T P - P T Q (Q T Q)^{-1} Q T P)^{-1}` on `range(P)`,
///
/// with `Q = 1 - P`.  The result is expressed in the coordinates of the
/// projector's basis (an `r x r` block for a rank-`r` projector).
pub fn schur_restricted_inverse(
    t: &ComplexBlock,
    p: &Projector,
) -> Result<ComplexBlock, LinalgError> {
    if t.dim() != p.dim() {
        return Err(LinalgError::DimensionMismatch {
            left: t.dim(),
            right: p.dim(),
        });
    }
    let r = p.rank();
    if r == p.dim() {
        let tpp = compress(t, p.basis());
        return invert_block(&tpp);
    }
    let complement = p.complement_basis()?;
    let c = complement.len();
    let tpp = compress(t, p.basis());
    let tqq = compress(t, &complement);
    let tpq = cross_compress(t, p.basis(), &complement); // r x c
    let tqp = cross_compress(t, &complement, p.basis()); // c x r
    let tqq_inv = invert_block(&tqq)?;
    // correction = TPQ * TQQ^{-1} * TQP, an r x r block.
    let mut tqq_inv_tqp = vec![Complex64::new(0.0, 0.0); c * r];
    for i in 0..c {
        for j in 0..r {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..c {
                acc += tqq_inv.at(i, k) * tqp[k * r + j];
            }
            tqq_inv_tqp[i * r + j] = acc;
        }
    }
    let mut schur = tpp.clone();
    for i in 0..r {
        for j in 0..r {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..c {
                acc += tpq[i * c + k] * tqq_inv_tqp[k * r + j];
            }
            schur.set(i, j, schur.at(i, j) - acc);
        }
    }
    invert_block(&schur)
}
