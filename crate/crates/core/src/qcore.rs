//! Dense complex linear algebra and validated quantum objects.
//!
//! Operators are stored as column-major `nalgebra` matrices of `Complex64`.
//! Every constructor that produces a state or measurement checks its
//! physical invariants against a [`Tolerances`] set.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QError {
    #[error("matrix is not Hermitian (max |M - M^dagger| = {residual:.3e})")]
    NotHermitian { residual: f64 },
    #[error("eigenvalue {value:.3e} is below the PSD tolerance")]
    NegativeEigenvalue { value: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("POVM element {index} is not PSD (min eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { index: usize, min_eigenvalue: f64 },
    #[error("POVM elements do not sum to the identity (residual {residual:.3e})")]
    NotComplete { residual: f64 },
    #[error("state is not normalized (norm or trace {value:.12})")]
    NotNormalized { value: f64 },
    #[error("empty input")]
    Empty,
    #[error("non-finite entry")]
    NonFinite,
}

pub type QResult<T> = Result<T, QError>;

/// Numerical tolerances used by validity checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub norm: f64,
    pub herm: f64,
    pub psd: f64,
    pub num: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            norm: 1e-9,
            herm: 1e-9,
            psd: 1e-9,
            num: 1e-8,
        }
    }
}

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn identity(dim: usize) -> CMatrix {
    CMatrix::identity(dim, dim)
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

pub fn kron_vec(a: &CVector, b: &CVector) -> CVector {
    a.kronecker(b)
}

pub fn outer(v: &CVector) -> CMatrix {
    v * v.adjoint()
}

/// Largest absolute entry of a complex matrix.
pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

pub fn hermiticity_residual(m: &CMatrix) -> f64 {
    max_abs(&(m - m.adjoint()))
}

fn require_square(m: &CMatrix) -> QResult<usize> {
    if m.nrows() != m.ncols() {
        return Err(QError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

fn require_finite(m: &CMatrix) -> QResult<()> {
    if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(QError::NonFinite)
    }
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending.
///
/// The input is symmetrized first so tiny anti-Hermitian noise cannot leak
/// into the spectrum.
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let sym = (m + m.adjoint()).scale(0.5);
    let eig = sym.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(n, n, |r, k| eig.eigenvectors[(r, order[k])]);
    (values, vectors)
}

/// Positive square root of a PSD matrix.
///
/// Eigenvalues in `[-tol.psd, 0)` are clipped to zero.
pub fn psd_sqrt(m: &CMatrix, tol: &Tolerances) -> QResult<CMatrix> {
    require_square(m)?;
    require_finite(m)?;
    let residual = hermiticity_residual(m);
    if residual > tol.herm {
        return Err(QError::NotHermitian { residual });
    }
    let (values, vectors) = hermitian_eigen(m);
    if let Some(&lo) = values.first() {
        if lo < -tol.psd {
            return Err(QError::NegativeEigenvalue { value: lo });
        }
    }
    let n = values.len();
    // Eigenvalues at the roundoff level are exact zeros; their square roots
    // would otherwise be amplified to ~1e-8.
    let floor = 64.0 * f64::EPSILON * values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut scaled = vectors.clone();
    for (k, &v) in values.iter().enumerate() {
        let s = if v <= floor { 0.0 } else { v.sqrt() };
        for r in 0..n {
            scaled[(r, k)] *= s;
        }
    }
    let root = &scaled * vectors.adjoint();
    Ok((&root + root.adjoint()).scale(0.5))
}

/// Partial trace over the factors not listed in `keep`.
///
/// `dims` gives the factor dimensions in tensor order; the kept factors
/// stay in their original relative order.
pub fn partial_trace(m: &CMatrix, dims: &[usize], keep: &[usize]) -> QResult<CMatrix> {
    let n = require_square(m)?;
    let total: usize = dims.iter().product();
    if total != n {
        return Err(QError::DimensionMismatch {
            expected: total,
            found: n,
        });
    }
    if let Some(&bad) = keep.iter().find(|&&k| k >= dims.len()) {
        return Err(QError::DimensionMismatch {
            expected: dims.len(),
            found: bad,
        });
    }
    let mut kept: Vec<usize> = keep.to_vec();
    kept.sort_unstable();
    kept.dedup();
    let traced: Vec<usize> = (0..dims.len()).filter(|i| !kept.contains(i)).collect();
    let kept_dims: Vec<usize> = kept.iter().map(|&i| dims[i]).collect();
    let traced_dims: Vec<usize> = traced.iter().map(|&i| dims[i]).collect();
    let out_dim: usize = kept_dims.iter().product();
    let env_dim: usize = traced_dims.iter().product();

    let strides = strides_of(dims);
    let index_of = |kept_multi: &[usize], traced_multi: &[usize]| -> usize {
        let mut idx = 0;
        for (slot, &f) in kept.iter().enumerate() {
            idx += kept_multi[slot] * strides[f];
        }
        for (slot, &f) in traced.iter().enumerate() {
            idx += traced_multi[slot] * strides[f];
        }
        idx
    };

    let mut out = CMatrix::zeros(out_dim, out_dim);
    let kept_multis: Vec<Vec<usize>> = (0..out_dim).map(|i| unflatten(i, &kept_dims)).collect();
    for e in 0..env_dim {
        let em = unflatten(e, &traced_dims);
        let rows: Vec<usize> = kept_multis.iter().map(|km| index_of(km, &em)).collect();
        for (i, &ri) in rows.iter().enumerate() {
            for (j, &rj) in rows.iter().enumerate() {
                out[(i, j)] += m[(ri, rj)];
            }
        }
    }
    Ok(out)
}

pub(crate) fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    strides
}

/// Row-major multi-index of `flat` for the given factor dimensions.
pub(crate) fn unflatten(mut flat: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for i in (0..dims.len()).rev() {
        out[i] = flat % dims[i];
        flat /= dims[i];
    }
    out
}

/// Apply `op` to the factors `targets` of a tensor-product state vector.
///
/// `op` acts on the targets in the order given, with the first target as
/// the most significant index.
pub fn apply_on_factors(
    state: &CVector,
    dims: &[usize],
    targets: &[usize],
    op: &CMatrix,
) -> CVector {
    let sub_dims: Vec<usize> = targets.iter().map(|&t| dims[t]).collect();
    let sub: usize = sub_dims.iter().product();
    debug_assert_eq!(op.nrows(), sub);
    let strides = strides_of(dims);
    let rest: Vec<usize> = (0..dims.len()).filter(|i| !targets.contains(i)).collect();
    let rest_dims: Vec<usize> = rest.iter().map(|&i| dims[i]).collect();
    let rest_total: usize = rest_dims.iter().product();
    let sub_offsets: Vec<usize> = (0..sub)
        .map(|s| {
            unflatten(s, &sub_dims)
                .iter()
                .zip(targets)
                .map(|(&v, &t)| v * strides[t])
                .sum()
        })
        .collect();
    let mut out = CVector::zeros(state.len());
    let mut buf = CVector::zeros(sub);
    for r in 0..rest_total {
        let base: usize = unflatten(r, &rest_dims)
            .iter()
            .zip(&rest)
            .map(|(&v, &f)| v * strides[f])
            .sum();
        for (k, &off) in sub_offsets.iter().enumerate() {
            buf[k] = state[base + off];
        }
        let mapped = op * &buf;
        for (k, &off) in sub_offsets.iter().enumerate() {
            out[base + off] = mapped[k];
        }
    }
    out
}

/// A normalized pure state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amps: CVector,
}

impl StateVector {
    pub fn new(amps: CVector, tol: &Tolerances) -> QResult<Self> {
        if amps.is_empty() {
            return Err(QError::Empty);
        }
        let norm = amps.norm();
        if !norm.is_finite() {
            return Err(QError::NonFinite);
        }
        if (norm - 1.0).abs() > tol.norm {
            return Err(QError::NotNormalized { value: norm });
        }
        Ok(Self { amps })
    }

    /// Normalizes `amps` instead of rejecting it.
    pub fn normalized(amps: CVector) -> QResult<Self> {
        let norm = amps.norm();
        if amps.is_empty() {
            return Err(QError::Empty);
        }
        if !(norm.is_finite() && norm > 0.0) {
            return Err(QError::NotNormalized { value: norm });
        }
        Ok(Self {
            amps: amps.unscale(norm),
        })
    }

    pub fn basis(dim: usize, index: usize) -> Self {
        let mut amps = CVector::zeros(dim);
        amps[index] = c(1.0);
        Self { amps }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amps
    }

    pub fn projector(&self) -> CMatrix {
        outer(&self.amps)
    }

    pub fn density(&self) -> DensityOperator {
        DensityOperator {
            matrix: self.projector(),
        }
    }

    pub fn tensor(&self, other: &StateVector) -> StateVector {
        StateVector {
            amps: kron_vec(&self.amps, &other.amps),
        }
    }

    pub fn expectation(&self, op: &CMatrix) -> C64 {
        (self.amps.adjoint() * op * &self.amps)[(0, 0)]
    }
}

/// A validated density operator: Hermitian, PSD, unit trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    matrix: CMatrix,
}

impl DensityOperator {
    pub fn new(matrix: CMatrix, tol: &Tolerances) -> QResult<Self> {
        let n = require_square(&matrix)?;
        if n == 0 {
            return Err(QError::Empty);
        }
        require_finite(&matrix)?;
        let residual = hermiticity_residual(&matrix);
        if residual > tol.herm {
            return Err(QError::NotHermitian { residual });
        }
        let (values, _) = hermitian_eigen(&matrix);
        if values[0] < -tol.psd {
            return Err(QError::NegativeEigenvalue { value: values[0] });
        }
        let tr = matrix.trace().re;
        if (tr - 1.0).abs() > tol.norm {
            return Err(QError::NotNormalized { value: tr });
        }
        Ok(Self { matrix })
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            matrix: identity(dim).unscale(dim as f64),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    /// `tr(op · ρ)`, real part.
    pub fn expectation(&self, op: &CMatrix) -> f64 {
        (op * &self.matrix).trace().re
    }

    pub(crate) fn from_trusted(matrix: CMatrix) -> Self {
        Self { matrix }
    }
}

/// Purification `Σ_k √λ_k |v_k⟩|k⟩` over the support of `rho`.
///
/// The ancilla dimension equals the numerical rank of `rho` (eigenvalues
/// above `tol.psd`).
pub fn purify(rho: &DensityOperator, tol: &Tolerances) -> StateVector {
    let (values, vectors) = hermitian_eigen(rho.matrix());
    let support: Vec<usize> = (0..values.len()).filter(|&k| values[k] > tol.psd).collect();
    let dim = rho.dim();
    let anc = support.len().max(1);
    let mut amps = CVector::zeros(dim * anc);
    for (slot, &k) in support.iter().enumerate() {
        let w = values[k].sqrt();
        for s in 0..dim {
            amps[s * anc + slot] = vectors[(s, k)] * w;
        }
    }
    // Trace drift from clipping is renormalized away.
    StateVector::normalized(amps).expect("purification of a valid density operator")
}

/// A validated POVM.
#[derive(Debug, Clone, PartialEq)]
pub struct Povm {
    elements: Vec<CMatrix>,
    projective: bool,
}

impl Povm {
    pub fn outcomes(&self) -> usize {
        self.elements.len()
    }

    pub fn dim(&self) -> usize {
        self.elements[0].nrows()
    }

    pub fn elements(&self) -> &[CMatrix] {
        &self.elements
    }

    pub fn element(&self, outcome: usize) -> &CMatrix {
        &self.elements[outcome]
    }

    pub fn is_projective(&self) -> bool {
        self.projective
    }

    /// Probability vector `tr(M_b ρ)`.
    pub fn probabilities(&self, rho: &DensityOperator) -> Vec<f64> {
        self.elements.iter().map(|m| rho.expectation(m)).collect()
    }

    /// Rank-1 projective measurement onto an orthonormal basis.
    pub fn from_basis(basis: &[CVector], tol: &Tolerances) -> QResult<Self> {
        validate_povm(basis.iter().map(outer).collect(), tol)
    }

    /// `I_left ⊗ M_b` for every element.
    pub fn embed_right(&self, left_dim: usize) -> Povm {
        let id = identity(left_dim);
        Povm {
            elements: self.elements.iter().map(|m| kron(&id, m)).collect(),
            projective: self.projective,
        }
    }

    pub(crate) fn from_trusted(elements: Vec<CMatrix>, projective: bool) -> Self {
        Self {
            elements,
            projective,
        }
    }
}

/// Checks positivity and completeness; flags projectivity.
pub fn validate_povm(elements: Vec<CMatrix>, tol: &Tolerances) -> QResult<Povm> {
    let first = elements.first().ok_or(QError::Empty)?;
    let dim = require_square(first)?;
    let mut sum = CMatrix::zeros(dim, dim);
    let mut projective = true;
    for (index, m) in elements.iter().enumerate() {
        let n = require_square(m)?;
        if n != dim {
            return Err(QError::DimensionMismatch {
                expected: dim,
                found: n,
            });
        }
        require_finite(m)?;
        let residual = hermiticity_residual(m);
        if residual > tol.herm {
            return Err(QError::NotHermitian { residual });
        }
        let (values, _) = hermitian_eigen(m);
        if values[0] < -tol.psd {
            return Err(QError::NotPsd {
                index,
                min_eigenvalue: values[0],
            });
        }
        if max_abs(&(m * m - m)) > tol.herm {
            projective = false;
        }
        sum += m;
    }
    let residual = max_abs(&(sum - identity(dim)));
    if residual > tol.norm {
        return Err(QError::NotComplete { residual });
    }
    Ok(Povm {
        elements,
        projective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn diag(vals: &[f64]) -> CMatrix {
        CMatrix::from_diagonal(&CVector::from_iterator(
            vals.len(),
            vals.iter().map(|&v| c(v)),
        ))
    }

    fn weak_elements(eps: f64) -> Vec<CMatrix> {
        (0..3)
            .map(|l| {
                let mut m = identity(3).scale((1.0 - eps) / 3.0);
                m[(l, l)] += c(eps);
                m
            })
            .collect()
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let tol = Tolerances::default();
        let r = psd_sqrt(&identity(3), &tol).unwrap();
        assert!(max_abs(&(r - identity(3))) < 1e-12);
        let r = psd_sqrt(&diag(&[4.0, 1.0]), &tol).unwrap();
        assert!(max_abs(&(r - diag(&[2.0, 1.0]))) < 1e-12);
    }

    #[test]
    fn sqrt_of_weak_element_has_expected_spectrum() {
        let tol = Tolerances::default();
        let e = &weak_elements(0.7)[1];
        let r = psd_sqrt(e, &tol).unwrap();
        let (vals, _) = hermitian_eigen(&r);
        assert_relative_eq!(vals[0], 0.1f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(vals[1], 0.1f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(vals[2], 0.8f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn sqrt_rejects_bad_input() {
        let tol = Tolerances::default();
        let mut m = identity(2);
        m[(0, 1)] = c(0.5);
        assert!(matches!(
            psd_sqrt(&m, &tol),
            Err(QError::NotHermitian { .. })
        ));
        assert!(matches!(
            psd_sqrt(&diag(&[1.0, -0.1]), &tol),
            Err(QError::NegativeEigenvalue { .. })
        ));
        // tiny negative eigenvalue is clipped
        let r = psd_sqrt(&diag(&[1.0, -1e-12]), &tol).unwrap();
        assert_eq!(r[(1, 1)], c(0.0));
    }

    #[test]
    fn partial_trace_examples() {
        let s = 0.5f64.sqrt();
        let phi = CVector::from_vec(vec![c(s), c(0.0), c(0.0), c(s)]);
        let red = partial_trace(&outer(&phi), &[2, 2], &[0]).unwrap();
        assert!(max_abs(&(red - identity(2).scale(0.5))) < 1e-12);

        let rho = diag(&[0.3, 0.7]);
        let mut sigma = diag(&[0.2, 0.5, 0.3]);
        sigma[(0, 1)] = C64::new(0.1, 0.05);
        sigma[(1, 0)] = C64::new(0.1, -0.05);
        let red = partial_trace(&kron(&rho, &sigma), &[2, 3], &[0]).unwrap();
        assert!(max_abs(&(red - &rho)) < 1e-12);
        let red = partial_trace(&kron(&rho, &sigma), &[2, 3], &[1]).unwrap();
        assert!(max_abs(&(red - &sigma)) < 1e-12);

        let t = 1.0 / 3f64.sqrt();
        let mut mes = CVector::zeros(9);
        for j in 0..3 {
            mes[4 * j] = c(t);
        }
        let red = partial_trace(&outer(&mes), &[3, 3], &[1]).unwrap();
        assert!(max_abs(&(red - identity(3).unscale(3.0))) < 1e-12);
    }

    #[test]
    fn partial_trace_dimension_mismatch() {
        assert!(matches!(
            partial_trace(&identity(5), &[2, 2], &[0]),
            Err(QError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn purify_examples() {
        let tol = Tolerances::default();
        let pure = StateVector::basis(2, 0).density();
        let psi = purify(&pure, &tol);
        assert_eq!(psi.dim(), 2);
        assert_relative_eq!(psi.amplitudes()[0].norm(), 1.0, epsilon = 1e-12);

        let mixed = DensityOperator::maximally_mixed(3);
        let psi = purify(&mixed, &tol);
        assert_eq!(psi.dim(), 9);
        let red = partial_trace(&psi.projector(), &[3, 3], &[1]).unwrap();
        let (schmidt, _) = hermitian_eigen(&red);
        for v in schmidt {
            assert_relative_eq!(v.sqrt(), 1.0 / 3f64.sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn povm_validation() {
        let tol = Tolerances::default();
        let p = validate_povm(weak_elements(0.5), &tol).unwrap();
        assert!(!p.is_projective());
        let p = validate_povm(weak_elements(1.0), &tol).unwrap();
        assert!(p.is_projective());
        assert!(matches!(
            validate_povm(weak_elements(1.2), &tol),
            Err(QError::NotPsd { .. })
        ));
        let mut els = weak_elements(0.5);
        els.pop();
        assert!(matches!(
            validate_povm(els, &tol),
            Err(QError::NotComplete { .. })
        ));
        assert!(matches!(
            validate_povm(vec![identity(2), CMatrix::zeros(3, 3)], &tol),
            Err(QError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn apply_on_non_contiguous_factors() {
        // X on factors 0 and 2 of a 2x3x2 register equals the explicit kron.
        let x = CMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(1.0), c(0.0)]);
        let op = kron(&x, &x);
        let state = CVector::from_fn(12, |i, _| C64::new(i as f64, 0.5 * i as f64));
        let full = kron(&kron(&x, &identity(3)), &x);
        let expect = &full * &state;
        let got = apply_on_factors(&state, &[2, 3, 2], &[0, 2], &op);
        assert!((expect - got).norm() < 1e-12);
    }
}
