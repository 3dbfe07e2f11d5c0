//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{linalg::Schur, linalg::SymmetricEigen, DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{EssmError, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

const MAX_ITER: usize = 10_000;

pub fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|x| Complex64::new(x, 0.0))
}

pub fn real_part(m: &CMatrix) -> DMatrix<f64> {
    m.map(|z| z.re)
}

/// Orders eigenpairs by ascending imaginary part, ties broken by real part.
pub fn sort_eigenpairs(values: &CVector, vectors: &CMatrix) -> (CVector, CMatrix) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (values[a], values[b]);
        x.im.total_cmp(&y.im).then(x.re.total_cmp(&y.re))
    });
    let vals = CVector::from_iterator(idx.len(), idx.iter().map(|&i| values[i]));
    let mut vecs = CMatrix::zeros(vectors.nrows(), idx.len());
    for (dst, &src) in idx.iter().enumerate() {
        vecs.set_column(dst, &vectors.column(src));
    }
    (vals, vecs)
}

/// Eigendecomposition of `scale * I + skew` for a real skew-symmetric `skew`.
///
/// `i * skew` is Hermitian, so the eigenvectors come out exactly unitary.
pub fn eig_shifted_skew(scale: f64, skew: &DMatrix<f64>) -> Result<(CVector, CMatrix)> {
    let herm = skew.map(|x| Complex64::new(0.0, x));
    let eig = SymmetricEigen::try_new(herm, f64::EPSILON, MAX_ITER).ok_or_else(|| {
        EssmError::NumericFailure("hermitian eigensolver did not converge".into())
    })?;
    // i*S v = mu v  =>  S v = -i mu v
    let values = eig.eigenvalues.map(|mu| Complex64::new(scale, -mu));
    Ok(sort_eigenpairs(&values, &eig.eigenvectors))
}

/// Eigenvalues and unit-norm eigenvectors of a general real square matrix.
pub fn eig_general(a: &DMatrix<f64>) -> Result<(CVector, CMatrix)> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(EssmError::InvalidShape(format!(
            "eigendecomposition needs a non-empty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let schur = Schur::try_new(a.clone(), f64::EPSILON, MAX_ITER)
        .ok_or_else(|| EssmError::NumericFailure("Schur iteration did not converge".into()))?;
    let values = schur.complex_eigenvalues();
    let ac = to_complex(a);
    let mut vectors = CMatrix::zeros(n, n);
    for (j, &lam) in values.iter().enumerate() {
        let v = null_vector(&ac, lam)?;
        vectors.set_column(j, &v);
    }
    Ok(sort_eigenpairs(&values, &vectors))
}

fn null_vector(a: &CMatrix, lam: Complex64) -> Result<CVector> {
    let n = a.nrows();
    let shifted = a - CMatrix::identity(n, n) * lam;
    let svd = shifted
        .try_svd(false, true, f64::EPSILON, MAX_ITER)
        .ok_or_else(|| EssmError::NumericFailure("SVD did not converge".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| EssmError::NumericFailure("SVD returned no right vectors".into()))?;
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut v = v_t.row(k).transpose().map(|z| z.conj());
    let norm = v.norm();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(EssmError::NumericFailure("degenerate eigenvector".into()));
    }
    v /= Complex64::new(norm, 0.0);
    // fix the phase so the largest component is real and positive
    let (imax, _) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
        .unwrap();
    let phase = v[imax] / v[imax].norm();
    v /= phase;
    Ok(v)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_c(m: &CMatrix) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

/// `‖a - b‖∞ / max(‖b‖∞, floor)` over all entries.
pub fn rel_linf(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = max_abs(&(a - b));
    diff / max_abs(b).max(f64::MIN_POSITIVE)
}

pub fn rel_linf_c(a: &CMatrix, b: &CMatrix) -> f64 {
    let diff = max_abs_c(&(a - b));
    diff / max_abs_c(b).max(f64::MIN_POSITIVE)
}
