//! HiPPO-LegS normal matrix and the initial values of every eSSM parameter.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{EssmError, Result};
use crate::linalg::{self, CMatrix, CVector};

pub const DEFAULT_DELTA_RANGE: (f64, f64) = (0.001, 0.1);

/// Normal part of the HiPPO-LegS matrix: `-1/2` on the diagonal, skew-symmetric
/// off-diagonal entries of magnitude `sqrt((n+1/2)(k+1/2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct HippoNormal {
    pub dim: usize,
    pub entries: DMatrix<f64>,
}

impl HippoNormal {
    /// The skew-symmetric off-diagonal part, `entries + I/2`.
    pub fn skew_part(&self) -> DMatrix<f64> {
        &self.entries + DMatrix::identity(self.dim, self.dim) * 0.5
    }
}

pub fn hippo_normal_matrix(n: usize) -> Result<HippoNormal> {
    if n == 0 {
        return Err(EssmError::InvalidDimension(
            "HiPPO dimension must be >= 1".into(),
        ));
    }
    let entries = DMatrix::from_fn(n, n, |row, col| {
        let mag = ((row as f64 + 0.5) * (col as f64 + 0.5)).sqrt();
        match row.cmp(&col) {
            std::cmp::Ordering::Equal => -0.5,
            std::cmp::Ordering::Greater => -mag,
            std::cmp::Ordering::Less => mag,
        }
    });
    Ok(HippoNormal { dim: n, entries })
}

/// Eigenvalues of the HiPPO normal matrix (ascending imaginary part, then real
/// part) with the matching unit-norm eigenvectors as columns.
pub fn hippo_eigen_init(n: usize) -> Result<(CVector, CMatrix)> {
    let hippo = hippo_normal_matrix(n)?;
    linalg::eig_shifted_skew(-0.5, &hippo.skew_part())
}

/// Uniform step sizes on `[lo, hi]`.
pub fn init_delta(n: usize, lo: f64, hi: f64, seed: u64) -> Result<DVector<f64>> {
    if !(lo > 0.0) || !(lo <= hi) || !hi.is_finite() {
        return Err(EssmError::InvalidRange(format!(
            "need 0 < lo <= hi, got lo={lo}, hi={hi}"
        )));
    }
    if lo == hi {
        return Ok(DVector::from_element(n, lo));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist =
        Uniform::new_inclusive(lo, hi).map_err(|e| EssmError::InvalidRange(e.to_string()))?;
    Ok(DVector::from_fn(n, |_, _| dist.sample(&mut rng)))
}

/// Samples `N(0, std^2)` conditioned on `|x| <= 2 std`.
fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("std is positive and finite");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

fn check_unitary(v: &CMatrix) -> Result<()> {
    let n = v.nrows();
    let gram = v.adjoint() * v;
    let err = linalg::max_abs_c(&(gram - CMatrix::identity(n, n)));
    if err > 1e-8 {
        return Err(EssmError::InvalidState(format!(
            "eigenvector basis is not unitary (deviation {err:.3e})"
        )));
    }
    Ok(())
}

/// Initial input and output projections.
///
/// `B` is a random real matrix (std `1/sqrt(H)`) expressed in the eigenvector
/// basis, `V^* R`, then projected to its real part. `C` is truncated normal
/// with std `1/sqrt(N)`, cut at two standard deviations.
pub fn init_projections(
    n: usize,
    h: usize,
    m: usize,
    eigvecs: &CMatrix,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if n == 0 || h == 0 || m == 0 {
        return Err(EssmError::InvalidShape("sizes must be positive".into()));
    }
    if eigvecs.nrows() != n || eigvecs.ncols() != n {
        return Err(crate::error::shape_err(
            "eigenvector matrix",
            (n, n),
            eigvecs.shape(),
        ));
    }
    check_unitary(eigvecs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b_dist = Normal::new(0.0, 1.0 / (h as f64).sqrt()).expect("valid std");
    let raw = DMatrix::from_fn(n, h, |_, _| Complex64::new(b_dist.sample(&mut rng), 0.0));
    let b_init = linalg::real_part(&(eigvecs.adjoint() * raw));
    let c_std = 1.0 / (n as f64).sqrt();
    let c_init = DMatrix::from_fn(m, n, |_, _| truncated_normal(&mut rng, c_std));
    Ok((b_init, c_init))
}

/// Every initial value needed by one eSSM head.
#[derive(Debug, Clone)]
pub struct InitBundle {
    pub lambda_init: CVector,
    pub eigvecs: CMatrix,
    pub b_init: DMatrix<f64>,
    pub c_init: DMatrix<f64>,
    pub d_init: DVector<f64>,
    pub delta_init: DVector<f64>,
}

pub fn init_bundle(
    n: usize,
    h: usize,
    m: usize,
    delta_range: (f64, f64),
    seed: u64,
) -> Result<InitBundle> {
    let (lambda_init, eigvecs) = hippo_eigen_init(n)?;
    let (b_init, c_init) = init_projections(n, h, m, &eigvecs, seed)?;
    let delta_init = init_delta(
        n,
        delta_range.0,
        delta_range.1,
        seed.wrapping_add(0x9e37_79b9),
    )?;
    Ok(InitBundle {
        lambda_init,
        eigvecs,
        b_init,
        c_init,
        d_init: DVector::from_element(m.min(h), 1.0),
        delta_init,
    })
}
