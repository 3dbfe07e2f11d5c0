//! Continuous and discrete state-space systems, discretization, recurrent
//! simulation and diagonalization.

use nalgebra::{DMatrix, DVector, Scalar};
use num_complex::Complex64;

use crate::error::{shape_err, EssmError, Result};
use crate::linalg::{self, CMatrix, CVector};

/// Eigenvalue magnitude below which the ZOH input gain uses its series limit.
pub const ZOH_SMALL_LAMBDA: f64 = 1e-12;

/// `x' = A x + B u`, `y = C x + D u` with a dense real system matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousFull {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl ContinuousFull {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(shape_err("A", (n, n), a.shape()));
        }
        if b.nrows() != n {
            return Err(shape_err("B", (n, b.ncols()), b.shape()));
        }
        if c.ncols() != n {
            return Err(shape_err("C", (c.nrows(), n), c.shape()));
        }
        if d.shape() != (c.nrows(), b.ncols()) {
            return Err(shape_err("D", (c.nrows(), b.ncols()), d.shape()));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }
}

/// Discrete-time counterpart of [`ContinuousFull`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteFull {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

/// One eSSM head in continuous time: diagonal complex `Λ`, real `B`, `C`,
/// diagonal `D` on the leading `min(M, H)` channels, per-state step sizes `Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalSystem {
    pub lambda: CVector,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub delta: DVector<f64>,
}

impl DiagonalSystem {
    pub fn new(
        lambda: CVector,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DVector<f64>,
        delta: DVector<f64>,
    ) -> Result<Self> {
        let sys = Self {
            lambda,
            b,
            c,
            d,
            delta,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.lambda.len();
        if n == 0 {
            return Err(EssmError::InvalidShape(
                "state dimension must be >= 1".into(),
            ));
        }
        if self.b.nrows() != n {
            return Err(shape_err("B", (n, self.b.ncols()), self.b.shape()));
        }
        if self.c.ncols() != n {
            return Err(shape_err("C", (self.c.nrows(), n), self.c.shape()));
        }
        let k = self.c.nrows().min(self.b.ncols());
        if self.d.len() != k {
            return Err(EssmError::InvalidShape(format!(
                "D: expected {k} diagonal entries, got {}",
                self.d.len()
            )));
        }
        if self.delta.len() != n {
            return Err(EssmError::InvalidShape(format!(
                "delta: expected {n} entries, got {}",
                self.delta.len()
            )));
        }
        if let Some(bad) = self.delta.iter().find(|&&x| !(x > 0.0)) {
            return Err(EssmError::InvalidStep(format!(
                "delta must be positive, got {bad}"
            )));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.lambda.len()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// The diagonal `D` as a dense `M x H` matrix.
    pub fn feedthrough(&self) -> DMatrix<f64> {
        diag_feedthrough(&self.d, self.output_dim(), self.input_dim())
    }

    pub fn discretize(&self) -> Result<DiscreteDiagonal> {
        discretize_zoh(&self.lambda, &linalg::to_complex(&self.b), &self.delta)
    }
}

/// Dense `m x h` matrix with `d` on its leading diagonal.
pub fn diag_feedthrough(d: &DVector<f64>, m: usize, h: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m, h);
    for (i, &v) in d.iter().enumerate().take(m.min(h)) {
        out[(i, i)] = v;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Discretization {
    Zoh,
    /// Generalized bilinear transform; 0 forward Euler, 1/2 Tustin, 1 backward Euler.
    Gbt(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDiagonal {
    pub lambda_bar: CVector,
    pub b_bar: CMatrix,
    pub method: Discretization,
}

/// Elementwise trajectory of a scan: row `k` of `states` is `x_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory<T: Scalar> {
    pub states: DMatrix<T>,
    pub outputs: DMatrix<f64>,
}

/// Zero-order hold for a diagonal system with per-state step sizes.
///
/// `Λ̄ = exp(ΛΔ)`, `B̄ = Λ⁻¹(exp(ΛΔ) - I) B`, with `B̄ = Δ B` when `|λ|` is
/// below [`ZOH_SMALL_LAMBDA`].
pub fn discretize_zoh(
    lambda: &CVector,
    b: &CMatrix,
    delta: &DVector<f64>,
) -> Result<DiscreteDiagonal> {
    let n = lambda.len();
    if delta.len() != n {
        return Err(EssmError::InvalidShape(format!(
            "delta has {} entries for {n} states",
            delta.len()
        )));
    }
    if b.nrows() != n {
        return Err(shape_err("B", (n, b.ncols()), b.shape()));
    }
    if let Some(bad) = delta.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
        return Err(EssmError::InvalidStep(format!(
            "delta must be positive, got {bad}"
        )));
    }
    let mut lambda_bar = CVector::zeros(n);
    let mut b_bar = b.clone();
    for i in 0..n {
        let (lam, dt) = (lambda[i], delta[i]);
        let e = (lam * dt).exp();
        lambda_bar[i] = e;
        let gain = zoh_gain(lam, dt);
        b_bar.row_mut(i).iter_mut().for_each(|z| *z *= gain);
    }
    Ok(DiscreteDiagonal {
        lambda_bar,
        b_bar,
        method: Discretization::Zoh,
    })
}

/// `(exp(λΔ) - 1) / λ`, continuous through `λ = 0`.
pub fn zoh_gain(lam: Complex64, dt: f64) -> Complex64 {
    if lam.norm() < ZOH_SMALL_LAMBDA {
        Complex64::new(dt, 0.0)
    } else {
        ((lam * dt).exp() - 1.0) / lam
    }
}

/// Zero-order hold of a dense system through the augmented exponential
/// `exp([[A, B], [0, 0]] Δ) = [[Ā, B̄], [0, I]]`, which needs no inverse of `A`.
pub fn discretize_zoh_full(sys: &ContinuousFull, delta: f64) -> Result<DiscreteFull> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(EssmError::InvalidStep(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let (n, h) = (sys.state_dim(), sys.input_dim());
    let mut aug = DMatrix::zeros(n + h, n + h);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&sys.a * delta));
    aug.view_mut((0, n), (n, h)).copy_from(&(&sys.b * delta));
    let e = aug.exp();
    if e.iter().any(|x| !x.is_finite()) {
        return Err(EssmError::NumericFailure(
            "matrix exponential overflowed".into(),
        ));
    }
    Ok(DiscreteFull {
        a_bar: e.view((0, 0), (n, n)).into_owned(),
        b_bar: e.view((0, n), (n, h)).into_owned(),
        c: sys.c.clone(),
        d: sys.d.clone(),
    })
}

/// Generalized bilinear transform:
/// `Ā = (I - αΔA)⁻¹ (I + (1-α)ΔA)`, `B̄ = (I - αΔA)⁻¹ Δ B`.
pub fn discretize_gbt(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    delta: f64,
    alpha: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(shape_err("A", (n, n), a.shape()));
    }
    if b.nrows() != n {
        return Err(shape_err("B", (n, b.ncols()), b.shape()));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(EssmError::InvalidStep(format!(
            "delta must be positive, got {delta}"
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EssmError::InvalidRange(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let lhs = &eye - a * (alpha * delta);
    let lu = lhs.lu();
    let singular = || EssmError::SingularMatrix("I - alpha*delta*A is singular".into());
    let a_bar = lu
        .solve(&(&eye + a * ((1.0 - alpha) * delta)))
        .ok_or_else(singular)?;
    let b_bar = lu.solve(&(b * delta)).ok_or_else(singular)?;
    Ok((a_bar, b_bar))
}

pub fn discretize_gbt_full(sys: &ContinuousFull, delta: f64, alpha: f64) -> Result<DiscreteFull> {
    let (a_bar, b_bar) = discretize_gbt(&sys.a, &sys.b, delta, alpha)?;
    Ok(DiscreteFull {
        a_bar,
        b_bar,
        c: sys.c.clone(),
        d: sys.d.clone(),
    })
}

/// Reference recurrence with the dense transition matrix:
/// `x_k = Ā x_{k-1} + B̄ u_k`, `y_k = C x_k + D u_k`.
pub fn recurrent_scan_full(
    sys: &DiscreteFull,
    u: &DMatrix<f64>,
    x0: Option<&DVector<f64>>,
) -> Result<StateTrajectory<f64>> {
    let n = sys.a_bar.nrows();
    let (h, m) = (sys.b_bar.ncols(), sys.c.nrows());
    if sys.a_bar.ncols() != n
        || sys.b_bar.nrows() != n
        || sys.c.ncols() != n
        || sys.d.shape() != (m, h)
    {
        return Err(EssmError::InvalidShape(
            "inconsistent discrete system".into(),
        ));
    }
    if u.ncols() != h {
        return Err(shape_err("input", (u.nrows(), h), u.shape()));
    }
    let mut x = match x0 {
        Some(v) if v.len() != n => return Err(shape_err("x0", (n, 1), (v.len(), 1))),
        Some(v) => v.clone(),
        None => DVector::zeros(n),
    };
    let len = u.nrows();
    let mut states = DMatrix::zeros(len, n);
    let mut outputs = DMatrix::zeros(len, m);
    let mut next = DVector::zeros(n);
    let mut y = DVector::zeros(m);
    for k in 0..len {
        let uk = u.row(k).transpose();
        next.gemv(1.0, &sys.a_bar, &x, 0.0);
        next.gemv(1.0, &sys.b_bar, &uk, 1.0);
        std::mem::swap(&mut x, &mut next);
        y.gemv(1.0, &sys.c, &x, 0.0);
        y.gemv(1.0, &sys.d, &uk, 1.0);
        states.row_mut(k).tr_copy_from(&x);
        outputs.row_mut(k).tr_copy_from(&y);
    }
    Ok(StateTrajectory { states, outputs })
}

/// Diagonal recurrence, one independent complex mode per state:
/// `x_k[i] = λ̄_i x_{k-1}[i] + (B̄ u_k)[i]`, `y_k = Re(C x_k) + D u_k`.
pub fn recurrent_scan_diagonal(
    sys: &DiscreteDiagonal,
    c: &CMatrix,
    dmat: &DMatrix<f64>,
    u: &DMatrix<f64>,
    x0: Option<&CVector>,
) -> Result<StateTrajectory<Complex64>> {
    let n = sys.lambda_bar.len();
    let h = sys.b_bar.ncols();
    let m = c.nrows();
    if sys.b_bar.nrows() != n {
        return Err(shape_err("B̄", (n, h), sys.b_bar.shape()));
    }
    if c.ncols() != n {
        return Err(shape_err("C", (m, n), c.shape()));
    }
    if dmat.shape() != (m, h) {
        return Err(shape_err("D", (m, h), dmat.shape()));
    }
    if u.ncols() != h {
        return Err(shape_err("input", (u.nrows(), h), u.shape()));
    }
    let x = match x0 {
        Some(v) if v.len() != n => return Err(shape_err("x0", (n, 1), (v.len(), 1))),
        Some(v) => v.clone(),
        None => CVector::zeros(n),
    };
    // real and imaginary parts kept apart so every product is a real gemv
    let (b_re, b_im) = (sys.b_bar.map(|z| z.re), sys.b_bar.map(|z| z.im));
    let (c_re, c_im) = (c.map(|z| z.re), c.map(|z| z.im));
    let (lam_re, lam_im): (Vec<f64>, Vec<f64>) =
        sys.lambda_bar.iter().map(|z| (z.re, z.im)).unzip();
    let mut x_re = x.map(|z| z.re);
    let mut x_im = x.map(|z| z.im);
    let (mut bu_re, mut bu_im) = (DVector::zeros(n), DVector::zeros(n));
    let mut y = DVector::zeros(m);
    let len = u.nrows();
    let mut states = CMatrix::zeros(len, n);
    let mut outputs = DMatrix::zeros(len, m);
    for k in 0..len {
        let uk = u.row(k).transpose();
        bu_re.gemv(1.0, &b_re, &uk, 0.0);
        bu_im.gemv(1.0, &b_im, &uk, 0.0);
        for i in 0..n {
            let (re, im) = (x_re[i], x_im[i]);
            x_re[i] = lam_re[i] * re - lam_im[i] * im + bu_re[i];
            x_im[i] = lam_re[i] * im + lam_im[i] * re + bu_im[i];
        }
        y.gemv(1.0, &c_re, &x_re, 0.0);
        y.gemv(-1.0, &c_im, &x_im, 1.0);
        y.gemv(1.0, dmat, &uk, 1.0);
        for i in 0..n {
            states[(k, i)] = Complex64::new(x_re[i], x_im[i]);
        }
        outputs.row_mut(k).tr_copy_from(&y);
    }
    Ok(StateTrajectory { states, outputs })
}

/// Eigen-decomposition `A = T diag(λ) T⁻¹` with the transformed projections.
#[derive(Debug, Clone)]
pub struct DiagonalizationResult {
    pub lambda: CVector,
    pub t: CMatrix,
    pub t_inv: CMatrix,
    pub b_prime: CMatrix,
    pub c_prime: CMatrix,
}

impl DiagonalizationResult {
    /// `‖T diag(λ) T⁻¹ - A‖∞ / ‖A‖∞`.
    pub fn reconstruction_error(&self, a: &DMatrix<f64>) -> f64 {
        let recon = &self.t * CMatrix::from_diagonal(&self.lambda) * &self.t_inv;
        let scale = linalg::max_abs(a).max(f64::MIN_POSITIVE);
        linalg::max_abs_c(&(recon - linalg::to_complex(a))) / scale
    }
}

pub fn diagonalize(sys: &ContinuousFull) -> Result<DiagonalizationResult> {
    let a = &sys.a;
    let (lambda, t) = linalg::eig_general(a)?;
    let n = lambda.len();
    let scale = a.norm();
    let mut min_gap = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            min_gap = min_gap.min((lambda[i] - lambda[j]).norm());
        }
    }
    if n > 1 && !(min_gap > 1e-8 * scale) {
        return Err(EssmError::NonDiagonalizable(format!(
            "eigenvalue gap {min_gap:.3e} below 1e-8 * ‖A‖ = {:.3e}",
            1e-8 * scale
        )));
    }
    let t_inv = t
        .clone()
        .try_inverse()
        .ok_or_else(|| EssmError::NumericFailure("eigenvector matrix is singular".into()))?;
    let b_prime = &t_inv * linalg::to_complex(&sys.b);
    let c_prime = linalg::to_complex(&sys.c) * &t;
    Ok(DiagonalizationResult {
        lambda,
        t,
        t_inv,
        b_prime,
        c_prime,
    })
}
