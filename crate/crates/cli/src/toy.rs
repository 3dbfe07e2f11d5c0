//! The two-state toy system: four inference paths that must agree, and the
//! decay of an initial-state mismatch.

use essm::conv::{conv_direct, conv_fft, project_input, system_kernel};
use essm::linalg::{real_part, CMatrix, CVector};
use essm::ssm::{
    diagonalize, discretize_zoh, discretize_zoh_full, recurrent_scan_diagonal, recurrent_scan_full,
    ContinuousFull,
};
use nalgebra::{DMatrix, DVector};

use crate::{Check, Command, Report, Result, RunConfig, Table};

pub const TOY_DELTA: f64 = 0.005;
pub const TOY_STEPS: usize = 2000;
pub const EQUIVALENCE_TOL: f64 = 1e-8;
pub const CONV_FFT_TOL: f64 = 1e-10;
pub const CONVERGENCE_TOL: f64 = 0.01;
pub const WINDOW: usize = 100;

pub fn toy_system() -> ContinuousFull {
    ContinuousFull::new(
        DMatrix::from_row_slice(2, 2, &[-0.2, 1.0, -1.0, -3.0]),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::zeros(2, 2),
    )
    .expect("toy matrices are consistent")
}

/// `u_k = [sin t_k, cos 2 t_k]` with `t_k = k Δ`.
pub fn toy_input(len: usize, dt: f64) -> DMatrix<f64> {
    DMatrix::from_fn(len, 2, |k, j| {
        let t = k as f64 * dt;
        if j == 0 {
            t.sin()
        } else {
            (2.0 * t).cos()
        }
    })
}

/// Outputs of the four inference paths, each `L x 2`.
#[derive(Debug, Clone)]
pub struct ToyOutputs {
    pub recurrent: DMatrix<f64>,
    pub diagonal: DMatrix<f64>,
    pub direct: DMatrix<f64>,
    pub fft: DMatrix<f64>,
}

impl ToyOutputs {
    pub fn all(&self) -> [&DMatrix<f64>; 4] {
        [&self.recurrent, &self.diagonal, &self.direct, &self.fft]
    }

    pub fn max_pairwise_deviation(&self) -> f64 {
        let all = self.all();
        let mut worst = 0.0f64;
        for i in 0..4 {
            for j in i + 1..4 {
                worst = worst.max((all[i] - all[j]).amax());
            }
        }
        worst
    }
}

pub fn toy_outputs(len: usize, dt: f64) -> Result<ToyOutputs> {
    let sys = toy_system();
    let u = toy_input(len, dt);
    let recurrent = recurrent_scan_full(&discretize_zoh_full(&sys, dt)?, &u, None)?.outputs;

    let diag = diagonalize(&sys)?;
    let disc = discretize_zoh(&diag.lambda, &diag.b_prime, &DVector::from_element(2, dt))?;
    let diagonal = recurrent_scan_diagonal(&disc, &diag.c_prime, &sys.d, &u, None)?.outputs;

    let kernel = system_kernel(&disc.lambda_bar, len)?;
    let pin = project_input(&disc.b_bar, &u)?;
    let readout = |x: CMatrix| real_part(&(x * diag.c_prime.transpose())) + &u * sys.d.transpose();
    let direct = readout(conv_direct(&kernel, &pin)?);
    let fft = readout(conv_fft(&kernel, &pin)?);
    Ok(ToyOutputs {
        recurrent,
        diagonal,
        direct,
        fft,
    })
}

pub fn run_toy_equivalence(cfg: &RunConfig) -> Result<Report> {
    let out = toy_outputs(TOY_STEPS, TOY_DELTA)?;
    let mut table = Table::new(&[
        "step", "time", "y1_rec", "y2_rec", "y1_diag", "y2_diag", "y1_conv", "y2_conv", "y1_fft",
        "y2_fft",
    ]);
    for k in 0..TOY_STEPS {
        let mut row = vec![k.into(), (k as f64 * TOY_DELTA).into()];
        for y in out.all() {
            row.push(y[(k, 0)].into());
            row.push(y[(k, 1)].into());
        }
        table.push(row);
    }
    let mut report = Report::new(Command::ToyEquivalence, cfg.seed, table)
        .size("L", TOY_STEPS)
        .size("N", 2)
        .size("H", 2)
        .size("M", 2);
    report.checks.push(Check::at_most(
        "max pairwise deviation",
        out.max_pairwise_deviation(),
        EQUIVALENCE_TOL,
    ));
    report.checks.push(Check::at_most(
        "direct vs fft convolution",
        (&out.direct - &out.fft).amax(),
        CONV_FFT_TOL,
    ));
    Ok(report)
}

/// Absolute state error per step between the true system started at
/// `x0_true` and a convolutional estimate that assumes `x0_assumed`.
/// Row 0 is the initial mismatch; row `k` follows the `k`-th input.
pub fn convergence_errors(
    x0_true: [f64; 2],
    x0_assumed: [f64; 2],
    len: usize,
    dt: f64,
) -> Result<DMatrix<f64>> {
    let sys = toy_system();
    let u = toy_input(len, dt);
    let x0 = DVector::from_row_slice(&x0_true);
    let truth = recurrent_scan_full(&discretize_zoh_full(&sys, dt)?, &u, Some(&x0))?.states;

    let diag = diagonalize(&sys)?;
    let disc = discretize_zoh(&diag.lambda, &diag.b_prime, &DVector::from_element(2, dt))?;
    let kernel = system_kernel(&disc.lambda_bar, len)?;
    let forced = conv_fft(&kernel, &project_input(&disc.b_bar, &u)?)?;
    // free response of the assumed initial state, in modal coordinates
    let z0 = &diag.t_inv * CVector::from_fn(2, |i, _| x0_assumed[i].into());
    let mut modal = CMatrix::zeros(len + 1, 2);
    modal.row_mut(0).tr_copy_from(&z0);
    for k in 1..=len {
        for i in 0..2 {
            modal[(k, i)] = forced[(k - 1, i)] + disc.lambda_bar[i].powu(k as u32) * z0[i];
        }
    }
    let estimate = real_part(&(modal * diag.t.transpose()));

    let mut err = DMatrix::zeros(len + 1, 2);
    for i in 0..2 {
        err[(0, i)] = (x0_true[i] - estimate[(0, i)]).abs();
        for k in 1..=len {
            err[(k, i)] = (truth[(k - 1, i)] - estimate[(k, i)]).abs();
        }
    }
    Ok(err)
}

/// Maximum over each complete window of `width` consecutive rows.
pub fn windowed_max(err: &DMatrix<f64>, width: usize) -> Vec<f64> {
    (0..err.nrows() / width)
        .map(|w| err.rows(w * width, width).amax())
        .collect()
}

pub fn run_convergence(cfg: &RunConfig) -> Result<Report> {
    let err = convergence_errors([1.0, 0.0], [0.0, 0.0], TOY_STEPS, TOY_DELTA)?;
    let mut table = Table::new(&["step", "time", "err_state1", "err_state2"]);
    for k in 0..err.nrows() {
        table.push(vec![
            k.into(),
            (k as f64 * TOY_DELTA).into(),
            err[(k, 0)].into(),
            err[(k, 1)].into(),
        ]);
    }
    let windows = windowed_max(&err, WINDOW);
    let worst_ratio = windows
        .windows(2)
        .map(|w| w[1] / w[0])
        .fold(0.0f64, f64::max);
    let mut report = Report::new(Command::Convergence, cfg.seed, table)
        .size("L", TOY_STEPS)
        .size("N", 2);
    report.checks.push(Check::at_most(
        "state error at t=10",
        err.row(TOY_STEPS).amax(),
        CONVERGENCE_TOL,
    ));
    report.checks.push(Check::holds(
        "windowed max strictly decreasing",
        worst_ratio < 1.0,
    ));
    Ok(report)
}
