//! System kernel construction and state inference by convolution.
//!
//! For a diagonal discrete system the state sequence is
//! `x_k = Σ_{m=0..k} Λ̄^m (B̄u)_{k-m}`: the system kernel `V = (1, Λ̄, …, Λ̄^{L-1})`
//! convolved, column by column, with the projected input `B̄u`. Projecting
//! first turns the matrix-valued convolution into `N` independent scalar ones,
//! which the FFT evaluates in `O(N L log L)`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{shape_err, EssmError, Result};
use crate::fft::{next_pow2, ComplexConvPlan};
use crate::linalg::{CMatrix, CVector};

/// How the kernel enters the convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelMode {
    /// Exact complex kernel; reproduces the recurrent scan.
    Complex,
    /// Real part of the kernel only, as used inside the trainable layer.
    #[default]
    RealPart,
}

/// The system kernel `V` with `v[k][i] = λ̄_i^k`.
///
/// A bidirectional kernel holds `2L` rows: the forward kernel followed by its
/// time reversal, `[v_0, …, v_{L-1}, v_{L-1}, …, v_0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTensor {
    pub v: CMatrix,
    pub length: usize,
    pub bidirectional: bool,
}

impl KernelTensor {
    pub fn state_dim(&self) -> usize {
        self.v.ncols()
    }

    /// Forward coefficient for lag `m` of state `i`.
    #[inline]
    pub fn forward(&self, m: usize, i: usize) -> Complex64 {
        self.v[(m, i)]
    }

    /// Coefficient applied to input `t + m` at output `t`; `None` for a causal kernel.
    #[inline]
    pub fn backward(&self, m: usize, i: usize) -> Option<Complex64> {
        self.bidirectional
            .then(|| self.v[(2 * self.length - 1 - m, i)])
    }

    /// Kernel with every imaginary part dropped.
    pub fn real_part(&self) -> KernelTensor {
        KernelTensor {
            v: self.v.map(|z| Complex64::new(z.re, 0.0)),
            length: self.length,
            bidirectional: self.bidirectional,
        }
    }

    pub fn with_mode(&self, mode: KernelMode) -> KernelTensor {
        match mode {
            KernelMode::Complex => self.clone(),
            KernelMode::RealPart => self.real_part(),
        }
    }
}

/// The per-step products `B̄ u_k`, one row per step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedInput {
    pub bu: CMatrix,
}

impl ProjectedInput {
    pub fn len(&self) -> usize {
        self.bu.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.bu.nrows() == 0
    }
}

/// Powers of each eigenvalue by cumulative products, `O(LN)`.
pub fn system_kernel(lambda_bar: &CVector, len: usize) -> Result<KernelTensor> {
    if len == 0 {
        return Err(EssmError::InvalidLength(
            "kernel length must be >= 1".into(),
        ));
    }
    let n = lambda_bar.len();
    let mut v = CMatrix::zeros(len, n);
    for (i, &lam) in lambda_bar.iter().enumerate() {
        let mut col = v.column_mut(i);
        let mut p = Complex64::new(1.0, 0.0);
        for k in 0..len {
            col[k] = p;
            p *= lam;
        }
    }
    Ok(KernelTensor {
        v,
        length: len,
        bidirectional: false,
    })
}

/// `bu[k] = B̄ u_k` for every step.
pub fn project_input(b_bar: &CMatrix, u: &DMatrix<f64>) -> Result<ProjectedInput> {
    if u.ncols() != b_bar.ncols() {
        return Err(shape_err("input", (u.nrows(), b_bar.ncols()), u.shape()));
    }
    // (L x H) * (H x N) computed as two real products
    let re = u * b_bar.map(|z| z.re).transpose();
    let im = u * b_bar.map(|z| z.im).transpose();
    let bu = re.zip_map(&im, Complex64::new);
    Ok(ProjectedInput { bu })
}

fn check_lengths(kernel: &KernelTensor, pin: &ProjectedInput) -> Result<()> {
    if kernel.length != pin.len() {
        return Err(EssmError::InvalidLength(format!(
            "kernel length {} does not match input length {}",
            kernel.length,
            pin.len()
        )));
    }
    if kernel.state_dim() != pin.bu.ncols() {
        return Err(shape_err(
            "projected input",
            (pin.len(), kernel.state_dim()),
            pin.bu.shape(),
        ));
    }
    Ok(())
}

/// Brute-force `O(L²N)` convolution.
pub fn conv_direct(kernel: &KernelTensor, pin: &ProjectedInput) -> Result<CMatrix> {
    check_lengths(kernel, pin)?;
    let (len, n) = (kernel.length, kernel.state_dim());
    let mut x = CMatrix::zeros(len, n);
    for i in 0..n {
        let bu = pin.bu.column(i);
        for k in 0..len {
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..=k {
                acc += kernel.forward(m, i) * bu[k - m];
            }
            if kernel.bidirectional {
                for m in 0..len - k {
                    acc += kernel.backward(m, i).unwrap() * bu[k + m];
                }
            }
            x[(k, i)] = acc;
        }
    }
    Ok(x)
}

/// Transform length that keeps the convolution linear.
pub fn fft_length(len: usize, bidirectional: bool) -> usize {
    if bidirectional {
        next_pow2(3 * len - 1)
    } else {
        next_pow2(2 * len - 1)
    }
}

/// FFT convolution, one state channel at a time.
///
/// A bidirectional kernel is laid out as a two-sided filter of length `2L-1`
/// centred on lag zero, so output `t` sees inputs `0..=t` through the forward
/// kernel and `t..L` through the reversed one.
pub fn conv_fft(kernel: &KernelTensor, pin: &ProjectedInput) -> Result<CMatrix> {
    check_lengths(kernel, pin)?;
    let (len, n) = (kernel.length, kernel.state_dim());
    let plan = ComplexConvPlan::new(fft_length(len, kernel.bidirectional));
    let mut out = CMatrix::zeros(len, n);
    // column-major storage: each state channel is one contiguous slice
    let (v, bu) = (kernel.v.as_slice(), pin.bu.as_slice());
    let vlen = kernel.v.nrows();
    out.as_mut_slice()
        .par_chunks_mut(len)
        .enumerate()
        .for_each_init(
            || plan.workspace(),
            |ws, (i, col)| {
                let input = &bu[i * len..(i + 1) * len];
                if kernel.bidirectional {
                    plan.convolve_into(&two_sided_filter(kernel, i), input, len - 1, col, ws);
                } else {
                    plan.convolve_into(&v[i * vlen..(i + 1) * vlen], input, 0, col, ws);
                }
            },
        );
    Ok(out)
}

fn two_sided_filter(kernel: &KernelTensor, i: usize) -> Vec<Complex64> {
    let len = kernel.length;
    let mut filt = vec![Complex64::new(0.0, 0.0); 2 * len - 1];
    for m in 0..len {
        filt[len - 1 + m] += kernel.forward(m, i);
        filt[len - 1 - m] += kernel.backward(m, i).unwrap();
    }
    filt
}

/// Adds the time-reversed kernel: `pad(V, (0, L)) + pad(flip(V), (L, 0))`.
/// No new parameters; the result is a function of the forward kernel alone.
pub fn bidirectional_kernel(kernel: &KernelTensor) -> Result<KernelTensor> {
    if kernel.bidirectional {
        return Err(EssmError::InvalidState(
            "kernel is already bidirectional".into(),
        ));
    }
    let (len, n) = (kernel.length, kernel.state_dim());
    let mut v = CMatrix::zeros(2 * len, n);
    for i in 0..n {
        for k in 0..len {
            v[(k, i)] += kernel.v[(k, i)];
            v[(2 * len - 1 - k, i)] += kernel.v[(k, i)];
        }
    }
    Ok(KernelTensor {
        v,
        length: len,
        bidirectional: true,
    })
}

/// Adds one to every channel of `u` at step `k` and reports whether every
/// output row before `k` stayed bit-identical.
pub fn causality_probe<F>(mut run: F, u: &DMatrix<f64>, k: usize) -> bool
where
    F: FnMut(&DMatrix<f64>) -> DMatrix<f64>,
{
    if k >= u.nrows() {
        return true;
    }
    let base = run(u);
    let mut bumped = u.clone();
    bumped.row_mut(k).add_scalar_mut(1.0);
    let out = run(&bumped);
    (0..k).all(|t| {
        base.row(t)
            .iter()
            .zip(out.row(t).iter())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    })
}
