//! Linear (non-circular) convolution through zero-padded FFTs.

use std::sync::{Arc, LazyLock, Mutex};

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};

/// Smallest power of two `>= n` (1 for `n = 0`).
pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

// Planning is costly and the planners memoize by length, so one of each is
// shared by the whole process.
static COMPLEX_PLANNER: LazyLock<Mutex<FftPlanner<f64>>> =
    LazyLock::new(|| Mutex::new(FftPlanner::new()));
static REAL_PLANNER: LazyLock<Mutex<RealFftPlanner<f64>>> =
    LazyLock::new(|| Mutex::new(RealFftPlanner::new()));

/// Forward and inverse complex transforms of one length.
#[derive(Clone)]
pub struct ComplexConvPlan {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl ComplexConvPlan {
    pub fn new(n: usize) -> Self {
        let mut planner = COMPLEX_PLANNER.lock().unwrap_or_else(|e| e.into_inner());
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn fft_len(&self) -> usize {
        self.n
    }

    /// Zero-padded forward transform of `x` (`x.len() <= n`).
    pub fn spectrum(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert!(x.len() <= self.n, "signal longer than transform");
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n];
        buf[..x.len()].copy_from_slice(x);
        self.fwd.process(&mut buf);
        buf
    }

    /// Normalized inverse transform, consuming the spectrum.
    pub fn inverse(&self, mut spectrum: Vec<Complex64>) -> Vec<Complex64> {
        self.inv.process(&mut spectrum);
        let scale = 1.0 / self.n as f64;
        spectrum.iter_mut().for_each(|z| *z *= scale);
        spectrum
    }

    /// `(a * b)[offset .. offset + out_len]` where `*` is linear convolution.
    /// The transform length must cover `a.len() + b.len() - 1`.
    pub fn convolve(
        &self,
        a: &[Complex64],
        b: &[Complex64],
        offset: usize,
        out_len: usize,
    ) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); out_len];
        self.convolve_into(a, b, offset, &mut out, &mut self.workspace());
        out
    }

    pub fn workspace(&self) -> ConvWorkspace {
        let zero = Complex64::new(0.0, 0.0);
        let scratch = self
            .fwd
            .get_inplace_scratch_len()
            .max(self.inv.get_inplace_scratch_len());
        ConvWorkspace {
            a: vec![zero; self.n],
            b: vec![zero; self.n],
            scratch: vec![zero; scratch],
        }
    }

    /// [`convolve`](Self::convolve) writing into `out`, with every buffer
    /// taken from `ws`. Nothing is allocated.
    pub fn convolve_into(
        &self,
        a: &[Complex64],
        b: &[Complex64],
        offset: usize,
        out: &mut [Complex64],
        ws: &mut ConvWorkspace,
    ) {
        debug_assert!(a.len() + b.len() <= self.n + 1);
        assert!(ws.a.len() == self.n, "workspace belongs to another plan");
        let zero = Complex64::new(0.0, 0.0);
        for (buf, x) in [(&mut ws.a, a), (&mut ws.b, b)] {
            buf[..x.len()].copy_from_slice(x);
            buf[x.len()..].fill(zero);
            self.fwd.process_with_scratch(buf, &mut ws.scratch);
        }
        let scale = 1.0 / self.n as f64;
        ws.b.iter_mut()
            .zip(&ws.a)
            .for_each(|(y, x)| *y *= x * scale);
        self.inv.process_with_scratch(&mut ws.b, &mut ws.scratch);
        out.copy_from_slice(&ws.b[offset..offset + out.len()]);
    }
}

/// Reusable buffers for [`ComplexConvPlan::convolve_into`].
#[derive(Debug, Clone)]
pub struct ConvWorkspace {
    a: Vec<Complex64>,
    b: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

/// Real-input transforms of one length.
#[derive(Clone)]
pub struct RealConvPlan {
    n: usize,
    fwd: Arc<dyn RealToComplex<f64>>,
    inv: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for RealConvPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RealConvPlan").field("n", &self.n).finish()
    }
}

impl RealConvPlan {
    pub fn new(n: usize) -> Self {
        let mut planner = REAL_PLANNER.lock().unwrap_or_else(|e| e.into_inner());
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn fft_len(&self) -> usize {
        self.n
    }

    pub fn spectrum(&self, x: &[f64]) -> Vec<Complex64> {
        assert!(x.len() <= self.n, "signal longer than transform");
        let mut buf = vec![0.0; self.n];
        buf[..x.len()].copy_from_slice(x);
        let mut out = self.fwd.make_output_vec();
        self.fwd
            .process(&mut buf, &mut out)
            .expect("buffer sizes come from the plan");
        out
    }

    pub fn inverse(&self, mut spectrum: Vec<Complex64>) -> Vec<f64> {
        // the DC and Nyquist bins of a real signal's spectrum are real
        spectrum[0].im = 0.0;
        if self.n.is_multiple_of(2) {
            let last = spectrum.len() - 1;
            spectrum[last].im = 0.0;
        }
        let mut out = self.inv.make_output_vec();
        self.inv
            .process(&mut spectrum, &mut out)
            .expect("buffer sizes come from the plan");
        let scale = 1.0 / self.n as f64;
        out.iter_mut().for_each(|x| *x *= scale);
        out
    }

    pub fn convolve(&self, a: &[f64], b: &[f64], offset: usize, out_len: usize) -> Vec<f64> {
        debug_assert!(a.len() + b.len() <= self.n + 1);
        let fa = self.spectrum(a);
        let mut fb = self.spectrum(b);
        fb.iter_mut().zip(&fa).for_each(|(y, x)| *y *= x);
        let full = self.inverse(fb);
        full[offset..offset + out_len].to_vec()
    }
}

/// Causal convolution `y[k] = Σ_{m<=k} h[m] w[k-m]`, truncated to `w.len()`.
pub fn causal_conv_real(plan: &RealConvPlan, h: &[f64], w: &[f64]) -> Vec<f64> {
    plan.convolve(h, w, 0, w.len())
}

/// Adjoint of [`causal_conv_real`] in its second argument:
/// `r[j] = Σ_{k>=j} a[k] h[k-j]`.
pub fn causal_corr_real(plan: &RealConvPlan, a: &[f64], h: &[f64]) -> Vec<f64> {
    let rev: Vec<f64> = a.iter().rev().copied().collect();
    let mut out = plan.convolve(h, &rev, 0, a.len());
    out.reverse();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    }

    #[test]
    fn pow2() {
        assert_eq!(next_pow2(0), 1);
        assert_eq!(next_pow2(1), 1);
        assert_eq!(next_pow2(5), 8);
        assert_eq!(next_pow2(8), 8);
    }

    #[test]
    fn complex_round_trip_up_to_2_16() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for p in [1usize, 4, 10, 16] {
            let n = 1 << p;
            let plan = ComplexConvPlan::new(n);
            let x: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let back = plan.inverse(plan.spectrum(&x));
            let scale = x.iter().fold(0.0f64, |a, z| a.max(z.norm()));
            let err = x
                .iter()
                .zip(&back)
                .fold(0.0f64, |a, (p, q)| a.max((p - q).norm()));
            assert!(err / scale <= 1e-12, "n={n} err={err}");
        }
    }

    #[test]
    fn real_convolution_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (la, lb) in [(1, 1), (3, 5), (17, 17), (64, 9)] {
            let a: Vec<f64> = (0..la).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..lb).map(|_| rng.random_range(-1.0..1.0)).collect();
            let plan = RealConvPlan::new(next_pow2(la + lb - 1));
            let got = plan.convolve(&a, &b, 0, la + lb - 1);
            for (g, e) in got.iter().zip(naive(&a, &b)) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correlation_is_adjoint_of_convolution() {
        // <conv(h, w), a> == <w, corr(a, h)>
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = 13;
        let h: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let plan = RealConvPlan::new(next_pow2(2 * l - 1));
        let lhs: f64 = causal_conv_real(&plan, &h, &w)
            .iter()
            .zip(&a)
            .map(|(x, y)| x * y)
            .sum();
        let rhs: f64 = w
            .iter()
            .zip(causal_corr_real(&plan, &a, &h))
            .map(|(x, y)| x * y)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
