//! Recurrent, direct-convolution and FFT-convolution state inference agree.

use essm::conv::{
    bidirectional_kernel, conv_direct, conv_fft, project_input, system_kernel, ProjectedInput,
};
use essm::linalg::{rel_linf, rel_linf_c, to_complex, CMatrix, CVector};
use essm::ssm::{
    diagonalize, discretize_zoh, discretize_zoh_full, recurrent_scan_diagonal, recurrent_scan_full,
    ContinuousFull,
};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_stable(rng: &mut ChaCha8Rng, n: usize) -> CVector {
    CVector::from_fn(n, |_, _| {
        Complex64::new(-rng.random_range(0.01..2.0), rng.random_range(-5.0..5.0))
    })
}

fn random_real(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn two_hundred_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let lens = [1usize, 2, 3, 8, 64, 257];
    let ns = [1usize, 2, 5];
    let hs = [1usize, 3];
    for inst in 0..200 {
        let (l, n, h) = (lens[inst % 6], ns[(inst / 6) % 3], hs[(inst / 18) % 2]);
        let lam = random_stable(&mut rng, n);
        let delta = DVector::from_fn(n, |_, _| rng.random_range(0.001..0.1));
        let b = to_complex(&random_real(&mut rng, n, h));
        let u = random_real(&mut rng, l, h);
        let disc = discretize_zoh(&lam, &b, &delta).unwrap();
        let kernel = system_kernel(&disc.lambda_bar, l).unwrap();
        let pin = project_input(&disc.b_bar, &u).unwrap();
        let direct = conv_direct(&kernel, &pin).unwrap();
        let fast = conv_fft(&kernel, &pin).unwrap();
        assert!(rel_linf_c(&fast, &direct) <= 1e-9, "instance {inst}");
        let c = CMatrix::identity(n, n);
        let scan = recurrent_scan_diagonal(&disc, &c, &DMatrix::zeros(n, h), &u, None).unwrap();
        assert!(rel_linf_c(&direct, &scan.states) <= 1e-8, "instance {inst}");
        assert!(rel_linf_c(&fast, &scan.states) <= 1e-8, "instance {inst}");
    }
}

#[test]
fn single_step_projection_is_first_state() {
    let lam = CVector::from_vec(vec![Complex64::new(-0.3, 1.0), Complex64::new(-1.0, 0.0)]);
    let b = CMatrix::from_fn(2, 2, |i, j| Complex64::new((i + 2 * j) as f64, 0.5));
    let disc = discretize_zoh(&lam, &b, &DVector::from_element(2, 0.1)).unwrap();
    let u = DMatrix::from_row_slice(1, 2, &[0.7, -1.1]);
    let pin = project_input(&disc.b_bar, &u).unwrap();
    let scan = recurrent_scan_diagonal(
        &disc,
        &CMatrix::identity(2, 2),
        &DMatrix::zeros(2, 2),
        &u,
        None,
    )
    .unwrap();
    assert!(rel_linf_c(&pin.bu, &scan.states) < 1e-15);
}

#[test]
fn impulse_recovers_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for l in [1usize, 5, 64] {
        let lam = CVector::from_fn(3, |_, _| {
            Complex64::from_polar(rng.random_range(0.5..0.99), rng.random_range(-3.0..3.0))
        });
        let kernel = system_kernel(&lam, l).unwrap();
        let mut bu = CMatrix::zeros(l, 3);
        bu.row_mut(0).fill(Complex64::new(1.0, 0.0));
        let x = conv_fft(&kernel, &ProjectedInput { bu }).unwrap();
        assert!(rel_linf_c(&x, &kernel.v) <= 1e-10);
    }
}

#[test]
fn random_stable_5x5_diagonalization_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        // shift a random matrix so every eigenvalue sits left of -0.1
        let raw = random_real(&mut rng, 5, 5);
        let (vals, _) = essm::linalg::eig_general(&raw).unwrap();
        let shift = vals.iter().map(|z| z.re).fold(f64::MIN, f64::max) + 0.1;
        let a = raw - DMatrix::identity(5, 5) * shift;
        let sys = ContinuousFull::new(
            a.clone(),
            random_real(&mut rng, 5, 2),
            random_real(&mut rng, 3, 5),
            random_real(&mut rng, 3, 2),
        )
        .unwrap();
        let diag = diagonalize(&sys).unwrap();
        assert!(diag.reconstruction_error(&a) <= 1e-8);
        let dt = 0.05;
        let full = discretize_zoh_full(&sys, dt).unwrap();
        let u = random_real(&mut rng, 300, 2);
        let reference = recurrent_scan_full(&full, &u, None).unwrap();
        let disc =
            discretize_zoh(&diag.lambda, &diag.b_prime, &DVector::from_element(5, dt)).unwrap();
        let fast = recurrent_scan_diagonal(&disc, &diag.c_prime, &sys.d, &u, None).unwrap();
        assert!(rel_linf(&fast.outputs, &reference.outputs) <= 1e-8);
    }
}

#[test]
fn bidirectional_fft_matches_direct() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for l in [1usize, 2, 9, 100] {
        let lam = CVector::from_fn(2, |_, _| {
            Complex64::from_polar(rng.random_range(0.3..0.999), rng.random_range(-1.0..1.0))
        });
        let kernel = bidirectional_kernel(&system_kernel(&lam, l).unwrap()).unwrap();
        let bu = CMatrix::from_fn(l, 2, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let pin = ProjectedInput { bu };
        let d = conv_direct(&kernel, &pin).unwrap();
        let f = conv_fft(&kernel, &pin).unwrap();
        assert!(rel_linf_c(&f, &d) <= 1e-10, "L={l}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zoh_is_contractive(re in -5.0f64..-1e-6, im in -10.0f64..10.0, dt in 1e-4f64..1.0) {
        let disc = discretize_zoh(
            &CVector::from_element(1, Complex64::new(re, im)),
            &CMatrix::identity(1, 1),
            &DVector::from_element(1, dt),
        ).unwrap();
        prop_assert!(disc.lambda_bar[0].norm() < 1.0);
    }

    #[test]
    fn kernel_columns_non_increasing(r in 0.0f64..1.0, theta in -3.0f64..3.0, len in 1usize..200) {
        let k = system_kernel(&CVector::from_element(1, Complex64::from_polar(r, theta)), len).unwrap();
        prop_assert_eq!(k.v[(0, 0)], Complex64::new(1.0, 0.0));
        for m in 1..len {
            prop_assert!(k.v[(m, 0)].norm() <= k.v[(m - 1, 0)].norm() + 1e-15);
        }
    }

    #[test]
    fn fft_matches_direct(seed in 0u64..10_000, len in 1usize..=64, n in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lam = CVector::from_fn(n, |_, _| Complex64::from_polar(rng.random_range(0.0..1.0), rng.random_range(-3.0..3.0)));
        let kernel = system_kernel(&lam, len).unwrap();
        let bu = CMatrix::from_fn(len, n, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let pin = ProjectedInput { bu };
        let d = conv_direct(&kernel, &pin).unwrap();
        let f = conv_fft(&kernel, &pin).unwrap();
        prop_assert!(rel_linf_c(&f, &d) <= 1e-10);
    }
}
