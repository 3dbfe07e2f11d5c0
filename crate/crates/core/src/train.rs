//! Loss, reverse-mode gradients of the layer, a central-difference oracle and
//! a gradient-descent system-identification loop.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::KernelMode;
use crate::error::{shape_err, EssmError, Result};
use crate::fft::causal_corr_real;
use crate::layer::{
    gelu_grad, head_forward, Activation, HeadCache, LayerCache, MultiHeadLayer, NormKind,
    NormPlacement,
};
use crate::ssm::DiagonalSystem;

/// Step sizes are projected back onto `[DELTA_MIN, ∞)` after every update.
pub const DELTA_MIN: f64 = 1e-6;
pub const DIVERGENCE_LOSS: f64 = 1e6;

pub fn mse_loss(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(shape_err("target", pred.shape(), target.shape()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok((pred - target).norm_squared() / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub d_raw_real: DVector<f64>,
    pub d_imag: DVector<f64>,
    pub d_b: DMatrix<f64>,
    pub d_c: DMatrix<f64>,
    pub d_d: DVector<f64>,
    pub d_delta: DVector<f64>,
}

/// Gradients of every trainable tensor of a [`MultiHeadLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub heads: Vec<HeadGrad>,
    pub d_mixer_w: DMatrix<f64>,
    pub d_mixer_b: DVector<f64>,
    pub d_gate_w: DMatrix<f64>,
}

/// Tensor names, in flattening order.
pub const TENSOR_NAMES: [&str; 9] = [
    "raw_real", "imag", "b", "c", "d", "delta", "mixer_w", "mixer_b", "gate_w",
];

impl GradBundle {
    pub fn zeros_like(layer: &MultiHeadLayer) -> Self {
        Self {
            heads: layer
                .heads
                .iter()
                .map(|h| HeadGrad {
                    d_raw_real: DVector::zeros(h.state_dim()),
                    d_imag: DVector::zeros(h.state_dim()),
                    d_b: DMatrix::zeros(h.b.nrows(), h.b.ncols()),
                    d_c: DMatrix::zeros(h.c.nrows(), h.c.ncols()),
                    d_d: DVector::zeros(h.d.len()),
                    d_delta: DVector::zeros(h.delta.len()),
                })
                .collect(),
            d_mixer_w: DMatrix::zeros(layer.mixer_w.nrows(), layer.mixer_w.ncols()),
            d_mixer_b: DVector::zeros(layer.mixer_b.len()),
            d_gate_w: DMatrix::zeros(layer.gate_w.nrows(), layer.gate_w.ncols()),
        }
    }

    /// Each tensor kind flattened across heads, named as in [`TENSOR_NAMES`].
    pub fn tensors(&self) -> Vec<(&'static str, Vec<f64>)> {
        let cat =
            |f: &dyn Fn(&HeadGrad) -> Vec<f64>| self.heads.iter().flat_map(f).collect::<Vec<f64>>();
        vec![
            ("raw_real", cat(&|h| h.d_raw_real.as_slice().to_vec())),
            ("imag", cat(&|h| h.d_imag.as_slice().to_vec())),
            ("b", cat(&|h| h.d_b.as_slice().to_vec())),
            ("c", cat(&|h| h.d_c.as_slice().to_vec())),
            ("d", cat(&|h| h.d_d.as_slice().to_vec())),
            ("delta", cat(&|h| h.d_delta.as_slice().to_vec())),
            ("mixer_w", self.d_mixer_w.as_slice().to_vec()),
            ("mixer_b", self.d_mixer_b.as_slice().to_vec()),
            ("gate_w", self.d_gate_w.as_slice().to_vec()),
        ]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for h in &self.heads {
            for t in [
                h.d_raw_real.as_slice(),
                h.d_imag.as_slice(),
                h.d_b.as_slice(),
                h.d_c.as_slice(),
                h.d_d.as_slice(),
                h.d_delta.as_slice(),
            ] {
                out.extend_from_slice(t);
            }
        }
        out.extend_from_slice(self.d_mixer_w.as_slice());
        out.extend_from_slice(self.d_mixer_b.as_slice());
        out.extend_from_slice(self.d_gate_w.as_slice());
        out
    }

    /// Inverse of [`GradBundle::to_flat`] for a layer of the same shape.
    pub fn from_flat(layer: &MultiHeadLayer, flat: &[f64]) -> Self {
        let mut g = Self::zeros_like(layer);
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut [f64]| {
            dst.iter_mut()
                .for_each(|x| *x = it.next().expect("flat length"))
        };
        for h in &mut g.heads {
            fill(h.d_raw_real.as_mut_slice());
            fill(h.d_imag.as_mut_slice());
            fill(h.d_b.as_mut_slice());
            fill(h.d_c.as_mut_slice());
            fill(h.d_d.as_mut_slice());
            fill(h.d_delta.as_mut_slice());
        }
        fill(g.d_mixer_w.as_mut_slice());
        fill(g.d_mixer_b.as_mut_slice());
        fill(g.d_gate_w.as_mut_slice());
        g
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }
}

/// All trainable values of the layer in the order of [`GradBundle::to_flat`].
pub fn layer_params(layer: &MultiHeadLayer) -> Vec<f64> {
    let mut out = Vec::new();
    for h in &layer.heads {
        for t in [
            h.spectrum.raw_real.as_slice(),
            h.spectrum.imag.as_slice(),
            h.b.as_slice(),
            h.c.as_slice(),
            h.d.as_slice(),
            h.delta.as_slice(),
        ] {
            out.extend_from_slice(t);
        }
    }
    out.extend_from_slice(layer.mixer_w.as_slice());
    out.extend_from_slice(layer.mixer_b.as_slice());
    out.extend_from_slice(layer.gate_w.as_slice());
    out
}

pub fn set_layer_params(layer: &mut MultiHeadLayer, flat: &[f64]) {
    let mut it = flat.iter().copied();
    let mut fill = |dst: &mut [f64]| {
        dst.iter_mut()
            .for_each(|x| *x = it.next().expect("flat length"))
    };
    for h in &mut layer.heads {
        fill(h.spectrum.raw_real.as_mut_slice());
        fill(h.spectrum.imag.as_mut_slice());
        fill(h.b.as_mut_slice());
        fill(h.c.as_mut_slice());
        fill(h.d.as_mut_slice());
        fill(h.delta.as_mut_slice());
    }
    fill(layer.mixer_w.as_mut_slice());
    fill(layer.mixer_b.as_mut_slice());
    fill(layer.gate_w.as_mut_slice());
}

/// Central differences `(f(θ+ε) - f(θ-ε)) / 2ε`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], epsilon: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut theta = params.to_vec();
    (0..params.len())
        .map(|i| {
            let x = params[i];
            theta[i] = x + epsilon;
            let up = loss(&theta);
            theta[i] = x - epsilon;
            let down = loss(&theta);
            theta[i] = x;
            (up - down) / (2.0 * epsilon)
        })
        .collect()
}

/// Finite-difference gradient of `mse(layer_forward(u), target)`.
pub fn finite_diff_layer_grad(
    layer: &MultiHeadLayer,
    u: &DMatrix<f64>,
    target: &DMatrix<f64>,
    epsilon: f64,
) -> Result<GradBundle> {
    let base = layer_params(layer);
    let mut probe = layer.clone();
    let mut failure = None;
    let flat = finite_diff_grad(
        |theta| {
            set_layer_params(&mut probe, theta);
            match probe
                .forward_cached(u)
                .and_then(|(out, _)| mse_loss(&out, target))
            {
                Ok(l) => l,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &base,
        epsilon,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(GradBundle::from_flat(layer, &flat))
}

/// Loss and exact gradients of `mse(layer_forward(u), target)`.
///
/// Backpropagates through the convolution with its adjoint (correlation),
/// through ZOH's `exp(λΔ)` and `(exp(λΔ) - 1)/λ`, and through the stability
/// clip, whose derivative is zero on the clipped branch.
pub fn analytic_grad(
    layer: &MultiHeadLayer,
    u: &DMatrix<f64>,
    target: &DMatrix<f64>,
) -> Result<(f64, GradBundle)> {
    if layer.config.mode != KernelMode::RealPart {
        return Err(EssmError::InvalidState(
            "analytic gradients need the real-part kernel mode".into(),
        ));
    }
    let (out, cache) = layer.forward_cached(u)?;
    let loss = mse_loss(&out, target)?;
    let dout = (&out - target) * (2.0 / out.len() as f64);
    let grads = backward(layer, &cache, dout)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(EssmError::NumericFailure(
            "non-finite loss or gradient".into(),
        ));
    }
    Ok((loss, grads))
}

/// Adjoint of zero-mean/unit-variance normalization over groups of `axis`.
fn norm_backward(
    xhat: &DMatrix<f64>,
    inv: &[f64],
    dy: &DMatrix<f64>,
    kind: NormKind,
) -> DMatrix<f64> {
    let mut dx = dy.clone();
    let group = |xs: &[f64], ds: &[f64], s: f64| -> Vec<f64> {
        let n = xs.len() as f64;
        let mean_d = ds.iter().sum::<f64>() / n;
        let mean_dx = ds.iter().zip(xs).map(|(d, x)| d * x).sum::<f64>() / n;
        ds.iter()
            .zip(xs)
            .map(|(d, x)| s * (d - mean_d - x * mean_dx))
            .collect()
    };
    match kind {
        NormKind::None => {}
        NormKind::Batch => {
            for j in 0..dx.ncols() {
                let xs: Vec<f64> = xhat.column(j).iter().copied().collect();
                let ds: Vec<f64> = dy.column(j).iter().copied().collect();
                dx.set_column(j, &DVector::from_vec(group(&xs, &ds, inv[j])));
            }
        }
        NormKind::Layer => {
            for r in 0..dx.nrows() {
                let xs: Vec<f64> = xhat.row(r).iter().copied().collect();
                let ds: Vec<f64> = dy.row(r).iter().copied().collect();
                let g = group(&xs, &ds, inv[r]);
                dx.row_mut(r).iter_mut().zip(g).for_each(|(d, v)| *d = v);
            }
        }
    }
    dx
}

fn backward(layer: &MultiHeadLayer, cache: &LayerCache, dout: DMatrix<f64>) -> Result<GradBundle> {
    let cfg = layer.config;
    let mut grads = GradBundle::zeros_like(layer);
    let dr = match (&cache.norm, cfg.placement) {
        (Some((xhat, inv)), NormPlacement::Post) => norm_backward(xhat, inv, &dout, cfg.norm),
        _ => dout,
    };
    // the residual branch carries no parameters
    let da = dr;
    let dz = match (cfg.activation, &cache.gate) {
        (Activation::Gated, Some((g, s))) => {
            let ds = da.component_mul(g);
            let dp = ds.component_mul(&s.map(|v| v * (1.0 - v)));
            grads.d_gate_w = dp.transpose() * g;
            let dg = da.component_mul(s) + &dp * &layer.gate_w;
            dg.component_mul(&cache.z.map(gelu_grad))
        }
        _ => da,
    };
    grads.d_mixer_w = dz.transpose() * &cache.y;
    grads.d_mixer_b = dz.row_sum().transpose();
    let dy = &dz * &layer.mixer_w;
    let heads = cache.heads.as_ref().ok_or_else(|| {
        EssmError::InvalidState("head caches missing from the forward pass".into())
    })?;
    let hh = layer.heads[0].input_dim();
    let mut out_col = 0;
    for (j, (head, hc)) in layer.heads.iter().zip(heads).enumerate() {
        let hm = head.output_dim();
        let dy_h = dy.columns(out_col, hm).into_owned();
        let u_h = cache.u_in.columns(j * hh, hh).into_owned();
        grads.heads[j] = head_backward(head, hc, &u_h, &dy_h, cfg.bidirectional);
        out_col += hm;
    }
    Ok(grads)
}

fn reversed(v: &[f64]) -> Vec<f64> {
    v.iter().rev().copied().collect()
}

fn head_backward(
    head: &crate::layer::EssmHead,
    hc: &HeadCache,
    u: &DMatrix<f64>,
    dy: &DMatrix<f64>,
    bidirectional: bool,
) -> HeadGrad {
    let n = head.state_dim();
    let len = u.nrows();
    let d_c = dy.transpose() * &hc.states;
    let d_d = DVector::from_fn(head.d.len(), |j, _| dy.column(j).dot(&u.column(j)));
    let dx = dy * &head.c;
    let mut dw = DMatrix::zeros(len, n);
    let mut d_raw_real = DVector::zeros(n);
    let mut d_imag = DVector::zeros(n);
    let mut d_delta = DVector::zeros(n);
    for i in 0..n {
        let dxi: Vec<f64> = dx.column(i).iter().copied().collect();
        let (h, w) = (&hc.kernel[i], &hc.proj[i]);
        let mut dh = causal_corr_real(&hc.plan, &dxi, w);
        let mut dwi = causal_corr_real(&hc.plan, &dxi, h);
        if bidirectional {
            // backward half is R conv(h, R w)
            let rdx = reversed(&dxi);
            let back_h = causal_corr_real(&hc.plan, &rdx, &reversed(w));
            dh.iter_mut().zip(back_h).for_each(|(a, b)| *a += b);
            let back_w = causal_corr_real(&hc.plan, &rdx, h);
            dwi.iter_mut()
                .zip(back_w.iter().rev())
                .for_each(|(a, b)| *a += b);
        }
        dw.set_column(i, &DVector::from_vec(dwi));

        // h[m] = Re(e^{m z}) Re(g), z = λΔ, g = (e^z - 1)/λ
        let (lam, dt, lb, g) = (hc.lambda[i], head.delta[i], hc.lambda_bar[i], hc.gain[i]);
        let mut p = Complex64::new(1.0, 0.0);
        let mut s2 = 0.0;
        let mut q = Complex64::new(0.0, 0.0);
        for (m, &dhm) in dh.iter().enumerate() {
            s2 += dhm * p.re;
            q += p * (dhm * m as f64);
            p *= lb;
        }
        let dg_dlam = (lb * dt - g) / lam;
        // real-parameter derivative given dλ/dθ = c
        let through_lambda = |c: Complex64| (q * dt * c).re * g.re + s2 * (dg_dlam * c).re;
        let clip_slope = if head.spectrum.raw_real[i] > head.spectrum.floor {
            -1.0
        } else {
            0.0
        };
        d_raw_real[i] = through_lambda(Complex64::new(clip_slope, 0.0));
        d_imag[i] = through_lambda(Complex64::new(0.0, 1.0));
        d_delta[i] = (q * lam).re * g.re + s2 * lb.re;
    }
    let d_b = dw.transpose() * u;
    HeadGrad {
        d_raw_real,
        d_imag,
        d_b,
        d_c,
        d_d,
        d_delta,
    }
}

/// `‖a - f‖∞ / max(‖a‖∞, ‖f‖∞, 1e-6)` per tensor kind. The floor keeps
/// identically-zero gradients (e.g. a bias feeding a mean-removing norm) from
/// being judged on finite-difference noise.
pub fn grad_rel_errors(analytic: &GradBundle, numeric: &GradBundle) -> Vec<(&'static str, f64)> {
    analytic
        .tensors()
        .into_iter()
        .zip(numeric.tensors())
        .map(|((name, a), (_, f))| {
            let diff = a
                .iter()
                .zip(&f)
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            let scale = a.iter().chain(&f).fold(1e-6f64, |m, x| m.max(x.abs()));
            (name, diff / scale)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub fd_epsilon: f64,
    pub seq_len: usize,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.01,
            seed: 0,
            fd_epsilon: 1e-5,
            seq_len: 128,
            batch: 4,
        }
    }
}

/// Plain gradient-descent step; step sizes stay positive.
pub fn apply_gradients(layer: &mut MultiHeadLayer, grads: &GradBundle, lr: f64) {
    let mut theta = layer_params(layer);
    for (t, g) in theta.iter_mut().zip(grads.to_flat()) {
        *t -= lr * g;
    }
    set_layer_params(layer, &theta);
    for head in &mut layer.heads {
        head.delta.iter_mut().for_each(|d| *d = d.max(DELTA_MIN));
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    /// Loss before each step, plus the loss after the last one.
    pub losses: Vec<f64>,
    pub student: MultiHeadLayer,
}

impl FitReport {
    pub fn reduction(&self) -> f64 {
        self.losses.last().unwrap() / self.losses[0]
    }
}

/// Standard-normal input sequences, reproducible from `seed`.
pub fn random_inputs(batch: usize, len: usize, width: usize, seed: u64) -> Vec<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0).expect("valid std");
    (0..batch)
        .map(|_| DMatrix::from_fn(len, width, |_, _| dist.sample(&mut rng)))
        .collect()
}

/// Full-batch gradient descent of `student` towards the outputs of `teacher`
/// on random input sequences.
pub fn fit_system_id(
    teacher: &DiagonalSystem,
    mut student: MultiHeadLayer,
    cfg: &TrainConfig,
) -> Result<FitReport> {
    teacher.validate()?;
    if teacher.lambda.iter().any(|z| !(z.re < 0.0)) {
        return Err(EssmError::InvalidState("teacher must be stable".into()));
    }
    if cfg.steps == 0 || cfg.batch == 0 || cfg.seq_len == 0 {
        return Err(EssmError::InvalidRange(
            "steps, batch and seq_len must be >= 1".into(),
        ));
    }
    if student.input_dim() != teacher.input_dim() || student.output_dim() != teacher.output_dim() {
        return Err(EssmError::InvalidShape(format!(
            "student maps {} -> {}, teacher maps {} -> {}",
            student.input_dim(),
            student.output_dim(),
            teacher.input_dim(),
            teacher.output_dim()
        )));
    }
    let inputs = random_inputs(cfg.batch, cfg.seq_len, teacher.input_dim(), cfg.seed);
    let targets = inputs
        .iter()
        .map(|u| head_forward(teacher, u, false))
        .collect::<Result<Vec<_>>>()?;
    let batch_grad = |layer: &MultiHeadLayer| -> Result<(f64, GradBundle)> {
        let mut total = 0.0;
        let mut acc = vec![0.0; layer_params(layer).len()];
        for (u, y) in inputs.iter().zip(&targets) {
            let (l, g) = analytic_grad(layer, u, y)?;
            total += l;
            acc.iter_mut().zip(g.to_flat()).for_each(|(a, b)| *a += b);
        }
        let k = inputs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        Ok((total / k, GradBundle::from_flat(layer, &acc)))
    };
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (loss, grads) = batch_grad(&student)?;
        if !(loss <= DIVERGENCE_LOSS) {
            return Err(EssmError::TrainingDiverged { step, loss });
        }
        losses.push(loss);
        apply_gradients(&mut student, &grads, cfg.learning_rate);
    }
    let (final_loss, _) = batch_grad(&student)?;
    if !(final_loss <= DIVERGENCE_LOSS) {
        return Err(EssmError::TrainingDiverged {
            step: cfg.steps,
            loss: final_loss,
        });
    }
    losses.push(final_loss);
    Ok(FitReport { losses, student })
}

/// Step-size range of the system-identification demo. Each mode then forgets
/// within a few steps, so every state is well excited at `L = 128`; the
/// library default `[0.001, 0.1]` targets sequences thousands of steps long.
pub const DEMO_DELTA_RANGE: (f64, f64) = (1.0, 3.0);

/// Teacher and student drawn from the same HiPPO family with different seeds.
#[derive(Debug, Clone)]
pub struct SystemIdSetup {
    pub teacher: DiagonalSystem,
    pub student: MultiHeadLayer,
}

/// HiPPO-initialized teacher (seed `seed + 1`) and a single-head plain student
/// (seed `seed`) with identity mixer, both of size `n` states, `h` inputs and
/// `h` outputs.
pub fn system_id_setup(n: usize, h: usize, seed: u64) -> Result<SystemIdSetup> {
    use crate::hippo::init_bundle;
    use crate::layer::{EssmHead, LayerConfig, DEFAULT_FLOOR};
    let teacher_init = init_bundle(n, h, h, DEMO_DELTA_RANGE, seed.wrapping_add(1))?;
    let student_init = init_bundle(n, h, h, DEMO_DELTA_RANGE, seed)?;
    let teacher = EssmHead::from_init(&teacher_init, DEFAULT_FLOOR).system();
    let student = MultiHeadLayer::from_heads(
        vec![EssmHead::from_init(&student_init, DEFAULT_FLOOR)],
        DMatrix::identity(h, h),
        DVector::zeros(h),
        DMatrix::zeros(h, h),
        LayerConfig::plain(1),
    )?;
    Ok(SystemIdSetup { teacher, student })
}
