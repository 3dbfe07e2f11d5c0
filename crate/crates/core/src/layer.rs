//! The trainable eSSM layer.
//!
//! A [`MultiHeadLayer`] splits its `H` input features into `s` equal groups,
//! runs an independent diagonal head on each, concatenates the head outputs and
//! mixes them with a dense `M x M` projection. Seen as one system, the heads
//! form a block-diagonal `(Λ, B, C, D)`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::conv::{self, KernelMode};
use crate::error::{shape_err, EssmError, Result};
use crate::fft::{causal_conv_real, RealConvPlan};
use crate::hippo::{self, InitBundle, DEFAULT_DELTA_RANGE};
use crate::linalg::{self, CVector};
use crate::ssm::{zoh_gain, DiagonalSystem};

/// Lower bound of `f₊`: every effective eigenvalue has `Re(λ) <= -1e-3`.
pub const DEFAULT_FLOOR: f64 = 1e-3;
const NORM_EPS: f64 = 1e-5;

/// Raw trainable spectrum; the effective eigenvalue is `-max(raw_real, floor) + i·imag`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilizedSpectrum {
    pub raw_real: DVector<f64>,
    pub imag: DVector<f64>,
    pub floor: f64,
}

impl StabilizedSpectrum {
    /// Raw parameters reproducing `lambda` (which must already be stable).
    pub fn from_lambda(lambda: &CVector, floor: f64) -> Self {
        Self {
            raw_real: lambda.map(|z| -z.re),
            imag: lambda.map(|z| z.im),
            floor,
        }
    }

    pub fn len(&self) -> usize {
        self.raw_real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_real.is_empty()
    }
}

pub fn enforce_stability(spectrum: &StabilizedSpectrum) -> CVector {
    CVector::from_iterator(
        spectrum.len(),
        spectrum
            .raw_real
            .iter()
            .zip(spectrum.imag.iter())
            .map(|(&r, &im)| Complex64::new(-r.max(spectrum.floor), im)),
    )
}

/// One head's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EssmHead {
    pub spectrum: StabilizedSpectrum,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub delta: DVector<f64>,
}

impl EssmHead {
    pub fn from_init(init: &InitBundle, floor: f64) -> Self {
        Self {
            spectrum: StabilizedSpectrum::from_lambda(&init.lambda_init, floor),
            b: init.b_init.clone(),
            c: init.c_init.clone(),
            d: init.d_init.clone(),
            delta: init.delta_init.clone(),
        }
    }

    pub fn from_system(sys: &DiagonalSystem, floor: f64) -> Self {
        Self {
            spectrum: StabilizedSpectrum::from_lambda(&sys.lambda, floor),
            b: sys.b.clone(),
            c: sys.c.clone(),
            d: sys.d.clone(),
            delta: sys.delta.clone(),
        }
    }

    pub fn system(&self) -> DiagonalSystem {
        DiagonalSystem {
            lambda: enforce_stability(&self.spectrum),
            b: self.b.clone(),
            c: self.c.clone(),
            d: self.d.clone(),
            delta: self.delta.clone(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.spectrum.len()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgorithm {
    #[default]
    Fft,
    /// Quadratic-time convolution; exactly causal in floating point.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HeadOptions {
    pub bidirectional: bool,
    pub mode: KernelMode,
    pub algorithm: ConvAlgorithm,
}

/// `y = Re(C x) + D u` with the states inferred by FFT convolution of the
/// real-part kernel.
pub fn head_forward(
    sys: &DiagonalSystem,
    u: &DMatrix<f64>,
    bidirectional: bool,
) -> Result<DMatrix<f64>> {
    head_forward_with(
        sys,
        u,
        HeadOptions {
            bidirectional,
            ..Default::default()
        },
    )
}

pub fn head_forward_with(
    sys: &DiagonalSystem,
    u: &DMatrix<f64>,
    opts: HeadOptions,
) -> Result<DMatrix<f64>> {
    sys.validate()?;
    if u.ncols() != sys.input_dim() {
        return Err(shape_err(
            "head input",
            (u.nrows(), sys.input_dim()),
            u.shape(),
        ));
    }
    if u.nrows() == 0 {
        return Err(EssmError::InvalidLength("input sequence is empty".into()));
    }
    if opts.algorithm == ConvAlgorithm::Fft {
        return Ok(real_head_forward(sys, u, opts.bidirectional, opts.mode).0);
    }
    let disc = sys.discretize()?;
    let mut kernel = conv::system_kernel(&disc.lambda_bar, u.nrows())?;
    if opts.bidirectional {
        kernel = conv::bidirectional_kernel(&kernel)?;
    }
    let kernel = kernel.with_mode(opts.mode);
    let pin = conv::project_input(&disc.b_bar, u)?;
    let x = match opts.algorithm {
        ConvAlgorithm::Fft => conv::conv_fft(&kernel, &pin)?,
        ConvAlgorithm::Direct => conv::conv_direct(&kernel, &pin)?,
    };
    // C is real, so Re(C x) = C Re(x)
    let mut y = linalg::real_part(&x) * sys.c.transpose();
    add_feedthrough(&mut y, &sys.d, u);
    Ok(y)
}

fn add_feedthrough(y: &mut DMatrix<f64>, d: &DVector<f64>, u: &DMatrix<f64>) {
    for (j, &dj) in d.iter().enumerate() {
        y.column_mut(j).axpy(dj, &u.column(j), 1.0);
    }
}

/// Intermediates of the real-part forward pass of one head.
#[derive(Debug, Clone)]
pub(crate) struct HeadCache {
    pub lambda: CVector,
    pub lambda_bar: CVector,
    pub gain: CVector,
    /// Real kernel per state: `Re(λ̄_i^m) Re(g_i)` in real-part mode,
    /// `Re(g_i λ̄_i^m)` in complex mode.
    pub kernel: Vec<Vec<f64>>,
    /// Projected input per state, `w_i[k] = (B u_k)_i`.
    pub proj: Vec<Vec<f64>>,
    pub states: DMatrix<f64>,
    pub plan: RealConvPlan,
}

/// FFT forward pass in real arithmetic. `B` and `C` are real, so with
/// `w = B u` the output needs only the real part of each state channel.
/// Real-part mode gives `Re(K) * (Re(g) w)`; complex mode gives
/// `Re(x) = Re(g K) * w` exactly.
pub(crate) fn real_head_forward(
    sys: &DiagonalSystem,
    u: &DMatrix<f64>,
    bidirectional: bool,
    mode: KernelMode,
) -> (DMatrix<f64>, HeadCache) {
    let len = u.nrows();
    let n = sys.state_dim();
    let lambda = sys.lambda.clone();
    let lambda_bar = CVector::from_fn(n, |i, _| (lambda[i] * sys.delta[i]).exp());
    let gain = CVector::from_fn(n, |i, _| zoh_gain(lambda[i], sys.delta[i]));
    let kernel: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let g = gain[i];
            let mut p = Complex64::new(1.0, 0.0);
            (0..len)
                .map(|_| {
                    let v = match mode {
                        KernelMode::RealPart => p.re * g.re,
                        KernelMode::Complex => (p * g).re,
                    };
                    p *= lambda_bar[i];
                    v
                })
                .collect()
        })
        .collect();
    let w = u * sys.b.transpose();
    let proj: Vec<Vec<f64>> = (0..n)
        .map(|i| w.column(i).iter().copied().collect())
        .collect();
    let plan = RealConvPlan::new(crate::fft::next_pow2(2 * len - 1));
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut x = causal_conv_real(&plan, &kernel[i], &proj[i]);
            if bidirectional {
                let rev: Vec<f64> = proj[i].iter().rev().copied().collect();
                let back = causal_conv_real(&plan, &kernel[i], &rev);
                x.iter_mut()
                    .zip(back.iter().rev())
                    .for_each(|(a, b)| *a += b);
            }
            x
        })
        .collect();
    let states = DMatrix::from_iterator(len, n, cols.into_iter().flatten());
    let mut y = &states * sys.c.transpose();
    add_feedthrough(&mut y, &sys.d, u);
    (
        y,
        HeadCache {
            lambda,
            lambda_bar,
            gain,
            kernel,
            proj,
            states,
            plan,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// `GELU(y) ⊙ σ(W GELU(y))`.
    #[default]
    Gated,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormKind {
    None,
    /// Per feature, over the time steps of the sequence.
    #[default]
    Batch,
    /// Per time step, over features.
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormPlacement {
    Pre,
    #[default]
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerConfig {
    pub heads: usize,
    pub bidirectional: bool,
    pub mode: KernelMode,
    pub algorithm: ConvAlgorithm,
    pub activation: Activation,
    pub residual: bool,
    pub norm: NormKind,
    pub placement: NormPlacement,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            heads: 1,
            bidirectional: false,
            mode: KernelMode::RealPart,
            algorithm: ConvAlgorithm::Fft,
            activation: Activation::Gated,
            residual: true,
            norm: NormKind::Batch,
            placement: NormPlacement::Post,
        }
    }
}

impl LayerConfig {
    /// Heads and mixer only: no activation, residual or normalization.
    pub fn plain(heads: usize) -> Self {
        Self {
            heads,
            activation: Activation::Identity,
            residual: false,
            norm: NormKind::None,
            ..Self::default()
        }
    }

    fn head_options(&self) -> HeadOptions {
        HeadOptions {
            bidirectional: self.bidirectional,
            mode: self.mode,
            algorithm: self.algorithm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadLayer {
    pub heads: Vec<EssmHead>,
    pub mixer_w: DMatrix<f64>,
    pub mixer_b: DVector<f64>,
    pub gate_w: DMatrix<f64>,
    pub config: LayerConfig,
}

fn check_divisible(h: usize, n: usize, m: usize, s: usize) -> Result<()> {
    if s == 0 || !h.is_multiple_of(s) || !n.is_multiple_of(s) || !m.is_multiple_of(s) {
        return Err(EssmError::InvalidHeadCount(format!(
            "{s} heads must divide H={h}, N={n} and M={m}"
        )));
    }
    if h == 0 || n == 0 || m == 0 {
        return Err(EssmError::InvalidShape(
            "H, N and M must be positive".into(),
        ));
    }
    Ok(())
}

impl MultiHeadLayer {
    /// HiPPO-initialized heads, `N(0, 1/M)` mixer and gate weights, zero bias.
    pub fn init(h: usize, n: usize, m: usize, config: LayerConfig, seed: u64) -> Result<Self> {
        let s = config.heads;
        check_divisible(h, n, m, s)?;
        let heads = (0..s)
            .map(|j| {
                let init = hippo::init_bundle(
                    n / s,
                    h / s,
                    m / s,
                    DEFAULT_DELTA_RANGE,
                    seed.wrapping_add(j as u64 * 7919),
                )?;
                Ok(EssmHead::from_init(&init, DEFAULT_FLOOR))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f1_a7e5);
        let dist = Normal::new(0.0, 1.0 / (m as f64).sqrt()).expect("valid std");
        let mixer_w = DMatrix::from_fn(m, m, |_, _| dist.sample(&mut rng));
        let gate_w = DMatrix::from_fn(m, m, |_, _| dist.sample(&mut rng));
        Ok(Self {
            heads,
            mixer_w,
            mixer_b: DVector::zeros(m),
            gate_w,
            config,
        })
    }

    /// Builds a layer from explicit heads; the mixer must be `M x M`.
    pub fn from_heads(
        heads: Vec<EssmHead>,
        mixer_w: DMatrix<f64>,
        mixer_b: DVector<f64>,
        gate_w: DMatrix<f64>,
        config: LayerConfig,
    ) -> Result<Self> {
        let layer = Self {
            heads,
            mixer_w,
            mixer_b,
            gate_w,
            config,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.heads.len();
        if s == 0 || s != self.config.heads {
            return Err(EssmError::InvalidHeadCount(format!(
                "config declares {} heads, layer has {s}",
                self.config.heads
            )));
        }
        let first = &self.heads[0];
        let (n, h, m) = (first.state_dim(), first.input_dim(), first.output_dim());
        for head in &self.heads {
            if head.state_dim() != n || head.input_dim() != h || head.output_dim() != m {
                return Err(EssmError::InvalidShape(
                    "heads must share their sizes".into(),
                ));
            }
            head.system().validate()?;
        }
        let mm = m * s;
        if self.mixer_w.shape() != (mm, mm) {
            return Err(shape_err("mixer W", (mm, mm), self.mixer_w.shape()));
        }
        if self.mixer_b.len() != mm {
            return Err(shape_err("mixer b", (mm, 1), (self.mixer_b.len(), 1)));
        }
        if self.gate_w.shape() != (mm, mm) {
            return Err(shape_err("gate W", (mm, mm), self.gate_w.shape()));
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }
    pub fn input_dim(&self) -> usize {
        self.heads.iter().map(EssmHead::input_dim).sum()
    }
    pub fn state_dim(&self) -> usize {
        self.heads.iter().map(EssmHead::state_dim).sum()
    }
    pub fn output_dim(&self) -> usize {
        self.heads.iter().map(EssmHead::output_dim).sum()
    }

    /// Multiplies every step size by `factor`.
    pub fn scale_delta(&mut self, factor: f64) {
        for head in &mut self.heads {
            head.delta *= factor;
        }
    }

    pub fn param_count(&self) -> ParamBreakdown {
        count_params(
            self.input_dim(),
            self.state_dim(),
            self.output_dim(),
            self.num_heads(),
            self.config.bidirectional,
        )
        .expect("a valid layer has divisible sizes")
    }

    /// The composite system whose matrices are the direct sums of the heads'.
    /// Requires `M = H` so the composite feedthrough stays diagonal.
    pub fn block_diagonal_system(&self) -> Result<DiagonalSystem> {
        let (h, n, m) = (self.input_dim(), self.state_dim(), self.output_dim());
        if m != h {
            return Err(EssmError::InvalidWidth(format!(
                "direct-sum feedthrough is diagonal only for M = H (M={m}, H={h})"
            )));
        }
        let mut lambda = CVector::zeros(n);
        let mut b = DMatrix::zeros(n, h);
        let mut c = DMatrix::zeros(m, n);
        let mut d = DVector::zeros(m);
        let mut delta = DVector::zeros(n);
        let (mut r0, mut c0, mut o0) = (0, 0, 0);
        for head in &self.heads {
            let sys = head.system();
            let (hn, hh, hm) = (head.state_dim(), head.input_dim(), head.output_dim());
            lambda.rows_mut(r0, hn).copy_from(&sys.lambda);
            delta.rows_mut(r0, hn).copy_from(&sys.delta);
            b.view_mut((r0, c0), (hn, hh)).copy_from(&sys.b);
            c.view_mut((o0, r0), (hm, hn)).copy_from(&sys.c);
            d.rows_mut(o0, hm).copy_from(&sys.d);
            r0 += hn;
            c0 += hh;
            o0 += hm;
        }
        DiagonalSystem::new(lambda, b, c, d, delta)
    }

    fn check_input(&self, u: &DMatrix<f64>) -> Result<()> {
        if u.ncols() != self.input_dim() {
            return Err(EssmError::InvalidHeadCount(format!(
                "input has {} features; {} heads of width {} expect {}",
                u.ncols(),
                self.num_heads(),
                self.heads[0].input_dim(),
                self.input_dim()
            )));
        }
        if u.nrows() == 0 {
            return Err(EssmError::InvalidLength("input sequence is empty".into()));
        }
        Ok(())
    }

    /// Head outputs concatenated along features, before the mixer.
    pub(crate) fn heads_forward(
        &self,
        u: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, Option<Vec<HeadCache>>)> {
        let len = u.nrows();
        let hh = self.heads[0].input_dim();
        let real_path =
            self.config.mode == KernelMode::RealPart && self.config.algorithm == ConvAlgorithm::Fft;
        let results: Vec<Result<(DMatrix<f64>, Option<HeadCache>)>> = self
            .heads
            .par_iter()
            .enumerate()
            .map(|(j, head)| {
                let uj = u.columns(j * hh, hh).into_owned();
                let sys = head.system();
                if real_path {
                    let (y, cache) = real_head_forward(
                        &sys,
                        &uj,
                        self.config.bidirectional,
                        KernelMode::RealPart,
                    );
                    Ok((y, Some(cache)))
                } else {
                    Ok((
                        head_forward_with(&sys, &uj, self.config.head_options())?,
                        None,
                    ))
                }
            })
            .collect();
        let mut y = DMatrix::zeros(len, self.output_dim());
        let mut caches = real_path.then(Vec::new);
        let mut col = 0;
        for r in results {
            let (yj, cache) = r?;
            y.columns_mut(col, yj.ncols()).copy_from(&yj);
            col += yj.ncols();
            if let (Some(cs), Some(c)) = (caches.as_mut(), cache) {
                cs.push(c);
            }
        }
        Ok((y, caches))
    }

    pub(crate) fn forward_cached(&self, u: &DMatrix<f64>) -> Result<(DMatrix<f64>, LayerCache)> {
        self.check_input(u)?;
        let cfg = self.config;
        if cfg.residual && self.output_dim() != self.input_dim() {
            return Err(EssmError::InvalidWidth(format!(
                "residual connection needs M = H, got M={}, H={}",
                self.output_dim(),
                self.input_dim()
            )));
        }
        let pre = cfg.placement == NormPlacement::Pre && cfg.norm != NormKind::None;
        let u_in = if pre {
            normalize(u, cfg.norm).0
        } else {
            u.clone()
        };
        let (y, heads) = self.heads_forward(&u_in)?;
        let z = mix(&y, &self.mixer_w, &self.mixer_b);
        let (act, gate) = match cfg.activation {
            Activation::Identity => (z.clone(), None),
            Activation::Gated => {
                let g = z.map(gelu);
                let s = (&g * self.gate_w.transpose()).map(sigmoid);
                (g.component_mul(&s), Some((g, s)))
            }
        };
        let r = if cfg.residual { u + &act } else { act };
        let post = cfg.placement == NormPlacement::Post && cfg.norm != NormKind::None;
        let (out, norm) = if post {
            let (o, inv) = normalize(&r, cfg.norm);
            (o.clone(), Some((o, inv)))
        } else {
            (r, None)
        };
        Ok((
            out,
            LayerCache {
                u_in,
                y,
                z,
                gate,
                heads,
                norm,
            },
        ))
    }
}

/// Saved activations of one layer forward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub u_in: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// `(GELU(z), σ(W GELU(z)))` for the gated activation.
    pub gate: Option<(DMatrix<f64>, DMatrix<f64>)>,
    pub heads: Option<Vec<HeadCache>>,
    /// Post-norm output and inverse standard deviations.
    pub norm: Option<(DMatrix<f64>, Vec<f64>)>,
}

fn mix(y: &DMatrix<f64>, w: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut z = y * w.transpose();
    for mut row in z.row_iter_mut() {
        row += b.transpose();
    }
    z
}

/// Splits `u` into per-head feature groups, runs each head, concatenates and
/// applies the mixer `y -> W y + b`.
pub fn multi_head_forward(layer: &MultiHeadLayer, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    layer.check_input(u)?;
    let (y, _) = layer.heads_forward(u)?;
    Ok(mix(&y, &layer.mixer_w, &layer.mixer_b))
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `GELU(y_k) ⊙ σ(W GELU(y_k))` for every step.
pub fn gated_activation(y: &DMatrix<f64>, gate_w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if gate_w.shape() != (y.ncols(), y.ncols()) {
        return Err(shape_err("gate W", (y.ncols(), y.ncols()), gate_w.shape()));
    }
    let g = y.map(gelu);
    let s = (&g * gate_w.transpose()).map(sigmoid);
    Ok(g.component_mul(&s))
}

/// Zero-mean, unit-variance normalization; returns the normalized matrix and
/// the inverse standard deviation of every normalized group.
pub(crate) fn normalize(x: &DMatrix<f64>, kind: NormKind) -> (DMatrix<f64>, Vec<f64>) {
    let mut out = x.clone();
    let mut inv = Vec::new();
    match kind {
        NormKind::None => {}
        NormKind::Batch => {
            for mut col in out.column_iter_mut() {
                inv.push(standardize(col.as_mut_slice()));
            }
        }
        NormKind::Layer => {
            for r in 0..out.nrows() {
                let mut row: Vec<f64> = out.row(r).iter().copied().collect();
                inv.push(standardize(&mut row));
                out.row_mut(r).iter_mut().zip(row).for_each(|(d, s)| *d = s);
            }
        }
    }
    (out, inv)
}

fn standardize(v: &mut [f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    v.iter_mut().for_each(|x| *x = (*x - mean) * inv);
    inv
}

/// `norm(u + act(mixer(heads(u))))`, or the pre-norm / no-residual variants
/// selected by the layer config.
pub fn layer_forward(layer: &MultiHeadLayer, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(layer.forward_cached(u)?.0)
}

/// Encoder, stacked layers, mean pooling over time, decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepModel {
    /// `H x H_in`.
    pub encoder: DMatrix<f64>,
    pub layers: Vec<MultiHeadLayer>,
    /// `classes x H`.
    pub decoder: DMatrix<f64>,
}

impl DeepModel {
    pub fn init(
        h_in: usize,
        h: usize,
        n: usize,
        classes: usize,
        depth: usize,
        config: LayerConfig,
        seed: u64,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                MultiHeadLayer::init(h, n, h, config, seed.wrapping_add(1000 * (i as u64 + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Normal::new(0.0, 1.0 / (h_in as f64).sqrt()).expect("valid std");
        let dec = Normal::new(0.0, 1.0 / (h as f64).sqrt()).expect("valid std");
        Ok(Self {
            encoder: DMatrix::from_fn(h, h_in, |_, _| enc.sample(&mut rng)),
            layers,
            decoder: DMatrix::from_fn(classes, h, |_, _| dec.sample(&mut rng)),
        })
    }
}

pub fn deep_forward(model: &DeepModel, u: &DMatrix<f64>) -> Result<DVector<f64>> {
    if u.ncols() != model.encoder.ncols() {
        return Err(shape_err(
            "model input",
            (u.nrows(), model.encoder.ncols()),
            u.shape(),
        ));
    }
    let mut x = u * model.encoder.transpose();
    for layer in &model.layers {
        x = layer_forward(layer, &x)?;
    }
    let pooled = x.row_mean().transpose();
    if model.decoder.ncols() != pooled.len() {
        return Err(shape_err(
            "decoder",
            (model.decoder.nrows(), pooled.len()),
            model.decoder.shape(),
        ));
    }
    Ok(&model.decoder * pooled)
}

/// Parameter totals of one layer, by tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub lambda: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
    pub delta: usize,
    pub mixer: usize,
    pub gate: usize,
}

impl ParamBreakdown {
    pub fn ssm(&self) -> usize {
        self.lambda + self.b + self.c + self.d + self.delta
    }

    pub fn total(&self) -> usize {
        self.ssm() + self.mixer + self.gate
    }
}

/// The bidirectional kernel reuses the forward parameters, so the flag does
/// not change any count.
pub fn count_params(
    h: usize,
    n: usize,
    m: usize,
    s: usize,
    _bidirectional: bool,
) -> Result<ParamBreakdown> {
    check_divisible(h, n, m, s)?;
    let (hn, hh, hm) = (n / s, h / s, m / s);
    Ok(ParamBreakdown {
        lambda: s * 2 * hn,
        b: s * hn * hh,
        c: s * hm * hn,
        d: s * hm.min(hh),
        delta: s * hn,
        mixer: m * m + m,
        gate: m * m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        DMatrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
    }

    #[test]
    fn enforce_examples() {
        let s = |r: f64, i: f64| StabilizedSpectrum {
            raw_real: DVector::from_element(1, r),
            imag: DVector::from_element(1, i),
            floor: DEFAULT_FLOOR,
        };
        assert_eq!(
            enforce_stability(&s(0.5, 2.0))[0],
            Complex64::new(-0.5, 2.0)
        );
        assert_eq!(
            enforce_stability(&s(-7.0, 0.0))[0],
            Complex64::new(-0.001, 0.0)
        );
        assert_eq!(
            enforce_stability(&s(0.001, -1.0))[0],
            Complex64::new(-0.001, -1.0)
        );
    }

    #[test]
    fn feedthrough_only() {
        let sys = DiagonalSystem::new(
            CVector::from_element(2, Complex64::new(-0.5, 1.0)),
            random_matrix(2, 3, 1),
            DMatrix::zeros(3, 2),
            DVector::from_element(3, 1.0),
            DVector::from_element(2, 0.05),
        )
        .unwrap();
        let u = random_matrix(10, 3, 2);
        let y = head_forward(&sys, &u, false).unwrap();
        assert!(linalg::max_abs(&(y - &u)) < 1e-15);
        let y = head_forward(&sys, &DMatrix::zeros(10, 3), true).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn real_path_matches_generic_real_part_convolution() {
        let init = hippo::init_bundle(4, 3, 2, DEFAULT_DELTA_RANGE, 9).unwrap();
        let sys = EssmHead::from_init(&init, DEFAULT_FLOOR).system();
        let u = random_matrix(33, 3, 4);
        for bidirectional in [false, true] {
            let fast = head_forward(&sys, &u, bidirectional).unwrap();
            for algorithm in [ConvAlgorithm::Fft, ConvAlgorithm::Direct] {
                let opts = HeadOptions {
                    bidirectional,
                    mode: KernelMode::RealPart,
                    algorithm,
                };
                let slow = head_forward_with(&sys, &u, opts).unwrap();
                assert!(linalg::rel_linf(&fast, &slow) < 1e-12);
            }
        }
    }

    #[test]
    fn gate_examples() {
        let w = random_matrix(3, 3, 5);
        let out = gated_activation(&DMatrix::zeros(4, 3), &w).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        let y = random_matrix(4, 3, 6);
        let out = gated_activation(&y, &DMatrix::zeros(3, 3)).unwrap();
        assert!(linalg::max_abs(&(out - y.map(gelu) * 0.5)) < 1e-15);
        let big = DMatrix::from_element(2, 3, 10.0);
        let out = gated_activation(&big, &DMatrix::identity(3, 3)).unwrap();
        assert!(out.iter().all(|&v| (v - 10.0).abs() < 1e-3));
    }

    #[test]
    fn gelu_reference_values() {
        // x Φ(x) with Φ(1) = 0.8413447460685429
        assert_abs_diff_eq!(gelu(1.0), 0.8413447460685429, epsilon = 1e-15);
        assert_abs_diff_eq!(gelu(-1.0), -0.15865525393145707, epsilon = 1e-15);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad(x), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn head_count_must_divide() {
        let cfg = LayerConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(matches!(
            MultiHeadLayer::init(4, 6, 6, cfg, 0),
            Err(EssmError::InvalidHeadCount(_))
        ));
        assert!(matches!(
            count_params(64, 64, 64, 3, false),
            Err(EssmError::InvalidHeadCount(_))
        ));
        let layer = MultiHeadLayer::init(
            4,
            4,
            4,
            LayerConfig {
                heads: 2,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert!(matches!(
            multi_head_forward(&layer, &DMatrix::zeros(5, 3)),
            Err(EssmError::InvalidHeadCount(_))
        ));
    }

    #[test]
    fn residual_needs_equal_width() {
        let cfg = LayerConfig {
            heads: 1,
            ..Default::default()
        };
        let layer = MultiHeadLayer::init(4, 4, 2, cfg, 0).unwrap();
        assert!(matches!(
            layer_forward(&layer, &DMatrix::zeros(5, 4)),
            Err(EssmError::InvalidWidth(_))
        ));
        let plain = MultiHeadLayer {
            config: LayerConfig::plain(1),
            ..layer
        };
        assert_eq!(
            layer_forward(&plain, &DMatrix::zeros(5, 4))
                .unwrap()
                .shape(),
            (5, 2)
        );
    }

    #[test]
    fn dead_ssm_path_is_normalized_passthrough() {
        for norm in [NormKind::Batch, NormKind::Layer, NormKind::None] {
            let cfg = LayerConfig {
                heads: 2,
                norm,
                ..Default::default()
            };
            let mut layer = MultiHeadLayer::init(4, 4, 4, cfg, 3).unwrap();
            for head in &mut layer.heads {
                head.c.fill(0.0);
            }
            layer.mixer_w.fill(0.0);
            let u = random_matrix(12, 4, 8);
            let out = layer_forward(&layer, &u).unwrap();
            let expect = normalize(&u, norm).0;
            assert!(linalg::max_abs(&(out - expect)) < 1e-14);
        }
    }

    #[test]
    fn batch_and_layer_norm_statistics() {
        let x = random_matrix(20, 3, 1) * 4.0;
        let (b, _) = normalize(&x, NormKind::Batch);
        for col in b.column_iter() {
            assert_abs_diff_eq!(col.mean(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(col.variance(), 1.0, epsilon = 1e-5);
        }
        let (l, _) = normalize(&x, NormKind::Layer);
        for row in l.row_iter() {
            assert_abs_diff_eq!(row.mean(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_head_is_one_mimo_system_plus_mixer() {
        let layer = MultiHeadLayer::init(3, 4, 3, LayerConfig::plain(1), 2).unwrap();
        let u = random_matrix(16, 3, 3);
        let y = head_forward(&layer.heads[0].system(), &u, false).unwrap();
        let expect = mix(&y, &layer.mixer_w, &layer.mixer_b);
        assert!(linalg::max_abs(&(multi_head_forward(&layer, &u).unwrap() - expect)) < 1e-14);
    }

    #[test]
    fn one_head_per_feature_is_stacked_siso() {
        let layer = MultiHeadLayer::init(4, 4, 4, LayerConfig::plain(4), 5).unwrap();
        for head in &layer.heads {
            assert_eq!(
                (head.input_dim(), head.state_dim(), head.output_dim()),
                (1, 1, 1)
            );
        }
        let u = random_matrix(10, 4, 1);
        let mut y = DMatrix::zeros(10, 4);
        for (j, head) in layer.heads.iter().enumerate() {
            let yj = head_forward(&head.system(), &u.columns(j, 1).into_owned(), false).unwrap();
            y.set_column(j, &yj.column(0));
        }
        let expect = mix(&y, &layer.mixer_w, &layer.mixer_b);
        assert!(linalg::max_abs(&(multi_head_forward(&layer, &u).unwrap() - expect)) < 1e-14);
    }

    #[test]
    fn param_counts() {
        for (s, b) in [(1, 4096), (4, 1024), (64, 64)] {
            let p = count_params(64, 64, 64, s, false).unwrap();
            assert_eq!(p.b, b);
            assert_eq!(p.c, b);
            assert_eq!(p, count_params(64, 64, 64, s, true).unwrap());
        }
        let totals: Vec<usize> = [4, 16, 64]
            .iter()
            .map(|&s| count_params(64, 64, 64, s, false).unwrap().total())
            .collect();
        assert!(totals[0] > totals[1] && totals[1] > totals[2]);
        let layer = MultiHeadLayer::init(
            8,
            8,
            8,
            LayerConfig {
                heads: 2,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let p = layer.param_count();
        let direct: usize = layer
            .heads
            .iter()
            .map(|h| 2 * h.spectrum.len() + h.b.len() + h.c.len() + h.d.len() + h.delta.len())
            .sum::<usize>()
            + layer.mixer_w.len()
            + layer.mixer_b.len()
            + layer.gate_w.len();
        assert_eq!(p.total(), direct);
    }

    #[test]
    fn delta_scaling() {
        let mut layer = MultiHeadLayer::init(2, 2, 2, LayerConfig::default(), 0).unwrap();
        let before = layer.heads[0].delta.clone();
        layer.scale_delta(2.0);
        assert_eq!(layer.heads[0].delta, before * 2.0);
    }

    #[test]
    fn deep_model_shapes_and_depth() {
        let cfg = LayerConfig {
            heads: 2,
            ..Default::default()
        };
        let mut one = DeepModel::init(4, 4, 4, 3, 1, cfg, 1).unwrap();
        one.encoder = DMatrix::identity(4, 4);
        let u = DMatrix::from_element(16, 4, 0.5);
        let out = deep_forward(&one, &u).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|v| v.is_finite()));

        // batch norm over time zeroes every feature mean, which mean pooling
        // would map to all-zero scores regardless of depth
        let cfg = LayerConfig {
            norm: NormKind::Layer,
            ..cfg
        };
        let shallow = DeepModel::init(4, 4, 4, 3, 1, cfg, 7).unwrap();
        let mut deep = shallow.clone();
        deep.layers
            .push(MultiHeadLayer::init(4, 4, 4, cfg, 99).unwrap());
        let x = random_matrix(16, 4, 2);
        let a = deep_forward(&shallow, &x).unwrap();
        let b = deep_forward(&deep, &x).unwrap();
        assert!((a - b).amax() > 1e-6);
    }

    #[test]
    fn complex_fft_fast_path_matches_direct() {
        let init = hippo::init_bundle(6, 3, 2, (0.05, 0.5), 12).unwrap();
        let sys = EssmHead::from_init(&init, DEFAULT_FLOOR).system();
        let u = random_matrix(40, 3, 13);
        for bidirectional in [false, true] {
            let opts = |algorithm| HeadOptions {
                bidirectional,
                mode: KernelMode::Complex,
                algorithm,
            };
            let fast = head_forward_with(&sys, &u, opts(ConvAlgorithm::Fft)).unwrap();
            let direct = head_forward_with(&sys, &u, opts(ConvAlgorithm::Direct)).unwrap();
            assert!(
                linalg::rel_linf(&fast, &direct) < 1e-12,
                "bidirectional={bidirectional}"
            );
        }
    }
}
