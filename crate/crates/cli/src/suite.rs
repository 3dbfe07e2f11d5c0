use essm::conv::{conv_direct, conv_fft, project_input, system_kernel};
use essm::layer::{count_params, LayerConfig, MultiHeadLayer};
use essm::linalg::{rel_linf_c, to_complex, CMatrix, CVector};
use essm::ssm::{discretize_zoh, recurrent_scan_diagonal};
use essm::train::{
    analytic_grad, finite_diff_layer_grad, fit_system_id, grad_rel_errors, layer_params,
    random_inputs, system_id_setup, TrainConfig,
};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Check, Command, HarnessError, Report, Result, RunConfig, Table};

pub const SWEEP_INSTANCES: usize = 200;
pub const SWEEP_LENGTHS: [usize; 6] = [1, 2, 3, 8, 64, 257];
pub const SWEEP_STATES: [usize; 3] = [1, 2, 5];
pub const SWEEP_INPUTS: [usize; 2] = [1, 3];
pub const FFT_DIRECT_TOL: f64 = 1e-9;
pub const RECURRENT_CONV_TOL: f64 = 1e-8;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPSILON: f64 = 1e-5;
pub const DEMO_TARGET_RATIO: f64 = 0.1;
pub const HEAD_COUNTS: [usize; 4] = [1, 4, 16, 64];

fn usage(e: essm::EssmError) -> HarnessError {
    HarnessError::Usage(e.to_string())
}

pub fn run_oracle_sweep(cfg: &RunConfig) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut table = Table::new(&[
        "instance",
        "L",
        "N",
        "H",
        "fft_vs_direct",
        "recurrent_vs_conv",
    ]);
    let (mut worst_fft, mut worst_rec) = (0.0f64, 0.0f64);
    for inst in 0..SWEEP_INSTANCES {
        let l = SWEEP_LENGTHS[inst % SWEEP_LENGTHS.len()];
        let n = SWEEP_STATES[(inst / SWEEP_LENGTHS.len()) % SWEEP_STATES.len()];
        let h =
            SWEEP_INPUTS[(inst / (SWEEP_LENGTHS.len() * SWEEP_STATES.len())) % SWEEP_INPUTS.len()];
        let lambda = CVector::from_fn(n, |_, _| {
            Complex64::new(-rng.random_range(0.01..2.0), rng.random_range(-5.0..5.0))
        });
        let delta = DVector::from_fn(n, |_, _| rng.random_range(0.001..0.1));
        let b = to_complex(&DMatrix::from_fn(n, h, |_, _| rng.random_range(-1.0..1.0)));
        let u = DMatrix::from_fn(l, h, |_, _| rng.random_range(-1.0..1.0));

        let disc = discretize_zoh(&lambda, &b, &delta)?;
        let kernel = system_kernel(&disc.lambda_bar, l)?;
        let pin = project_input(&disc.b_bar, &u)?;
        let direct = conv_direct(&kernel, &pin)?;
        let fast = conv_fft(&kernel, &pin)?;
        let scan = recurrent_scan_diagonal(
            &disc,
            &CMatrix::identity(n, n),
            &DMatrix::zeros(n, h),
            &u,
            None,
        )?;
        let e_fft = rel_linf_c(&fast, &direct);
        let e_rec = rel_linf_c(&scan.states, &direct).max(rel_linf_c(&scan.states, &fast));
        worst_fft = worst_fft.max(e_fft);
        worst_rec = worst_rec.max(e_rec);
        table.push(vec![
            inst.into(),
            l.into(),
            n.into(),
            h.into(),
            e_fft.into(),
            e_rec.into(),
        ]);
    }
    let mut report =
        Report::new(Command::OracleSweep, cfg.seed, table).size("instances", SWEEP_INSTANCES);
    report.checks.push(Check::at_most(
        "fft vs direct convolution",
        worst_fft,
        FFT_DIRECT_TOL,
    ));
    report.checks.push(Check::at_most(
        "recurrent vs convolutional states",
        worst_rec,
        RECURRENT_CONV_TOL,
    ));
    Ok(report)
}

pub fn run_params(cfg: &RunConfig) -> Result<Report> {
    let (n, h, m) = cfg.sizes_or(64, 64);
    let mut table = Table::new(&[
        "s",
        "bidirectional",
        "lambda",
        "b",
        "c",
        "d",
        "delta",
        "mixer",
        "gate",
        "ssm",
        "total",
        "materialized",
    ]);
    let mut report_checks = Vec::new();
    let mut totals = Vec::new();
    for s in HEAD_COUNTS
        .into_iter()
        .filter(|s| h % s == 0 && n % s == 0 && m % s == 0)
    {
        let mut per_dir = Vec::new();
        for bidirectional in [false, true] {
            let p = count_params(h, n, m, s, bidirectional)?;
            let config = LayerConfig {
                heads: s,
                bidirectional,
                residual: m == h,
                ..LayerConfig::default()
            };
            let layer = MultiHeadLayer::init(h, n, m, config, cfg.seed).map_err(usage)?;
            let materialized = layer_params(&layer).len();
            report_checks.push(Check::holds(
                format!("counted equals materialized (s={s}, bidirectional={bidirectional})"),
                materialized == p.total(),
            ));
            table.push(vec![
                s.into(),
                bidirectional.into(),
                p.lambda.into(),
                p.b.into(),
                p.c.into(),
                p.d.into(),
                p.delta.into(),
                p.mixer.into(),
                p.gate.into(),
                p.ssm().into(),
                p.total().into(),
                materialized.into(),
            ]);
            per_dir.push(p);
        }
        report_checks.push(Check::holds(
            format!("B block total is N*H/s (s={s})"),
            per_dir[0].b == n * h / s,
        ));
        report_checks.push(Check::holds(
            format!("C block total is M*N/s (s={s})"),
            per_dir[0].c == m * n / s,
        ));
        report_checks.push(Check::holds(
            format!("bidirectional adds nothing (s={s})"),
            per_dir[0] == per_dir[1],
        ));
        totals.push(per_dir[0].total());
    }
    report_checks.push(Check::holds(
        "totals strictly decrease in s",
        totals.windows(2).all(|w| w[1] < w[0]),
    ));
    let mut report = Report::new(Command::Params, cfg.seed, table)
        .size("N", n)
        .size("H", h)
        .size("M", m);
    report.checks = report_checks;
    Ok(report)
}

pub const GRADCHECK_MAX_WIDTH: usize = 4;
pub const GRADCHECK_MAX_LEN: usize = 16;

pub fn run_gradcheck(cfg: &RunConfig) -> Result<Report> {
    let (n, h, m) = cfg.sizes_or(4, 4);
    let len = cfg.lengths.first().copied().unwrap_or(GRADCHECK_MAX_LEN);
    if n.max(h).max(m) > GRADCHECK_MAX_WIDTH || len > GRADCHECK_MAX_LEN {
        return Err(HarnessError::Usage(format!(
            "gradcheck needs N, H, M <= {GRADCHECK_MAX_WIDTH} and L <= {GRADCHECK_MAX_LEN}"
        )));
    }
    let config = LayerConfig {
        heads: cfg.heads,
        bidirectional: cfg.bidirectional,
        residual: m == h,
        ..LayerConfig::default()
    };
    let layer = MultiHeadLayer::init(h, n, m, config, cfg.seed).map_err(usage)?;
    let u = &random_inputs(1, len, h, cfg.seed.wrapping_add(1))[0];
    let target = &random_inputs(1, len, m, cfg.seed.wrapping_add(2))[0];
    let (_, analytic) = analytic_grad(&layer, u, target)?;
    let numeric = finite_diff_layer_grad(&layer, u, target, GRAD_EPSILON)?;
    let mut table = Table::new(&["tensor", "max_rel_error"]);
    let mut report = Report::new(Command::Gradcheck, cfg.seed, Table::new(&[]));
    for (name, err) in grad_rel_errors(&analytic, &numeric) {
        table.push(vec![name.into(), err.into()]);
        report
            .checks
            .push(Check::at_most(format!("gradient {name}"), err, GRAD_TOL));
    }
    report.table = table;
    Ok(report
        .size("L", len)
        .size("N", n)
        .size("H", h)
        .size("M", m)
        .size("s", cfg.heads))
}

pub fn run_train_demo(cfg: &RunConfig) -> Result<Report> {
    let (n, h, _) = cfg.sizes_or(4, 4);
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        steps: cfg.steps.unwrap_or(defaults.steps),
        learning_rate: cfg.learning_rate.unwrap_or(defaults.learning_rate),
        seed: cfg.seed,
        seq_len: cfg.lengths.first().copied().unwrap_or(defaults.seq_len),
        ..defaults
    };
    let setup = system_id_setup(n, h, cfg.seed).map_err(usage)?;
    let fit = fit_system_id(&setup.teacher, setup.student, &train)?;
    let mut table = Table::new(&["step", "loss"]);
    for (k, &loss) in fit.losses.iter().enumerate() {
        table.push(vec![k.into(), loss.into()]);
    }
    let mut report = Report::new(Command::TrainDemo, cfg.seed, table)
        .size("L", train.seq_len)
        .size("N", n)
        .size("H", h)
        .size("steps", train.steps)
        .size("lr", train.learning_rate);
    report.checks.push(Check::at_most(
        "final/initial loss",
        fit.reduction(),
        DEMO_TARGET_RATIO,
    ));
    Ok(report)
}
