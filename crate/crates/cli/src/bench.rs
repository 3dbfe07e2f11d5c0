//! Forward-pass timing of three ways to run the same SSM layer.
//!
//! `vanilla-recurrent-full` steps a dense real state matrix. It is the
//! realification of the diagonal head (each complex mode becomes a 2x2
//! rotation-scaling block) conjugated by a random orthogonal matrix, so all
//! strategies compute identical outputs and only the algorithm differs.

use std::time::Instant;

use essm::conv::{conv_direct, conv_fft, project_input, system_kernel, KernelMode};
use essm::hippo::{init_bundle, DEFAULT_DELTA_RANGE};
use essm::layer::{
    count_params, head_forward_with, ConvAlgorithm, EssmHead, HeadOptions, DEFAULT_FLOOR,
};
use essm::linalg::to_complex;
use essm::ssm::{recurrent_scan_diagonal, recurrent_scan_full, DiagonalSystem, DiscreteFull};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Cell, Check, Command, HarnessError, Report, Result, RunConfig, Table};

pub const DEFAULT_LENGTHS: [usize; 6] = [256, 512, 1024, 2048, 4096, 8192];
pub const REPETITIONS: usize = 15;
/// Work cap `L * N` for the dense recurrence.
pub const VANILLA_CAP: usize = 1 << 20;
pub const FFT_RATIO_LIMIT: f64 = 6.0;
pub const DIRECT_RATIO_FLOOR: f64 = 10.0;
pub const SCALING_LENGTHS: (usize, usize) = (2048, 8192);
pub const SCALING_WIDTH: usize = 8;
pub const ORDERING_LENGTH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    VanillaRecurrentFull,
    DiagonalRecurrent,
    DiagonalFft,
    /// The state convolution operator alone, FFT algorithm.
    ConvFft,
    /// The state convolution operator alone, direct summation.
    ConvDirect,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::VanillaRecurrentFull => "vanilla-recurrent-full",
            Strategy::DiagonalRecurrent => "diagonal-recurrent",
            Strategy::DiagonalFft => "diagonal-fft",
            Strategy::ConvFft => "conv-fft",
            Strategy::ConvDirect => "conv-direct",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub strategy: Strategy,
    pub l: usize,
    pub n: usize,
    pub h: usize,
    pub wall_seconds: f64,
    pub params: usize,
}

/// A HiPPO-initialized head together with its dense equivalent.
#[derive(Debug, Clone)]
pub struct BenchSystem {
    pub diagonal: DiagonalSystem,
    pub dense: DiscreteFull,
}

impl BenchSystem {
    pub fn new(n: usize, h: usize, seed: u64) -> Result<Self> {
        let init = init_bundle(n, h, h, DEFAULT_DELTA_RANGE, seed)?;
        let diagonal = EssmHead::from_init(&init, DEFAULT_FLOOR).system();
        let dense = dense_realification(&diagonal, seed)?;
        Ok(Self { diagonal, dense })
    }

    pub fn run(&self, strategy: Strategy, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let sys = &self.diagonal;
        let complex = |algorithm| HeadOptions {
            bidirectional: false,
            mode: KernelMode::Complex,
            algorithm,
        };
        Ok(match strategy {
            Strategy::VanillaRecurrentFull => recurrent_scan_full(&self.dense, u, None)?.outputs,
            Strategy::DiagonalRecurrent => {
                let disc = sys.discretize()?;
                recurrent_scan_diagonal(&disc, &to_complex(&sys.c), &sys.feedthrough(), u, None)?
                    .outputs
            }
            Strategy::DiagonalFft | Strategy::ConvFft => {
                head_forward_with(sys, u, complex(ConvAlgorithm::Fft))?
            }
            Strategy::ConvDirect => head_forward_with(sys, u, complex(ConvAlgorithm::Direct))?,
        })
    }

    pub fn params(&self, strategy: Strategy) -> Result<usize> {
        let (n, h, m) = (
            self.diagonal.state_dim(),
            self.diagonal.input_dim(),
            self.diagonal.output_dim(),
        );
        Ok(match strategy {
            Strategy::VanillaRecurrentFull => {
                let nr = 2 * n;
                nr * nr + nr * h + m * nr + m.min(h)
            }
            _ => count_params(h, n, m, 1, false)?.ssm(),
        })
    }
}

/// Dense real system with the same input-output map as the discretized
/// diagonal head. The state is `Q [Re x_1, Im x_1, ..., Re x_N, Im x_N]`.
pub fn dense_realification(sys: &DiagonalSystem, seed: u64) -> Result<DiscreteFull> {
    let disc = sys.discretize()?;
    let (n, h, m) = (sys.state_dim(), sys.input_dim(), sys.output_dim());
    let nr = 2 * n;
    let mut a = DMatrix::zeros(nr, nr);
    let mut b = DMatrix::zeros(nr, h);
    let mut c = DMatrix::zeros(m, nr);
    for i in 0..n {
        let z = disc.lambda_bar[i];
        let (r, s) = (2 * i, 2 * i + 1);
        a[(r, r)] = z.re;
        a[(r, s)] = -z.im;
        a[(s, r)] = z.im;
        a[(s, s)] = z.re;
        for j in 0..h {
            b[(r, j)] = disc.b_bar[(i, j)].re;
            b[(s, j)] = disc.b_bar[(i, j)].im;
        }
        for o in 0..m {
            c[(o, r)] = sys.c[(o, i)];
        }
    }
    let q = random_orthogonal(nr, seed);
    Ok(DiscreteFull {
        a_bar: &q * a * q.transpose(),
        b_bar: &q * b,
        c: c * q.transpose(),
        d: sys.feedthrough(),
    })
}

fn random_orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a7_0a7);
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    g.qr().q()
}

/// A timed workload with its inputs already prepared.
pub type Job<'a> = Box<dyn FnMut() -> Result<()> + Send + 'a>;

/// Wall times of each job over `reps` rounds after one warm-up round, on a
/// single worker thread. Every round runs all jobs once, so slow periods of
/// a shared machine hit all of them alike. `result[j][r]` is job `j` in
/// round `r`. Each sample is one call, as a forward pass inside a pipeline
/// would see the caches.
pub fn time_interleaved(reps: usize, jobs: &mut [Job<'_>]) -> Result<Vec<Vec<f64>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| HarnessError::Usage(format!("cannot build timing pool: {e}")))?;
    pool.install(|| {
        for job in jobs.iter_mut() {
            job()?;
        }
        let mut times = vec![Vec::with_capacity(reps); jobs.len()];
        for _ in 0..reps.max(1) {
            for (job, t) in jobs.iter_mut().zip(&mut times) {
                let t0 = Instant::now();
                job()?;
                t.push(t0.elapsed().as_secs_f64().max(1e-9));
            }
        }
        Ok(times)
    })
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Median over rounds of `long[r] / short[r]`.
pub fn paired_ratio(short: &[f64], long: &[f64]) -> f64 {
    let ratios: Vec<f64> = short.iter().zip(long).map(|(a, b)| b / a).collect();
    median(&ratios)
}

fn bench_input(len: usize, h: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(len as u64));
    DMatrix::from_fn(len, h, |_, _| StandardNormal.sample(&mut rng))
}

/// Forward pass of `strategy` at length `len`. The convolution strategies
/// time only the operator, with kernel and projected input precomputed.
fn job<'a>(sys: &'a BenchSystem, strategy: Strategy, len: usize, seed: u64) -> Result<Job<'a>> {
    let u = bench_input(len, sys.diagonal.input_dim(), seed);
    Ok(match strategy {
        Strategy::ConvFft | Strategy::ConvDirect => {
            let disc = sys.diagonal.discretize()?;
            let kernel = system_kernel(&disc.lambda_bar, len)?;
            let pin = project_input(&disc.b_bar, &u)?;
            let op = if strategy == Strategy::ConvFft {
                conv_fft
            } else {
                conv_direct
            };
            Box::new(move || op(&kernel, &pin).map(drop).map_err(Into::into))
        }
        _ => Box::new(move || sys.run(strategy, &u).map(drop)),
    })
}

fn find(records: &[BenchRecord], strategy: Strategy, l: usize, n: usize) -> Option<usize> {
    records
        .iter()
        .position(|r| r.strategy == strategy && r.l == l && r.n == n)
}

pub fn run_bench(cfg: &RunConfig) -> Result<Report> {
    let (n, h, _) = cfg.sizes_or(64, 64);
    let lengths = if cfg.lengths.is_empty() {
        DEFAULT_LENGTHS.to_vec()
    } else {
        cfg.lengths.clone()
    };
    let sys = BenchSystem::new(n, h, cfg.seed)?;
    let mut records = Vec::new();
    let mut checks = Vec::new();

    // strategies must agree before their timings mean anything
    let probe = bench_input(64.min(lengths[0]), h, cfg.seed);
    let reference = sys.run(Strategy::DiagonalFft, &probe)?;
    let scale = reference.amax().max(1e-300);
    for s in [Strategy::VanillaRecurrentFull, Strategy::DiagonalRecurrent] {
        let dev = (sys.run(s, &probe)? - &reference).amax() / scale;
        checks.push(Check::at_most(
            format!("{} output matches diagonal-fft", s.name()),
            dev,
            1e-8,
        ));
    }

    let (short, long) = SCALING_LENGTHS;
    let small = BenchSystem::new(SCALING_WIDTH, SCALING_WIDTH, cfg.seed)?;
    let mut plan: Vec<(&BenchSystem, Strategy, usize)> = Vec::new();
    for strategy in [
        Strategy::VanillaRecurrentFull,
        Strategy::DiagonalRecurrent,
        Strategy::DiagonalFft,
    ] {
        for &len in &lengths {
            if strategy == Strategy::VanillaRecurrentFull && len * n > VANILLA_CAP {
                eprintln!(
                    "warning: skipping {} at L={len}, N={n}: L*N exceeds {VANILLA_CAP}",
                    strategy.name()
                );
                continue;
            }
            plan.push((&sys, strategy, len));
        }
    }
    let scaling = lengths.contains(&short) && lengths.contains(&long);
    if scaling {
        for strategy in [Strategy::ConvFft, Strategy::ConvDirect] {
            plan.push((&small, strategy, short));
            plan.push((&small, strategy, long));
        }
    }
    let mut jobs = plan
        .iter()
        .map(|&(s, strategy, len)| job(s, strategy, len, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let times = time_interleaved(REPETITIONS, &mut jobs)?;
    drop(jobs);
    for (&(s, strategy, len), samples) in plan.iter().zip(&times) {
        records.push(BenchRecord {
            strategy,
            l: len,
            n: s.diagonal.state_dim(),
            h: s.diagonal.input_dim(),
            wall_seconds: median(samples),
            params: s.params(strategy)?,
        });
    }

    let ratio = |s, n| {
        Some(paired_ratio(
            &times[find(&records, s, short, n)?],
            &times[find(&records, s, long, n)?],
        ))
    };
    if let Some(r) = ratio(Strategy::DiagonalFft, n) {
        checks.push(Check::at_most(
            format!("diagonal-fft time ratio L={long}/L={short}"),
            r,
            FFT_RATIO_LIMIT,
        ));
    }
    if scaling {
        let fft = ratio(Strategy::ConvFft, SCALING_WIDTH).unwrap_or(f64::NAN);
        let direct = ratio(Strategy::ConvDirect, SCALING_WIDTH).unwrap_or(f64::NAN);
        checks.push(Check::at_most(
            format!("conv-fft time ratio L={long}/L={short}"),
            fft,
            FFT_RATIO_LIMIT,
        ));
        checks.push(Check::at_least(
            format!("conv-direct time ratio L={long}/L={short}"),
            direct,
            DIRECT_RATIO_FLOOR,
        ));
    }
    let at = |s| find(&records, s, ORDERING_LENGTH, n).map(|i| records[i].wall_seconds);
    if let (Some(v), Some(d), Some(f)) = (
        at(Strategy::VanillaRecurrentFull),
        at(Strategy::DiagonalRecurrent),
        at(Strategy::DiagonalFft),
    ) {
        checks.push(Check::holds(
            format!("ordering vanilla > diagonal-recurrent > diagonal-fft at L={ORDERING_LENGTH}"),
            v > d && d > f,
        ));
    }

    let mut table = Table::new(&["strategy", "L", "N", "H", "wall_seconds", "params"]);
    for r in &records {
        table.push(vec![
            Cell::from(r.strategy.name()),
            r.l.into(),
            r.n.into(),
            r.h.into(),
            r.wall_seconds.into(),
            r.params.into(),
        ]);
    }
    let mut report = Report::new(Command::Bench, cfg.seed, table)
        .size("L", &lengths)
        .size("N", n)
        .size("H", h)
        .size("repetitions", REPETITIONS);
    report.checks = checks;
    Ok(report)
}
