//! Acceptance gate: one line per criterion, non-zero exit if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use essm::conv::{causality_probe, KernelMode};
use essm::hippo::hippo_normal_matrix;
use essm::layer::{
    head_forward, head_forward_with, layer_forward, Activation, ConvAlgorithm, HeadOptions,
    LayerConfig, MultiHeadLayer,
};
use essm::linalg::{eig_general, rel_linf, to_complex};
use essm::ssm::recurrent_scan_diagonal;
use essm::train::random_inputs;
use essm_harness::{run, Command, Report, RunConfig};
use nalgebra::{DMatrix, DVector};

struct Outcome {
    passed: bool,
    detail: String,
}

fn from_report(report: &Report) -> Outcome {
    let failures: Vec<String> = report.failures().iter().map(|c| c.to_string()).collect();
    let detail = if failures.is_empty() {
        report
            .checks
            .iter()
            .filter(|c| c.value.is_some())
            .map(|c| format!("{}={:.3e}", c.name, c.value.unwrap_or_default()))
            .collect::<Vec<_>>()
            .join("; ")
    } else {
        failures.join("; ")
    };
    let detail = if detail.is_empty() {
        format!("{} checks passed", report.checks.len())
    } else {
        detail
    };
    Outcome {
        passed: report.passed(),
        detail,
    }
}

fn command(cmd: Command, tweak: impl FnOnce(&mut RunConfig)) -> Outcome {
    let mut cfg = RunConfig::new(cmd);
    tweak(&mut cfg);
    match run(&cfg) {
        Ok(report) => from_report(&report),
        Err(e) => Outcome {
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn hippo_spectrum() -> Outcome {
    let mut worst = 0.0f64;
    for n in [2, 4, 8, 16] {
        let a = hippo_normal_matrix(n).expect("positive size").entries;
        let (values, _) = eig_general(&a).expect("eigenvalues exist");
        worst = values
            .iter()
            .map(|z| (z.re + 0.5).abs())
            .fold(worst, f64::max);
    }
    Outcome {
        passed: worst <= 1e-9,
        detail: format!("max |Re(lambda) + 0.5| = {worst:.3e}"),
    }
}

fn gradients() -> Outcome {
    let variants: [(&str, fn(&mut RunConfig)); 3] = [
        ("default", |_| {}),
        ("bidirectional", |c| c.bidirectional = true),
        ("two heads", |c| c.heads = 2),
    ];
    let mut details = Vec::new();
    let mut passed = true;
    for (name, tweak) in variants {
        let o = command(Command::Gradcheck, tweak);
        passed &= o.passed;
        if !o.passed {
            details.push(format!("{name}: {}", o.detail));
        }
    }
    let detail = if passed {
        "all tensors within 1e-4 in 3 configurations".into()
    } else {
        details.join(" | ")
    };
    Outcome { passed, detail }
}

fn causality() -> Outcome {
    let (h, n, len) = (4, 4, 48);
    let u = &random_inputs(1, len, h, 11)[0];
    let ks = [1usize, 7, 24, 47];
    let causal = |bidirectional: bool| LayerConfig {
        bidirectional,
        algorithm: ConvAlgorithm::Direct,
        activation: Activation::Gated,
        ..LayerConfig::plain(2)
    };

    let layer = MultiHeadLayer::init(h, n, h, causal(false), 5).expect("valid sizes");
    let layer_ok = ks
        .iter()
        .all(|&k| causality_probe(|x| layer_forward(&layer, x).expect("forward"), u, k));

    let sys = layer.heads[0].system();
    let disc = sys.discretize().expect("discretize");
    let c = to_complex(&sys.c);
    let feed = sys.feedthrough();
    let half = u.columns(0, sys.input_dim()).into_owned();
    let scan_ok = ks.iter().all(|&k| {
        causality_probe(
            |x| {
                recurrent_scan_diagonal(&disc, &c, &feed, x, None)
                    .expect("scan")
                    .outputs
            },
            &half,
            k,
        )
    });
    let complex_ok = ks.iter().all(|&k| {
        let opts = HeadOptions {
            bidirectional: false,
            mode: KernelMode::Complex,
            algorithm: ConvAlgorithm::Direct,
        };
        causality_probe(
            |x| head_forward_with(&sys, x, opts).expect("forward"),
            &half,
            k,
        )
    });

    let bidir = MultiHeadLayer::init(h, n, h, causal(true), 5).expect("valid sizes");
    let bidir_leaks = ks
        .iter()
        .all(|&k| !causality_probe(|x| layer_forward(&bidir, x).expect("forward"), u, k));

    Outcome {
        passed: layer_ok && scan_ok && complex_ok && bidir_leaks,
        detail: format!(
            "causal layer unchanged={layer_ok}, recurrent unchanged={scan_ok}, complex kernel unchanged={complex_ok}, bidirectional changed={bidir_leaks}"
        ),
    }
}

fn block_diagonal() -> Outcome {
    let (h, n, len) = (8, 8, 64);
    let u = &random_inputs(1, len, h, 21)[0];
    let mut worst = 0.0f64;
    for s in [1, 2, 4] {
        for bidirectional in [false, true] {
            let cfg = LayerConfig {
                bidirectional,
                ..LayerConfig::plain(s)
            };
            let mut layer =
                MultiHeadLayer::init(h, n, h, cfg, 100 + s as u64).expect("valid sizes");
            layer.mixer_w = DMatrix::identity(h, h);
            layer.mixer_b = DVector::zeros(h);
            let multi = layer_forward(&layer, u).expect("forward");
            let mono = head_forward(
                &layer.block_diagonal_system().expect("M = H"),
                u,
                bidirectional,
            )
            .expect("forward");
            worst = worst.max(rel_linf(&multi, &mono));
        }
    }
    Outcome {
        passed: worst <= 1e-10,
        detail: format!("max relative deviation {worst:.3e} over s in {{1,2,4}}"),
    }
}

fn main() -> ExitCode {
    type Criterion = (&'static str, u64, Box<dyn Fn() -> Outcome>);
    let criteria: Vec<Criterion> = vec![
        (
            "toy equivalence",
            5,
            Box::new(|| command(Command::ToyEquivalence, |_| {})),
        ),
        (
            "state convergence",
            5,
            Box::new(|| command(Command::Convergence, |_| {})),
        ),
        (
            "oracle equivalence",
            30,
            Box::new(|| command(Command::OracleSweep, |_| {})),
        ),
        (
            "complexity scaling",
            120,
            Box::new(|| command(Command::Bench, |c| c.lengths = vec![1024, 2048, 8192])),
        ),
        (
            "parameter accounting",
            1,
            Box::new(|| command(Command::Params, |_| {})),
        ),
        ("hippo spectrum", 1, Box::new(hippo_spectrum)),
        ("gradient correctness", 30, Box::new(gradients)),
        (
            "learnability demo",
            60,
            Box::new(|| command(Command::TrainDemo, |_| {})),
        ),
        ("causality", 5, Box::new(causality)),
        ("block-diagonal equivalence", 10, Box::new(block_diagonal)),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = check();
        let elapsed = t0.elapsed();
        let in_time = elapsed < Duration::from_secs(*budget);
        let passed = outcome.passed && in_time;
        failed += usize::from(!passed);
        println!(
            "{} criterion {:>2} {name}: {} [{:.2}s of {budget}s{}]",
            if passed { "PASS" } else { "FAIL" },
            i + 1,
            outcome.detail,
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", over budget" },
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
