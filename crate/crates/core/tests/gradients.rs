use essm::conv::KernelMode;
use essm::layer::{Activation, LayerConfig, MultiHeadLayer, NormKind, NormPlacement};
use essm::train::{
    analytic_grad, finite_diff_layer_grad, grad_rel_errors, layer_params, random_inputs,
    set_layer_params,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn configs() -> Vec<LayerConfig> {
    let full = LayerConfig::default();
    vec![
        LayerConfig::plain(1),
        LayerConfig {
            bidirectional: true,
            ..LayerConfig::plain(1)
        },
        full,
        LayerConfig {
            heads: 2,
            norm: NormKind::Layer,
            placement: NormPlacement::Pre,
            ..full
        },
        LayerConfig {
            heads: 2,
            bidirectional: true,
            norm: NormKind::Layer,
            ..full
        },
        LayerConfig {
            activation: Activation::Identity,
            residual: true,
            ..full
        },
    ]
}

/// Random raw parameters kept away from the clip boundary.
fn perturbed_layer(cfg: LayerConfig, seed: u64) -> MultiHeadLayer {
    let mut layer = MultiHeadLayer::init(2, 2, 2, cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for head in &mut layer.heads {
        head.spectrum
            .raw_real
            .iter_mut()
            .for_each(|r| *r = rng.random_range(0.05..1.5));
        head.spectrum
            .imag
            .iter_mut()
            .for_each(|i| *i = rng.random_range(-3.0..3.0));
        head.delta
            .iter_mut()
            .for_each(|d| *d = rng.random_range(0.05..0.5));
        head.c
            .iter_mut()
            .for_each(|c| *c = rng.random_range(-1.0..1.0));
        head.d
            .iter_mut()
            .for_each(|d| *d = rng.random_range(0.5..1.5));
    }
    layer
        .mixer_b
        .iter_mut()
        .for_each(|b| *b = rng.random_range(-0.5..0.5));
    layer
}

#[test]
fn analytic_matches_central_differences() {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let cfgs = configs();
        let cfg = cfgs[seed as usize % cfgs.len()];
        let layer = perturbed_layer(cfg, seed);
        let u = &random_inputs(1, 8, 2, seed + 100)[0];
        let target = &random_inputs(1, 8, 2, seed + 200)[0];
        let (_, analytic) = analytic_grad(&layer, u, target).unwrap();
        let numeric = finite_diff_layer_grad(&layer, u, target, 1e-5).unwrap();
        for (name, err) in grad_rel_errors(&analytic, &numeric) {
            assert!(
                err <= 1e-4,
                "seed {seed} cfg {cfg:?}: {name} rel err {err:.3e}"
            );
            worst = worst.max(err);
        }
    }
    assert!(worst.is_finite());
}

#[test]
fn delta_gradient_alone() {
    let layer = perturbed_layer(LayerConfig::plain(1), 3);
    let u = &random_inputs(1, 8, 2, 1)[0];
    let target = &random_inputs(1, 8, 2, 2)[0];
    let (_, g) = analytic_grad(&layer, u, target).unwrap();
    let h = 1e-5;
    for i in 0..2 {
        let loss_at = |d: f64| {
            let mut l = layer.clone();
            l.heads[0].delta[i] = d;
            let out = essm::layer::layer_forward(&l, u).unwrap();
            essm::train::mse_loss(&out, target).unwrap()
        };
        let d0 = layer.heads[0].delta[i];
        let fd = (loss_at(d0 + h) - loss_at(d0 - h)) / (2.0 * h);
        let a = g.heads[0].d_delta[i];
        assert!(
            (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-8),
            "{a} vs {fd}"
        );
    }
}

#[test]
fn clipped_raw_real_has_zero_gradient() {
    let mut layer = perturbed_layer(LayerConfig::plain(1), 4);
    layer.heads[0].spectrum.raw_real[0] = -3.0;
    let u = &random_inputs(1, 8, 2, 1)[0];
    let target = &random_inputs(1, 8, 2, 2)[0];
    let (_, g) = analytic_grad(&layer, u, target).unwrap();
    assert_eq!(g.heads[0].d_raw_real[0], 0.0);
    assert!(g.heads[0].d_raw_real[1] != 0.0);
}

#[test]
fn zero_input_and_target_give_zero_gradients() {
    for cfg in configs() {
        let layer = perturbed_layer(
            LayerConfig {
                norm: NormKind::None,
                ..cfg
            },
            5,
        );
        let mut layer = layer;
        layer.mixer_b.fill(0.0);
        let z = DMatrix::zeros(8, 2);
        let (loss, g) = analytic_grad(&layer, &z, &z).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.to_flat().iter().all(|&x| x == 0.0), "{cfg:?}");
    }
}

#[test]
fn dead_output_path_sends_gradient_to_c_only() {
    let mut layer = perturbed_layer(LayerConfig::plain(1), 6);
    layer.heads[0].c.fill(0.0);
    layer.mixer_w = DMatrix::identity(2, 2);
    let u = &random_inputs(1, 8, 2, 1)[0];
    let target = &random_inputs(1, 8, 2, 2)[0];
    let (_, g) = analytic_grad(&layer, u, target).unwrap();
    let numeric = finite_diff_layer_grad(&layer, u, target, 1e-5).unwrap();
    assert!(g.heads[0].d_c.amax() > 1e-6);
    assert!(g.heads[0].d_b.amax() == 0.0);
    assert!(numeric.heads[0].d_b.amax() < 1e-9);
    for (name, err) in grad_rel_errors(&g, &numeric) {
        assert!(err <= 1e-4, "{name}: {err}");
    }
}

#[test]
fn params_unchanged_by_gradient_evaluation() {
    let layer = perturbed_layer(LayerConfig::default(), 7);
    let before = layer_params(&layer);
    let u = &random_inputs(1, 8, 2, 1)[0];
    let _ = finite_diff_layer_grad(&layer, u, u, 1e-5).unwrap();
    let mut copy = layer.clone();
    set_layer_params(&mut copy, &before);
    assert_eq!(copy, layer);
    assert_eq!(layer.config.mode, KernelMode::RealPart);
}
