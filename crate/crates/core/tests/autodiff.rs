use ucos_core::autodiff::{Activation, NetConfig, ScoreNetwork};
use ucos_core::rng::{master_rng, standard_normal_vec};

fn small_config(activation: Activation) -> NetConfig {
    NetConfig {
        width: 4,
        depth: 2,
        n_modes: 3,
        in_channels: 2,
        out_channels: 2,
        height: 8,
        grid_width: 8,
        activation,
    }
}

/// Worst relative mismatch between the reverse-mode parameter gradient and
/// central differences of the loss.
fn worst_gradient_error(activation: Activation, seed: u64) -> f64 {
    let cfg = small_config(activation);
    let mut rng = master_rng(seed);
    let net = ScoreNetwork::new(cfg, &mut rng).unwrap();
    let n = cfg.input_shape().len();
    let x = standard_normal_vec(&mut rng, n);
    let target = standard_normal_vec(&mut rng, n);
    let (_, grad) = net.loss_grad(&x, 0.3, &target, 1.7).unwrap();
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..net.n_params() {
        let mut p = net.clone();
        p.params_mut()[k] += h;
        let up = p.loss_grad(&x, 0.3, &target, 1.7).unwrap().0;
        p.params_mut()[k] -= 2.0 * h;
        let down = p.loss_grad(&x, 0.3, &target, 1.7).unwrap().0;
        let fd = (up - down) / (2.0 * h);
        let denom = grad[k].abs().max(fd.abs()).max(1e-3 * scale);
        worst = worst.max((fd - grad[k]).abs() / denom);
    }
    worst
}

#[test]
fn parameter_gradients_match_central_differences() {
    for (act, seed) in [
        (Activation::Silu, 1),
        (Activation::Gelu, 2),
        (Activation::Tanh, 3),
    ] {
        let err = worst_gradient_error(act, seed);
        assert!(err < 1e-4, "{}: worst relative error {err:e}", act.name());
    }
}

#[test]
fn input_vjp_matches_central_differences() {
    let cfg = small_config(Activation::Silu);
    let mut rng = master_rng(9);
    let net = ScoreNetwork::new(cfg, &mut rng).unwrap();
    let n = cfg.input_shape().len();
    let x = standard_normal_vec(&mut rng, n);
    let v = standard_normal_vec(&mut rng, n);
    let (_, gx) = net.vjp_input(&x, 0.6, &v).unwrap();
    let h = 1e-5;
    for k in [0, 7, 64, 127] {
        let mut xp = x.clone();
        xp[k] += h;
        let up: f64 = net
            .forward(&xp, 0.6)
            .unwrap()
            .iter()
            .zip(&v)
            .map(|(a, b)| a * b)
            .sum();
        xp[k] -= 2.0 * h;
        let down: f64 = net
            .forward(&xp, 0.6)
            .unwrap()
            .iter()
            .zip(&v)
            .map(|(a, b)| a * b)
            .sum();
        let fd = (up - down) / (2.0 * h);
        assert!(
            (fd - gx[k]).abs() <= 1e-6 * gx[k].abs().max(1.0),
            "{k}: {fd} vs {}",
            gx[k]
        );
    }
}
