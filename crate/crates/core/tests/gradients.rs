use condvid::lab::{control_loss, control_loss_and_grads, image_loss, image_loss_and_grads, DenoiseBatch};
use condvid::network::{named_params, ModelConfig, Params};
use condvid::numerics::{gaussian_noise, SeededRng, Tensor};
use condvid::schedule::make_linear_schedule;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        channels: [8, 16],
        heads: 2,
        time_embed_dim: 8,
        temb_dim: 16,
        text_dim: 8,
        text_vocab: 32,
        stem_hidden: 4,
        init_seed: 11,
        ..ModelConfig::default()
    }
}

fn batch(cfg: &ModelConfig, with_cond: bool, seed: u64) -> DenoiseBatch<f64> {
    let mut rng = SeededRng::new(seed);
    let shape = [2, 4, 4, 4];
    let text = cfg.text_encoder();
    let cond = with_cond.then(|| {
        Tensor::from_fn(&[2, 1, 16, 16], |i| if (i / 16 + i % 16) % 5 < 2 { 1.0 } else { 0.0 })
    });
    DenoiseBatch {
        z0: gaussian_noise(&shape, &mut rng).unwrap(),
        noise: gaussian_noise(&shape, &mut rng).unwrap(),
        ts: vec![37, 640],
        texts: vec![text.encode("a red square"), text.encode("")],
        cond,
        cond_noise: with_cond.then(|| gaussian_noise(&shape, &mut rng).unwrap()),
    }
}

/// Perturbs every parameter named in `names` at random offsets and compares
/// central differences against the analytic gradient.
fn probe<P: Params<f64> + Clone>(
    model: &P,
    grads: &P,
    loss: impl Fn(&P) -> f64,
    probes: usize,
    seed: u64,
) -> Vec<(String, f64, f64)> {
    let analytic = named_params(grads);
    let names: Vec<&String> = analytic.keys().collect();
    let mut rng = SeededRng::new(seed);
    let h = 1e-5;
    let mut out = Vec::new();
    for _ in 0..probes {
        let name = names[rng.below(names.len())].clone();
        let idx = rng.below(analytic[&name].len());
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.visit_mut("", &mut |n, t| {
                if n == name {
                    t.data_mut()[idx] += delta;
                }
            });
            loss(&m)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        out.push((format!("{name}[{idx}]"), analytic[&name].data()[idx], numeric));
    }
    out
}

fn assert_close(results: &[(String, f64, f64)]) {
    for (name, a, n) in results {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        assert!(rel < 1e-3, "{name}: analytic {a:e} numeric {n:e} rel {rel:e}");
    }
}

#[test]
fn image_denoiser_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let sched = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let unet = cfg.init_unet::<f64>().unwrap();
    let b = batch(&cfg, false, 3);
    let (_, g) = image_loss_and_grads(&unet, &b, &sched).unwrap();
    let r = probe(&unet, &g, |m| image_loss(m, &b, &sched).unwrap(), 40, 5);
    assert_close(&r);
}

#[test]
fn control_branch_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let sched = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let unet = cfg.init_unet::<f64>().unwrap();
    let mut branch = cfg.init_control(&unet).unwrap();
    // Move the zero projections away from zero so every path carries signal.
    let mut rng = SeededRng::new(8);
    branch.visit_mut("", &mut |n, t| {
        if n.starts_with("zero_") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.3 * rng.normal());
        }
    });
    let b = batch(&cfg, true, 4);
    let (_, g) = control_loss_and_grads(&unet, &branch, &b, &sched).unwrap();
    let r = probe(&branch, &g, |m| control_loss(&unet, m, &b, &sched).unwrap(), 40, 6);
    assert_close(&r);
}
