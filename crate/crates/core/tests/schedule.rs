use condvid::numerics::{gaussian_noise, SeededRng, Tensor};
use condvid::schedule::{ddim_invert, ddim_sample, forward_marginal, make_linear_schedule, StepPlan};

#[test]
fn stepwise_noising_matches_the_marginal() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let z0 = [1.5, -0.5, 0.0, 2.0];
    let t = 300;
    let chains = 10_000;
    let mut rng = SeededRng::new(42);
    let mut sum = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    for _ in 0..chains {
        let mut z = z0;
        for &b in &s.betas()[..t] {
            for v in &mut z {
                *v = (1.0 - b).sqrt() * *v + b.sqrt() * rng.normal();
            }
        }
        for k in 0..4 {
            sum[k] += z[k];
            sq[k] += z[k] * z[k];
        }
    }
    let ab = s.alpha_bar(t).unwrap();
    let var = 1.0 - ab;
    let n = chains as f64;
    // Five standard errors for the mean and for the sample variance.
    let mean_tol = 5.0 * (var / n).sqrt();
    let var_tol = 5.0 * var * (2.0 / n).sqrt();
    let noise = Tensor::<f64>::zeros(&[4]);
    let marginal_mean = forward_marginal(&Tensor::new(&[4], z0.to_vec()).unwrap(), t, &noise, &s).unwrap();
    for k in 0..4 {
        let mean = sum[k] / n;
        let v = sq[k] / n - mean * mean;
        assert!((mean - marginal_mean.data()[k]).abs() < mean_tol, "mean {k}: {mean}");
        assert!((v - var).abs() < var_tol, "variance {k}: {v} vs {var}");
    }
}

/// A smooth, fixed, nonlinear stand-in for a trained denoiser.
fn toy_denoiser(z: &Tensor<f64>, t: usize) -> Tensor<f64> {
    let a = 0.3 + 0.6 * t as f64 / 1000.0;
    z.map(|v| a * v.tanh() + 0.1 * (0.5 * v).sin())
}

#[test]
fn round_trip_with_a_fixed_denoiser_stays_under_its_bound() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let plan = StepPlan::uniform(1000, 50).unwrap();
    let mut rng = SeededRng::new(9);
    let z0: Tensor<f64> = gaussian_noise(&[2, 4, 4, 4], &mut rng).unwrap();
    let den = |z: &Tensor<f64>, t: usize, _: &()| Ok(toy_denoiser(z, t));
    let z_t = ddim_invert(&z0, den, &s, &plan, &()).unwrap();
    let back = ddim_sample(&z_t, den, &s, &plan, &()).unwrap();
    let rel = back.sub(&z0).unwrap().norm_l2() / z0.norm_l2();
    eprintln!("round-trip relative error {rel:.6e}");
    assert!(rel < ROUND_TRIP_BOUND, "{rel}");
}

/// Measured once for the toy denoiser above, then frozen.
const ROUND_TRIP_BOUND: f64 = 0.17174;

#[test]
fn identical_frames_invert_to_identical_frames() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let plan = StepPlan::uniform(1000, 20).unwrap();
    let mut rng = SeededRng::new(1);
    let one: Tensor<f64> = gaussian_noise(&[4, 4, 4], &mut rng).unwrap();
    let z0 = Tensor::new(&[3, 4, 4, 4], one.data().repeat(3)).unwrap();
    let den = |z: &Tensor<f64>, t: usize, _: &()| Ok(toy_denoiser(z, t));
    let z_t = ddim_invert(&z0, den, &s, &plan, &()).unwrap();
    assert_eq!(z_t.slab(0), z_t.slab(1));
    assert_eq!(z_t.slab(1), z_t.slab(2));
}
