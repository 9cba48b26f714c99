use condvid::attention::{AttentionMode, FrameSamplingPlan};
use condvid::network::{
    control_forward, encode_condition, encode_text, inflate_2d_to_3d, injection_shapes, named_params, unet_denoise,
    ControlResiduals, ImageModel, ModelConfig, Params, TextEmbedding,
};
use condvid::numerics::{gaussian_noise, tensor_digest, SeededRng, Tensor};
use condvid::video::ConditionMap;

/// Default-architecture model whose every parameter is jittered so no block
/// is trivially zero.
fn random_model(seed: u64) -> (ModelConfig, ImageModel<f64>) {
    let cfg = ModelConfig {
        init_seed: seed,
        ..ModelConfig::default()
    };
    let mut m = cfg.init_unet::<f64>().unwrap();
    let mut rng = SeededRng::stream(seed, "jitter");
    m.visit_mut("", &mut |_, t| {
        t.data_mut().iter_mut().for_each(|v| *v += 0.05 * rng.normal());
    });
    (cfg, m)
}

fn image_output(m: &ImageModel<f64>, x: &Tensor<f64>, t: usize, text: &TextEmbedding<f64>) -> Tensor<f64> {
    let single = inflate_2d_to_3d(m, &FrameSamplingPlan::per_frame(1));
    unet_denoise(&single, x, t, text, None).unwrap()
}

#[test]
fn static_video_inflation_matches_the_image_model() {
    for seed in 0..20u64 {
        let (cfg, m) = random_model(seed);
        let mut rng = SeededRng::new(100 + seed);
        let x: Tensor<f64> = gaussian_noise(&[1, 4, 8, 8], &mut rng).unwrap();
        let text = encode_text(&cfg, "a red circle moving left");
        let t = 1 + rng.below(1000);
        let want = image_output(&m, &x, t, &text);
        let mode = AttentionMode::ALL[seed as usize % 4];
        let video = inflate_2d_to_3d(&m, &FrameSamplingPlan::new(mode, 6, 3).unwrap());
        let xs = Tensor::new(&[6, 4, 8, 8], x.data().repeat(6)).unwrap();
        let out = unet_denoise(&video, &xs, t, &text, None).unwrap();
        for i in 0..6 {
            let diff = out
                .slab(i)
                .iter()
                .zip(want.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-6, "model {seed} frame {i}: {diff:e}");
        }
    }
}

#[test]
fn inflation_shares_every_weight_and_adds_none() {
    let (_, m) = random_model(3);
    let video = inflate_2d_to_3d(&m, &FrameSamplingPlan::new(AttentionMode::Sbist, 8, 3).unwrap());
    assert_eq!(named_params(&video.unet), named_params(&m));
    assert_eq!(video.unet.param_count(), m.param_count());
}

#[test]
fn cross_frame_attention_changes_non_static_output() {
    let (cfg, m) = random_model(5);
    let mut rng = SeededRng::new(6);
    let xs: Tensor<f64> = gaussian_noise(&[4, 4, 8, 8], &mut rng).unwrap();
    let text = encode_text(&cfg, "");
    let per_frame = unet_denoise(&inflate_2d_to_3d(&m, &FrameSamplingPlan::per_frame(4)), &xs, 500, &text, None).unwrap();
    let sbist = inflate_2d_to_3d(&m, &FrameSamplingPlan::new(AttentionMode::Sbist, 4, 3).unwrap());
    let out = unet_denoise(&sbist, &xs, 500, &text, None).unwrap();
    // Frame 0 and 3 both read {0, 3}; every frame sees a different KV set than its own.
    for i in 0..4 {
        let diff = out
            .slab(i)
            .iter()
            .zip(per_frame.slab(i))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6, "frame {i} unchanged");
    }
}

#[test]
fn zero_residuals_equal_no_residuals() {
    let (cfg, m) = random_model(7);
    let branch = cfg.init_control(&m).unwrap();
    let mut rng = SeededRng::new(8);
    let z: Tensor<f64> = gaussian_noise(&[3, 4, 8, 8], &mut rng).unwrap();
    let text = encode_text(&cfg, "a blue square");
    let plan = FrameSamplingPlan::new(AttentionMode::Sbist, 3, 3).unwrap();
    let video = inflate_2d_to_3d(&m, &plan);
    let res = control_forward(&branch, &z, 200, &text, &plan).unwrap();
    assert_eq!(res.max_abs(), 0.0, "fresh branch must emit zeros");
    let none = unet_denoise(&video, &z, 200, &text, None).unwrap();
    let zero = unet_denoise(&video, &z, 200, &text, Some(&res.zeros_like())).unwrap();
    assert!(none.max_abs_diff(&zero).unwrap() < 1e-7);
    assert_eq!(none.dims(), z.dims());
}

#[test]
fn branch_starts_as_a_clone_of_the_encoder() {
    let (cfg, m) = random_model(9);
    let branch = cfg.init_control(&m).unwrap();
    let unet = named_params(&m);
    let ctrl = named_params(&branch);
    let mut shared = 0;
    for (k, v) in &ctrl {
        if k.starts_with("encoder.") {
            assert_eq!(Some(v), unet.get(k), "{k}");
            shared += 1;
        }
    }
    assert_eq!(shared, unet.keys().filter(|k| k.starts_with("encoder.")).count());
}

#[test]
fn residual_shapes_match_injection_points() {
    let cfg = ModelConfig::default();
    let m = cfg.init_unet::<f32>().unwrap();
    let branch = cfg.init_control(&m).unwrap();
    let z = Tensor::<f32>::zeros(&[8, 4, 32, 32]);
    let text = encode_text(&cfg, "x");
    let res = control_forward(&branch, &z, 10, &text, &FrameSamplingPlan::per_frame(8)).unwrap();
    let want = injection_shapes(&m, 8, 32, 32);
    assert_eq!(res.shapes(), want);
    assert_eq!(want[0], vec![8, 16, 32, 32]);
    assert_eq!(want[1], vec![8, 32, 16, 16]);

    let bad = ControlResiduals::from_tensors(
        &Tensor::zeros(&[8, 16, 32, 32]),
        &Tensor::zeros(&[8, 32, 16, 16]),
        &Tensor::zeros(&[8, 32, 8, 8]),
    )
    .unwrap();
    let video = inflate_2d_to_3d(&m, &FrameSamplingPlan::per_frame(8));
    assert!(unet_denoise(&video, &z, 10, &text, Some(&bad)).is_err());
}

#[test]
fn condition_stem_contract() {
    let cfg = ModelConfig::default();
    let m = cfg.init_unet::<f32>().unwrap();
    let branch = cfg.init_control(&m).unwrap();
    let zero = ConditionMap::new(Tensor::zeros(&[2, 1, 32, 32])).unwrap();
    let enc = encode_condition(&branch, &zero).unwrap();
    assert_eq!(enc.dims(), &[2, 4, 8, 8]);
    assert!(enc.data().iter().all(|&v| v == 0.0));
    let two = ConditionMap::new(Tensor::zeros(&[2, 2, 32, 32])).unwrap();
    assert!(encode_condition(&branch, &two).is_err());
}

#[test]
fn text_stub_contract() {
    let cfg = ModelConfig::default();
    let a: TextEmbedding<f32> = encode_text(&cfg, "a b");
    assert_eq!(a, encode_text(&cfg, "a b"));
    assert_ne!(a, encode_text(&cfg, "b a"));
    let empty: TextEmbedding<f32> = encode_text(&cfg, "");
    assert_eq!(empty.tensor().dims(), &[1, cfg.text_dim]);
}

fn golden_inputs() -> (ModelConfig, ImageModel<f32>, Tensor<f32>, ConditionMap) {
    let cfg = ModelConfig::default();
    let m = cfg.init_unet::<f32>().unwrap();
    let mut rng = SeededRng::new(2024);
    let z: Tensor<f32> = gaussian_noise(&[2, 4, 8, 8], &mut rng).unwrap();
    let masks: Vec<Vec<bool>> = (0..2)
        .map(|f| (0..32 * 32).map(|p| (p % 32 + f * 3) / 8 == (p / 32) / 8).collect())
        .collect();
    (cfg, m, z, ConditionMap::from_masks(&masks, 32, 32).unwrap())
}

#[test]
fn golden_denoiser_output() {
    let (cfg, m, z, _) = golden_inputs();
    let video = inflate_2d_to_3d(&m, &FrameSamplingPlan::new(AttentionMode::Sbist, 2, 3).unwrap());
    let out = unet_denoise(&video, &z, 321, &encode_text(&cfg, "a green circle"), None).unwrap();
    assert_eq!(tensor_digest(&out), GOLDEN_DENOISE);
}

#[test]
fn golden_condition_encoding() {
    let (cfg, m, _, cond) = golden_inputs();
    let branch = cfg.init_control(&m).unwrap();
    assert_eq!(tensor_digest(&encode_condition(&branch, &cond).unwrap()), GOLDEN_STEM);
}

const GOLDEN_DENOISE: &str = "fa08d728850e1d5d0789e778b470041f5b129306341566e3e8f092da5f076534";
const GOLDEN_STEM: &str = "2f674b628d08b2c89039ceb0b94a422e17db9888fc58563070665cfe2bad1f6b";
