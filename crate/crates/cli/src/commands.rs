use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use condvid::attention::{run_attention_benchmark, write_cost_csv, AttentionMode, BenchConfig, FrameSamplingPlan};
use condvid::lab::{gen_moving_shapes, read_dataset, train_control_branch, train_image_denoiser, write_dataset, StoredScene};
use condvid::metrics::{condition_accuracy_iou, frame_consistency, run_ablation, EvalScene, ToyEmbedder};
use condvid::network::{encode_text, inflate_2d_to_3d, Checkpoint};
use condvid::numerics::{read_cvt1_file, write_cvt1_file, Real, SeededRng, Tensor};
use condvid::sampler::{
    generate as sample, generate_from_latent, invert_video, BackgroundLatent, BackgroundMode, Generation, GenerationRequest,
    Models, Provenance,
};
use condvid::schedule::NoiseSchedule;
use condvid::video::{ConditionMap, RgbVideo};

use crate::config::RunConfig;
use crate::{AblateArgs, BenchArgs, GenerateArgs, InvertArgs, MetricsArgs, SamplerFlags, TrainArgs};

const LATENT_FILE: &str = "z_T.cvt1";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// `manifest.json` with the command, resolved config, its hash, seeds and
/// a digest of every listed output.
fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, seeds: Value, outputs: &[PathBuf]) -> Result<()> {
    let files = outputs
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(out).unwrap_or(p).display().to_string();
            Ok(json!({ "path": rel, "sha256": sha256_file(p)? }))
        })
        .collect::<Result<Vec<_>>>()?;
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": cfg.hash()?,
        "config": cfg,
        "seeds": seeds,
        "outputs": files,
    });
    write_json(&out.join("manifest.json"), &doc)
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.join("manifest.json").is_file() {
        bail!("checkpoint not found: {}", path.display());
    }
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_models(path: &Path) -> Result<Models<f32>> {
    let ck = load_checkpoint(path)?;
    let control = ck
        .control
        .with_context(|| format!("checkpoint {} has no control branch", path.display()))?;
    Ok(Models {
        config: ck.config,
        unet: ck.unet,
        control,
    })
}

fn held_out_scenes(cfg: &RunConfig) -> Result<Vec<StoredScene>> {
    let mut rng = SeededRng::new(cfg.eval.seed);
    let scenes = gen_moving_shapes(cfg.eval.scenes.max(1), &cfg.data.scene, cfg.model.patch, &mut rng)?;
    Ok(scenes.iter().map(Into::into).collect())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if let Some(s) = a.image_steps {
        cfg.train_image.steps = s;
    }
    if let Some(s) = a.control_steps {
        cfg.train_control.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train_image.seed = s;
        cfg.train_control.seed = s;
    }
    let out = &a.common.out;
    create_dir(out)?;
    let scenes: Vec<StoredScene> = match &a.data {
        Some(dir) => read_dataset(dir).with_context(|| format!("--data {}", dir.display()))?,
        None => {
            let mut rng = SeededRng::new(cfg.data.seed);
            let generated = gen_moving_shapes(cfg.data.scenes, &cfg.data.scene, cfg.model.patch, &mut rng)?;
            write_dataset(&out.join("data"), &generated)?;
            generated.iter().map(Into::into).collect()
        }
    };
    let sched = cfg.schedule.build()?;
    eprintln!("training denoiser on {} scenes for {} steps", scenes.len(), cfg.train_image.steps);
    let (unet, image_report) = train_image_denoiser(&scenes, &cfg.model, &sched, &cfg.train_image)?;
    eprintln!("training control branch for {} steps", cfg.train_control.steps);
    let (control, control_report) = train_control_branch(&scenes, &unet, &cfg.model, &sched, &cfg.train_control)?;

    let ck_dir = out.join("checkpoint");
    Checkpoint {
        config: cfg.model.clone(),
        unet,
        control: Some(control),
    }
    .save(&ck_dir)?;
    let mut outputs = vec![ck_dir.join("manifest.json")];
    for (name, rep) in [("loss_image.csv", &image_report), ("loss_control.csv", &control_report)] {
        let path = out.join(name);
        let mut w = csv_writer(&path)?;
        w.write_record(["step", "loss"])?;
        for (i, l) in rep.losses.iter().enumerate() {
            w.write_record([i.to_string(), format!("{l:.6}")])?;
        }
        w.flush()?;
        outputs.push(path);
    }
    let (h, t) = image_report.head_tail(50);
    let (ch, ct) = control_report.head_tail(50);
    eprintln!("denoiser loss {h:.4} -> {t:.4}; control loss {ch:.4} -> {ct:.4}");
    write_manifest(
        out,
        "train",
        &cfg,
        json!({ "data": cfg.data.seed, "train_image": cfg.train_image.seed, "train_control": cfg.train_control.seed }),
        &outputs,
    )
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))
}

fn apply_sampler_flags(cfg: &mut RunConfig, s: &SamplerFlags) {
    if let Some(p) = &s.checkpoint {
        cfg.checkpoint = p.clone();
    }
    if let Some(t) = &s.text {
        cfg.generation.text = t.clone();
    }
    if let Some(v) = s.steps {
        cfg.generation.steps = v;
    }
    if let Some(m) = s.mode {
        cfg.generation.mode = m;
    }
    if let Some(g) = s.gap {
        cfg.generation.gap = g;
    }
    if s.f64 {
        cfg.generation.f64 = true;
    }
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    apply_sampler_flags(&mut cfg, &a.sampler);
    let g = &mut cfg.generation;
    if let Some(v) = a.seed_b {
        g.seed_b = v;
    }
    if let Some(v) = a.seed_c {
        g.seed_c = v;
    }
    if let Some(v) = a.guidance {
        g.guidance_scale = v;
    }
    if let Some(v) = a.control {
        g.control = v;
    }
    if let Some(v) = a.background {
        g.background = v;
    }
    if let Some(v) = a.cond_noise_scale {
        g.cond_noise_scale = v;
    }
    if a.latent.is_some() {
        g.background = BackgroundMode::Inverted;
    }
    if g.background == BackgroundMode::Inverted && a.video.is_none() && a.latent.is_none() {
        bail!("--background inverted needs --video <DIR> (or --latent <FILE> from `invert`)");
    }
    let reference = match &a.video {
        Some(dir) => {
            if !dir.is_dir() {
                bail!("--video: reference directory {} does not exist", dir.display());
            }
            Some(RgbVideo::read_ppm_dir(dir).with_context(|| format!("--video {}", dir.display()))?)
        }
        None => None,
    };

    let models = load_models(&cfg.checkpoint)?;
    let (condition, caption) = match &a.condition {
        Some(dir) => (
            ConditionMap::read_pgm_dir(dir).with_context(|| format!("--condition {}", dir.display()))?,
            String::new(),
        ),
        None => {
            let s = held_out_scenes(&cfg)?.swap_remove(0);
            (s.cond, s.caption)
        }
    };
    if cfg.generation.text.is_empty() {
        cfg.generation.text = caption;
    }
    let g = &cfg.generation;
    let req = GenerationRequest {
        plan: FrameSamplingPlan::new(g.mode, condition.frame_count(), g.gap)?,
        condition,
        text: g.text.clone(),
        reference_video: reference,
        seed_b: g.seed_b,
        seed_c: g.seed_c,
        steps: g.steps,
        guidance_scale: g.guidance_scale,
        control: g.control,
        background: g.background,
        cond_noise_scale: g.cond_noise_scale,
        conditional_inversion: g.conditional_inversion,
    };
    let sched = cfg.schedule.build()?;
    let out = &a.common.out;
    create_dir(out)?;
    let mut outputs = if g.f64 {
        sample_and_write::<f64>(&req, &models.cast()?, &sched, a.latent.as_deref(), a.dump_latents, out)?
    } else {
        sample_and_write::<f32>(&req, &models, &sched, a.latent.as_deref(), a.dump_latents, out)?
    };
    outputs.sort();
    write_manifest(
        out,
        "generate",
        &cfg,
        json!({ "seed_b": cfg.generation.seed_b, "seed_c": cfg.generation.seed_c }),
        &outputs,
    )
}

fn sample_and_write<T: Real>(
    req: &GenerationRequest,
    models: &Models<T>,
    sched: &NoiseSchedule,
    latent: Option<&Path>,
    dump_latents: bool,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let gen: Generation<T> = match latent {
        Some(p) => {
            let z_t: Tensor<T> = read_cvt1_file(p).with_context(|| format!("--latent {}", p.display()))?;
            let bg = BackgroundLatent {
                z_t,
                provenance: Provenance::Inverted,
            };
            generate_from_latent(req, models, sched, bg)?
        }
        None => sample(req, models, sched)?,
    };
    let mut outputs = gen.video.write_ppm_dir(out)?;
    if dump_latents {
        let p = out.join("latents.cvt1");
        write_cvt1_file(&p, &gen.latents)?;
        outputs.push(p);
    }
    let fc = frame_consistency(&gen.video, &ToyEmbedder::default()).ok();
    let iou = condition_accuracy_iou(&gen.video, &req.condition, 0.25).ok();
    let sidecar = out.join("metrics.json");
    write_json(
        &sidecar,
        &json!({
            "frame_consistency": fc,
            "condition_iou": iou,
            "provenance": gen.provenance,
            "counter_b": gen.counter_b,
            "counter_c": gen.counter_c,
            "frames": gen.video.frame_count(),
            "text": req.text,
        }),
    )?;
    outputs.push(sidecar);
    Ok(outputs)
}

pub fn invert(a: InvertArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    apply_sampler_flags(&mut cfg, &a.sampler);
    if a.conditional {
        cfg.generation.conditional_inversion = true;
    }
    if !a.video.is_dir() {
        bail!("video directory {} does not exist", a.video.display());
    }
    let video = RgbVideo::read_ppm_dir(&a.video).with_context(|| format!("reading {}", a.video.display()))?;
    let models = load_models(&cfg.checkpoint)?;
    let sched = cfg.schedule.build()?;
    let out = &a.common.out;
    create_dir(out)?;
    let path = out.join(LATENT_FILE);
    if cfg.generation.f64 {
        invert_and_write::<f64>(&cfg, &models.cast()?, &video, &sched, &path)?;
    } else {
        invert_and_write::<f32>(&cfg, &models, &video, &sched, &path)?;
    }
    write_manifest(out, "invert", &cfg, json!({}), &[path])
}

fn invert_and_write<T: Real>(
    cfg: &RunConfig,
    models: &Models<T>,
    video: &RgbVideo,
    sched: &NoiseSchedule,
    path: &Path,
) -> Result<()> {
    let g = &cfg.generation;
    let plan = FrameSamplingPlan::new(g.mode, video.frame_count(), g.gap)?;
    let vm = inflate_2d_to_3d(&models.unet, &plan);
    let z0: Tensor<T> = models.config.codec().encode(video)?;
    let text = if g.conditional_inversion { g.text.as_str() } else { "" };
    let bg = invert_video(&vm, &z0, &encode_text(&models.config, text), sched, g.steps)?;
    write_cvt1_file(path, &bg.z_t)?;
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if let Some(p) = a.checkpoint {
        cfg.checkpoint = p;
    }
    let models = load_models(&cfg.checkpoint)?;
    let scenes: Vec<EvalScene> = match &a.data {
        Some(dir) => read_dataset(dir).with_context(|| format!("--data {}", dir.display()))?,
        None => held_out_scenes(&cfg)?,
    }
    .into_iter()
    .map(|s| EvalScene {
        cond: s.cond,
        caption: s.caption,
    })
    .collect();
    let sched = cfg.schedule.build()?;
    let report = run_ablation(&models, &sched, &scenes, &cfg.ablation)?;
    let out = &a.common.out;
    create_dir(out)?;
    let cells = out.join("ablation_cells.csv");
    report.write_cells_csv(fs::File::create(&cells).with_context(|| format!("writing {}", cells.display()))?)?;
    let rows = out.join("ablation_rows.csv");
    report.write_rows_csv(fs::File::create(&rows).with_context(|| format!("writing {}", rows.display()))?)?;
    let table = out.join("ablation.txt");
    fs::write(&table, report.text_table()).with_context(|| format!("writing {}", table.display()))?;
    print!("{}", report.text_table());
    write_manifest(out, "ablate", &cfg, json!({ "ablation": cfg.ablation.seeds }), &[cells, rows, table])
}

fn parse_modes(s: &str) -> Result<Vec<AttentionMode>> {
    if s.trim() == "all" {
        return Ok(AttentionMode::ALL.to_vec());
    }
    let modes = s
        .split(',')
        .map(|m| m.trim().parse::<AttentionMode>().with_context(|| format!("--modes: {m:?}")))
        .collect::<Result<Vec<_>>>()?;
    ensure!(!modes.is_empty(), "--modes is empty");
    Ok(modes)
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        frames: a.frames,
        latent_side: a.latent,
        dim: a.dim,
        gap: a.gap,
        modes: parse_modes(&a.modes)?,
        seed: a.seed,
    };
    let rows = run_attention_benchmark(&cfg)?;
    match &a.out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_cost_csv(fs::File::create(p).with_context(|| format!("writing {}", p.display()))?, &rows)?;
        }
        None => write_cost_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

pub fn metrics(a: MetricsArgs) -> Result<()> {
    let video = RgbVideo::read_ppm_dir(&a.video).with_context(|| format!("reading {}", a.video.display()))?;
    let fc = frame_consistency(&video, &ToyEmbedder::default())?;
    let iou = match &a.condition {
        Some(dir) => {
            let cond = ConditionMap::read_pgm_dir(dir).with_context(|| format!("--condition {}", dir.display()))?;
            Some(condition_accuracy_iou(&video, &cond, a.threshold)?)
        }
        None => None,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({ "frame_consistency": fc, "condition_iou": iou }))?
    );
    Ok(())
}
