use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use condvid::lab::{gen_moving_shapes, SceneConfig};
use condvid::numerics::SeededRng;
use condvid::video::RgbVideo;

fn condvid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condvid"))
        .args(args)
        .env("CONDVID_THREADS", "0")
        .output()
        .expect("spawning condvid")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "condvid failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A config small enough that training and sampling take seconds.
const TINY: &str = r#"{
  "data": { "scenes": 4 },
  "train_image": { "steps": 10, "batch_size": 4 },
  "train_control": { "steps": 5, "batch_size": 4 },
  "generation": { "steps": 4 },
  "ablation": { "seeds": [1], "steps": 3 },
  "eval": { "scenes": 1 }
}"#;

struct Fixture {
    root: PathBuf,
    config: PathBuf,
    checkpoint: PathBuf,
}

/// Trains one tiny checkpoint per test process, under Cargo's scratch dir.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let config = root.join("tiny.json");
        std::fs::write(&config, TINY).unwrap();
        let out = root.join("train");
        ok(&condvid(&["train", "--config", p(&config), "--out", p(&out)]));
        assert!(out.join("manifest.json").is_file());
        assert!(out.join("loss_image.csv").is_file());
        Fixture {
            checkpoint: out.join("checkpoint"),
            config,
            root,
        }
    })
}

fn frame_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn generate_writes_frames_metrics_and_manifest() {
    let f = fixture();
    let out = f.root.join("gen_a");
    let args = [
        "generate", "--config", p(&f.config), "--checkpoint", p(&f.checkpoint), "--seed-b", "1", "--seed-c", "2",
        "--out", p(&out),
    ];
    ok(&condvid(&args));
    let frames = frame_files(&out);
    assert_eq!(frames.len(), 8);
    assert_eq!(frames[0].0, "frame_0000.ppm");
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["provenance"], "epsilon_b");
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["seed_b"], 1);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let again = f.root.join("gen_b");
    let mut args2 = args;
    args2[args2.len() - 1] = p(&again);
    ok(&condvid(&args2));
    assert_eq!(frame_files(&again), frames, "identical invocations must give identical bytes");

    let other = f.root.join("gen_c");
    let mut args3 = args;
    args3[6] = "5";
    args3[args3.len() - 1] = p(&other);
    ok(&condvid(&args3));
    assert_ne!(frame_files(&other), frames);
}

#[test]
fn inverted_background_without_video_names_the_flag() {
    let f = fixture();
    let out = condvid(&[
        "generate", "--config", p(&f.config), "--checkpoint", p(&f.checkpoint), "--background", "inverted", "--out",
        p(&f.root.join("never")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--video"));

    let missing = f.root.join("no_such_ref");
    let out = condvid(&[
        "generate", "--config", p(&f.config), "--checkpoint", p(&f.checkpoint), "--background", "inverted", "--video",
        p(&missing), "--out", p(&f.root.join("never")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--video") && err.contains("no_such_ref"), "{err}");
}

#[test]
fn invert_then_generate_static_gives_static_frames() {
    let f = fixture();
    let cfg = SceneConfig::toy();
    let scene = gen_moving_shapes(1, &cfg, 4, &mut SeededRng::new(77)).unwrap().remove(0);
    let video = RgbVideo::repeat_frame(scene.video.frame(0), cfg.size, cfg.size, cfg.frames).unwrap();
    let vdir = f.root.join("static_video");
    video.write_ppm_dir(&vdir).unwrap();
    let cdir = f.root.join("static_cond");
    scene.cond.repeat_first(cfg.frames).unwrap().write_pgm_dir(&cdir).unwrap();

    let inv = f.root.join("inv");
    ok(&condvid(&["invert", p(&vdir), "--config", p(&f.config), "--checkpoint", p(&f.checkpoint), "--out", p(&inv)]));
    let latent = inv.join("z_T.cvt1");
    assert!(latent.is_file());

    let out = f.root.join("gen_static");
    ok(&condvid(&[
        "generate", "--config", p(&f.config), "--checkpoint", p(&f.checkpoint), "--latent", p(&latent),
        "--condition", p(&cdir), "--out", p(&out),
    ]));
    let frames = frame_files(&out);
    assert_eq!(frames.len(), cfg.frames);
    assert!(frames.iter().all(|(_, b)| *b == frames[0].1));
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["provenance"], "inverted");

    // Inline inversion through --video gives the same bytes.
    let inline = f.root.join("gen_static_inline");
    ok(&condvid(&[
        "generate", "--config", p(&f.config), "--checkpoint", p(&f.checkpoint), "--background", "inverted",
        "--video", p(&vdir), "--condition", p(&cdir), "--out", p(&inline),
    ]));
    assert_eq!(frame_files(&inline), frames);
}

#[test]
fn bench_lists_modes_by_kv_frames() {
    let out = ok(&condvid(&["bench", "--frames", "24", "--latent", "4", "--modes", "all"]));
    let mut rdr = csv::Reader::from_reader(out.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(headers.iter().collect::<Vec<_>>(), ["mode", "F", "S", "d", "kv_frames", "score_flops", "wall_time_s"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    let modes: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(modes, ["self", "sparse_causal", "sbist", "dense"]);
    let kv: Vec<usize> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert_eq!(kv, [1, 2, 8, 24]);

    let bad = condvid(&["bench", "--modes", "sideways"]);
    assert!(!bad.status.success());
}

#[test]
fn ablate_without_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = condvid(&["ablate", "--checkpoint", p(&missing), "--out", p(&dir.path().join("out"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(p(&missing)));
}

#[test]
fn ablate_writes_tables() {
    let f = fixture();
    let out = f.root.join("ablate");
    let table = ok(&condvid(&["ablate", "--config", p(&f.config), "--checkpoint", p(&f.checkpoint), "--out", p(&out)]));
    assert!(table.contains("sbist"));
    for name in ["ablation_cells.csv", "ablation_rows.csv", "ablation.txt", "manifest.json"] {
        assert!(out.join(name).is_file(), "{name}");
    }
}

#[test]
fn metrics_scores_a_frame_directory() {
    let cfg = SceneConfig::toy();
    let scene = gen_moving_shapes(1, &cfg, 4, &mut SeededRng::new(5)).unwrap().remove(0);
    let dir = tempfile::tempdir().unwrap();
    let (v, c) = (dir.path().join("v"), dir.path().join("c"));
    scene.video.write_ppm_dir(&v).unwrap();
    scene.cond.write_pgm_dir(&c).unwrap();
    let out = ok(&condvid(&["metrics", p(&v), "--condition", p(&c)]));
    let doc: serde_json::Value = serde_json::from_str(&out).unwrap();
    let fc = doc["frame_consistency"].as_f64().unwrap();
    assert!(fc > 0.9 && fc <= 1.0 + 1e-9, "{fc}");
    assert!(doc["condition_iou"].as_f64().is_some());
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "generation": { "sed_b": 1 } }"#).unwrap();
    let out = condvid(&["generate", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sed_b"));
}
