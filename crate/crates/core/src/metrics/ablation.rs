use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{condition_accuracy_iou, frame_consistency, ToyEmbedder};
use crate::attention::{cost_account, AttentionMode, CostAccount, FrameSamplingPlan, DEFAULT_GAP};
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::sampler::{generate, BackgroundMode, ControlMode, GenerationRequest, Models};
use crate::schedule::NoiseSchedule;
use crate::video::ConditionMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub modes: Vec<AttentionMode>,
    pub controls: Vec<ControlMode>,
    pub gap: usize,
    pub steps: usize,
    pub guidance_scale: f64,
    pub cond_noise_scale: f64,
    pub iou_threshold: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            modes: AttentionMode::ALL.to_vec(),
            controls: vec![ControlMode::TwoD, ControlMode::ThreeD],
            gap: DEFAULT_GAP,
            steps: 50,
            guidance_scale: 7.5,
            cond_noise_scale: 1.0,
            iou_threshold: 0.25,
        }
    }
}

/// Condition and caption of one evaluation clip.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalScene {
    pub cond: ConditionMap,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AttentionMode,
    pub control: ControlMode,
    pub seed: u64,
    pub scene: usize,
    pub frame_consistency: f64,
    pub condition_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub mode: AttentionMode,
    pub control: ControlMode,
    pub runs: usize,
    pub mean_fc: f64,
    pub mean_iou: f64,
    pub cost: CostAccount,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCell>,
}

impl MetricReport {
    pub fn cell(&self, mode: AttentionMode, control: ControlMode) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.control == control)
    }

    /// Mean over every cell with the given control mode.
    pub fn mean_iou(&self, control: ControlMode) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.control == control)
            .map(|c| c.mean_iou)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write_cells_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "mode",
            "control",
            "runs",
            "frame_consistency",
            "condition_iou",
            "kv_frames",
            "score_flops",
        ])?;
        for c in &self.cells {
            out.write_record([
                c.mode.name().to_string(),
                control_name(c.control).to_string(),
                c.runs.to_string(),
                format!("{:.6}", c.mean_fc),
                format!("{:.6}", c.mean_iou),
                c.cost.kv_frames.to_string(),
                c.cost.score_flops.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn write_rows_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["mode", "control", "seed", "scene", "frame_consistency", "condition_iou"])?;
        for r in &self.rows {
            out.write_record([
                r.mode.name().to_string(),
                control_name(r.control).to_string(),
                r.seed.to_string(),
                r.scene.to_string(),
                format!("{:.6}", r.frame_consistency),
                format!("{:.6}", r.condition_iou),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn text_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:<7} {:>4} {:>9} {:>9} {:>4} {:>14}",
            "mode", "control", "runs", "FC", "IoU", "kv", "score_flops"
        );
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<14} {:<7} {:>4} {:>9.5} {:>9.5} {:>4} {:>14}",
                c.mode.name(),
                control_name(c.control),
                c.runs,
                c.mean_fc,
                c.mean_iou,
                c.cost.kv_frames,
                c.cost.score_flops
            );
        }
        s
    }
}

pub fn control_name(c: ControlMode) -> &'static str {
    match c {
        ControlMode::TwoD => "2d",
        ControlMode::ThreeD => "3d",
    }
}

/// Generates every (mode, control, seed) combination with shared seeds and
/// scores it. Seed `k` uses scene `k mod scenes.len()`.
pub fn run_ablation<T: Real>(
    models: &Models<T>,
    sched: &NoiseSchedule,
    scenes: &[EvalScene],
    cfg: &AblationConfig,
) -> Result<MetricReport> {
    if scenes.is_empty() || cfg.seeds.is_empty() || cfg.modes.is_empty() || cfg.controls.is_empty() {
        return Err(Error::invalid("ablation needs scenes, seeds, modes and control modes"));
    }
    let mut jobs = Vec::new();
    for &mode in &cfg.modes {
        for &control in &cfg.controls {
            for (k, &seed) in cfg.seeds.iter().enumerate() {
                jobs.push((mode, control, seed, k % scenes.len()));
            }
        }
    }
    let rows = jobs
        .par_iter()
        .map(|&(mode, control, seed, scene)| {
            let s = &scenes[scene];
            let f = s.cond.frame_count();
            let req = GenerationRequest {
                condition: s.cond.clone(),
                text: s.caption.clone(),
                reference_video: None,
                seed_b: seed,
                seed_c: seed,
                steps: cfg.steps,
                guidance_scale: cfg.guidance_scale,
                plan: FrameSamplingPlan::new(mode, f, cfg.gap)?,
                control,
                background: BackgroundMode::Noise,
                cond_noise_scale: cfg.cond_noise_scale,
                conditional_inversion: false,
            };
            let out = generate(&req, models, sched)?;
            Ok(AblationRow {
                mode,
                control,
                seed,
                scene,
                frame_consistency: frame_consistency(&out.video, &ToyEmbedder::default())?,
                condition_iou: condition_accuracy_iou(&out.video, &s.cond, cfg.iou_threshold)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let patch = models.config.patch;
    let c0 = models.config.channels[0];
    let first = &scenes[0].cond;
    let tokens = (first.height() / patch) * (first.width() / patch);
    let mut cells = Vec::new();
    for &mode in &cfg.modes {
        for &control in &cfg.controls {
            let sel: Vec<&AblationRow> = rows
                .iter()
                .filter(|r| r.mode == mode && r.control == control)
                .collect();
            let n = sel.len() as f64;
            let plan = FrameSamplingPlan::new(mode, first.frame_count(), cfg.gap)?;
            cells.push(AblationCell {
                mode,
                control,
                runs: sel.len(),
                mean_fc: sel.iter().map(|r| r.frame_consistency).sum::<f64>() / n,
                mean_iou: sel.iter().map(|r| r.condition_iou).sum::<f64>() / n,
                cost: cost_account(&plan, tokens, c0),
            });
        }
    }
    Ok(MetricReport { rows, cells })
}
