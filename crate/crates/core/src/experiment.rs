//! End-to-end pipelines: teacher and student training, held-out
//! evaluation, and the ablation grids.

use serde::{Deserialize, Serialize};

use crate::analysis::{
    error_analysis, harmony_histogram, post_nms, score_iou_pairs, toy_map, ErrorBreakdown, HarmonyBands,
    HarmonyHistogram,
};
use crate::error::Result;
use crate::feature_distill::FeatureMask;
use crate::geometry::{Detection, GroundTruthSet};
use crate::harmony::{HarmonyGrid, HsVariant, LossNorm};
use crate::task_signals::{PcMode, Provenance, TaskProbabilityGrid};
use crate::toy_detector::{
    forward, generate_scenes, HdWeighting, teacher_targets, train, DetectorNet, DistillConfig, ScenarioSpec, StepTrace,
    SyntheticScene, TrainOutcome, TrainingConfig,
};

/// Sizes, schedules and thresholds of a teacher/student comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub teacher_width: usize,
    pub student_width: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub score_floor: f64,
    pub nms_iou: f64,
    pub harmony_threshold: f64,
    pub harmony_high: f64,
    pub harmony_low: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            teacher_width: 64,
            student_width: 16,
            train_scenes: 128,
            test_scenes: 200,
            teacher_steps: 1500,
            student_steps: 1500,
            learning_rate: 0.5,
            batch_size: 4,
            score_floor: 0.05,
            nms_iou: 0.5,
            harmony_threshold: 0.8,
            harmony_high: 0.8,
            harmony_low: 0.5,
        }
    }
}

/// Distillation settings of the held-out harmony comparison: sigmoid
/// `p_c` (so the harmony score compares the detection score itself with
/// IoU) and uniform harmony weighting over every cell.
pub fn harmony_study_distill() -> DistillConfig {
    DistillConfig {
        pc_mode: PcMode::Sigmoid,
        hd_weighting: HdWeighting::Uniform,
        ..DistillConfig::default()
    }
}

/// Seed offset separating held-out scenes from training scenes.
pub const TEST_SEED_OFFSET: u64 = 1_000_000;

impl ExperimentConfig {
    pub fn bands(&self) -> HarmonyBands {
        HarmonyBands {
            high: self.harmony_high,
            low: self.harmony_low,
        }
    }

    pub fn training(&self, steps: usize, seed: u64, distill: Option<DistillConfig>) -> TrainingConfig {
        TrainingConfig {
            steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed,
            distill,
        }
    }

    pub fn train_set(&self, seed: u64) -> Result<Vec<SyntheticScene>> {
        generate_scenes(&self.scenario, seed * self.train_scenes as u64, self.train_scenes)
    }

    pub fn test_set(&self) -> Result<Vec<SyntheticScene>> {
        generate_scenes(&self.scenario, TEST_SEED_OFFSET, self.test_scenes)
    }
}

/// Held-out measurements of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub harmony: HarmonyHistogram,
    pub errors: ErrorBreakdown,
    pub toy_map: f64,
    /// Mean `|HS^t − HS^s|` over every cell of every level, when a teacher
    /// is given.
    pub hs_gap: Option<f64>,
}

/// Post-NMS detections of `net` on each scene.
pub fn predict(net: &DetectorNet, scenes: &[SyntheticScene], cfg: &ExperimentConfig) -> Result<Vec<Vec<Detection>>> {
    scenes
        .iter()
        .map(|s| {
            let preds: Vec<_> = forward(net, s)?.into_iter().map(|(_, p)| p).collect();
            Ok(post_nms(&preds, cfg.score_floor, cfg.nms_iou))
        })
        .collect()
}

/// Mean absolute harmony-score difference between `net` and `teacher`.
pub fn hs_gap(
    net: &DetectorNet,
    teacher: &DetectorNet,
    scenes: &[SyntheticScene],
    mode: PcMode,
    variant: HsVariant,
) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for s in scenes {
        let t = teacher_targets(teacher, s, mode, variant)?;
        for ((_, pred), tl) in forward(net, s)?.into_iter().zip(&t) {
            let tp = TaskProbabilityGrid::compute(&pred, &s.gts, mode, Provenance::Student)?;
            let hs = HarmonyGrid::compute(tp.level, &tp.p_c, &tp.p_r, variant)?;
            for (a, b) in hs.hs.as_slice().iter().zip(tl.hs.as_slice()) {
                sum += (a - b).abs();
            }
            count += tl.hs.len();
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

pub fn evaluate(
    net: &DetectorNet,
    scenes: &[SyntheticScene],
    cfg: &ExperimentConfig,
    teacher: Option<(&DetectorNet, PcMode, HsVariant)>,
) -> Result<EvalMetrics> {
    let dets = predict(net, scenes, cfg)?;
    let mut harmony = harmony_histogram(&[], cfg.harmony_threshold, cfg.bands());
    let mut errors = ErrorBreakdown::default();
    let mut pairs: Vec<(Vec<Detection>, GroundTruthSet)> = Vec::with_capacity(scenes.len());
    for (d, s) in dets.into_iter().zip(scenes) {
        harmony.merge(&harmony_histogram(
            &score_iou_pairs(&d, &s.gts),
            cfg.harmony_threshold,
            cfg.bands(),
        ));
        errors.merge(&error_analysis(&d, &s.gts, cfg.harmony_threshold));
        pairs.push((d, s.gts.clone()));
    }
    let hs_gap = match teacher {
        Some((t, mode, variant)) => Some(hs_gap(net, t, scenes, mode, variant)?),
        None => None,
    };
    Ok(EvalMetrics {
        harmony,
        errors,
        toy_map: toy_map(&pairs, cfg.scenario.classes),
        hs_gap,
    })
}

pub fn train_teacher(cfg: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    let scenes = cfg.train_set(seed)?;
    let net = DetectorNet::new(&cfg.scenario, cfg.teacher_width, seed)?;
    train(&net, &scenes, &cfg.training(cfg.teacher_steps, seed, None), None)
}

/// Trains a student from the seed-`seed` initialization, distilled from
/// `teacher` when `distill` is given.
pub fn train_student(
    cfg: &ExperimentConfig,
    seed: u64,
    teacher: Option<&DetectorNet>,
    distill: Option<DistillConfig>,
) -> Result<TrainOutcome> {
    let scenes = cfg.train_set(seed)?;
    let net = DetectorNet::new(&cfg.scenario, cfg.student_width, seed)?;
    train(&net, &scenes, &cfg.training(cfg.student_steps, seed, distill.clone()), teacher.filter(|_| distill.is_some()))
}

/// Vanilla and distilled students of one seed, measured on the same
/// held-out scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub vanilla: EvalMetrics,
    pub distilled: EvalMetrics,
    pub vanilla_trace: Vec<StepTrace>,
    pub distilled_trace: Vec<StepTrace>,
}

pub fn compare_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    teacher: &DetectorNet,
    distill: &DistillConfig,
    test: &[SyntheticScene],
) -> Result<SeedComparison> {
    let probe = Some((teacher, distill.pc_mode, distill.hs_variant));
    let vanilla = train_student(cfg, seed, None, None)?;
    let distilled = train_student(cfg, seed, Some(teacher), Some(distill.clone()))?;
    Ok(SeedComparison {
        seed,
        vanilla: evaluate(&vanilla.net, test, cfg, probe)?,
        distilled: evaluate(&distilled.net, test, cfg, probe)?,
        vanilla_trace: vanilla.trace,
        distilled_trace: distilled.trace,
    })
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One cell of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub metrics: EvalMetrics,
    pub final_hd: f64,
    pub final_tfd: f64,
}

fn ablation_row(
    cfg: &ExperimentConfig,
    seed: u64,
    teacher: &DetectorNet,
    test: &[SyntheticScene],
    label: String,
    distill: DistillConfig,
) -> Result<AblationRow> {
    let out = train_student(cfg, seed, Some(teacher), Some(distill.clone()))?;
    let metrics = evaluate(&out.net, test, cfg, Some((teacher, distill.pc_mode, distill.hs_variant)))?;
    let last = out.trace.last().expect("positive steps");
    Ok(AblationRow {
        label,
        metrics,
        final_hd: last.hd,
        final_tfd: last.tfd,
    })
}

/// Harmony-score variant by loss-norm grid.
pub fn hd_ablation(
    cfg: &ExperimentConfig,
    seed: u64,
    teacher: &DetectorNet,
    test: &[SyntheticScene],
    base: &DistillConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in HsVariant::ALL {
        for norm in [LossNorm::L1, LossNorm::L2] {
            let d = DistillConfig {
                hs_variant: variant,
                hd_norm: norm,
                ..base.clone()
            };
            rows.push(ablation_row(cfg, seed, teacher, test, format!("{}-{}", variant.name(), norm.name()), d)?);
        }
    }
    Ok(rows)
}

/// Feature-mask grid: whole map, classification mask, regression mask,
/// both with fixed equal weights, both with generated weights.
pub fn mask_ablation(
    cfg: &ExperimentConfig,
    seed: u64,
    teacher: &DetectorNet,
    test: &[SyntheticScene],
    base: &DistillConfig,
) -> Result<Vec<AblationRow>> {
    let masks = [
        ("whole", FeatureMask::Whole),
        ("cls", FeatureMask::Fixed { cls: 1.0, reg: 0.0 }),
        ("reg", FeatureMask::Fixed { cls: 0.0, reg: 1.0 }),
        ("cls+reg fixed", FeatureMask::Fixed { cls: 0.5, reg: 0.5 }),
        ("cls+reg dynamic", FeatureMask::Dynamic),
    ];
    masks
        .into_iter()
        .map(|(label, mask)| {
            let d = DistillConfig {
                feature_mask: mask,
                ..base.clone()
            };
            ablation_row(cfg, seed, teacher, test, label.to_string(), d)
        })
        .collect()
}
