//! Flat run configuration: file values, then flag overrides, then
//! validation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tbd_core::experiment::ExperimentConfig;
use tbd_core::feature_distill::FeatureMask;
use tbd_core::harmony::{HsVariant, LossNorm};
use tbd_core::task_signals::PcMode;
use tbd_core::toy_detector::{DistillConfig, HdWeighting, ScenarioSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub teacher: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub models: Vec<PathBuf>,

    pub extent: f64,
    pub input_cells: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_box: f64,
    pub max_box: f64,
    pub noise: f64,
    pub train_scenes: usize,
    pub test_scenes: usize,

    pub teacher_width: usize,
    pub student_width: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,

    pub alpha: f64,
    pub beta: f64,
    pub hs_variant: HsVariant,
    pub hd_norm: LossNorm,
    pub hd_weighting: HdWeighting,
    pub pc_mode: PcMode,
    /// `on`, `off`, `whole` or `fixed:<w_cls>,<w_reg>`.
    pub twg: String,
    pub twg_hidden: usize,

    pub score_floor: f64,
    pub nms_iou: f64,
    pub harmony_threshold: f64,
    pub harmony_high: f64,
    pub harmony_low: f64,

    pub gradcheck_points: usize,
    pub gradcheck_step: f64,
    pub gradcheck_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = ScenarioSpec::default();
        let e = ExperimentConfig::default();
        let d = DistillConfig::default();
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            teacher: None,
            data: None,
            models: Vec::new(),
            extent: s.extent,
            input_cells: s.input_cells,
            classes: s.classes,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            min_box: s.min_box,
            max_box: s.max_box,
            noise: s.noise,
            train_scenes: e.train_scenes,
            test_scenes: e.test_scenes,
            teacher_width: e.teacher_width,
            student_width: e.student_width,
            steps: e.student_steps,
            learning_rate: e.learning_rate,
            batch_size: e.batch_size,
            alpha: d.alpha,
            beta: d.beta,
            hs_variant: d.hs_variant,
            hd_norm: d.hd_norm,
            hd_weighting: d.hd_weighting,
            pc_mode: d.pc_mode,
            twg: "on".into(),
            twg_hidden: d.twg_hidden,
            score_floor: e.score_floor,
            nms_iou: e.nms_iou,
            harmony_threshold: e.harmony_threshold,
            harmony_high: e.harmony_high,
            harmony_low: e.harmony_low,
            gradcheck_points: 20,
            gradcheck_step: 1e-6,
            gradcheck_tolerance: 1e-4,
        }
    }
}

/// Parses the `twg` setting into a feature mask.
pub fn parse_twg(text: &str) -> Result<FeatureMask> {
    match text {
        "on" => Ok(FeatureMask::Dynamic),
        "off" => Ok(FeatureMask::Fixed { cls: 0.5, reg: 0.5 }),
        "whole" => Ok(FeatureMask::Whole),
        _ => {
            let Some(pair) = text.strip_prefix("fixed:") else {
                bail!("invalid value for `twg`: expected on, off, whole or fixed:<w_cls>,<w_reg>, got `{text}`");
            };
            let parts: Vec<&str> = pair.split(',').collect();
            let [c, r] = parts.as_slice() else {
                bail!("invalid value for `twg`: fixed weights need two comma-separated numbers, got `{pair}`");
            };
            let cls: f64 = c.trim().parse().with_context(|| format!("invalid value for `twg`: `{c}`"))?;
            let reg: f64 = r.trim().parse().with_context(|| format!("invalid value for `twg`: `{r}`"))?;
            if !(cls >= 0.0 && reg >= 0.0) {
                bail!("invalid value for `twg`: fixed weights must be non-negative, got ({cls}, {reg})");
            }
            Ok(FeatureMask::Fixed { cls, reg })
        }
    }
}

fn check(ok: bool, key: &str, detail: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        bail!("invalid value for `{key}`: {}", detail())
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        check(finite_nonneg(self.alpha), "alpha", || format!("must be non-negative, got {}", self.alpha))?;
        check(finite_nonneg(self.beta), "beta", || format!("must be non-negative, got {}", self.beta))?;
        check(self.extent > 0.0 && self.extent.is_finite(), "extent", || format!("must be positive, got {}", self.extent))?;
        check(self.input_cells >= 4 && self.input_cells % 4 == 0, "input_cells", || {
            format!("must be a positive multiple of 4, got {}", self.input_cells)
        })?;
        check(self.classes >= 2, "classes", || format!("must be at least 2, got {}", self.classes))?;
        check(self.min_objects <= self.max_objects, "min_objects", || {
            format!("{} exceeds max_objects {}", self.min_objects, self.max_objects)
        })?;
        check(self.min_box > 0.0 && self.min_box <= self.max_box, "min_box", || {
            format!("must be positive and at most max_box {}, got {}", self.max_box, self.min_box)
        })?;
        check(self.max_box <= self.extent, "max_box", || {
            format!("must fit in extent {}, got {}", self.extent, self.max_box)
        })?;
        check(finite_nonneg(self.noise), "noise", || format!("must be non-negative, got {}", self.noise))?;
        check(self.train_scenes > 0, "train_scenes", || "must be positive".into())?;
        check(self.test_scenes > 0, "test_scenes", || "must be positive".into())?;
        check(self.teacher_width > 0, "teacher_width", || "must be positive".into())?;
        check(self.student_width > 0, "student_width", || "must be positive".into())?;
        check(self.steps > 0, "steps", || "must be positive".into())?;
        check(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate", || {
            format!("must be positive, got {}", self.learning_rate)
        })?;
        check(self.batch_size > 0, "batch_size", || "must be positive".into())?;
        check(self.twg_hidden > 0, "twg_hidden", || "must be positive".into())?;
        parse_twg(&self.twg)?;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        for (key, v) in [
            ("score_floor", self.score_floor),
            ("nms_iou", self.nms_iou),
            ("harmony_threshold", self.harmony_threshold),
            ("harmony_high", self.harmony_high),
            ("harmony_low", self.harmony_low),
        ] {
            check(unit(v), key, || format!("must lie in [0, 1], got {v}"))?;
        }
        check(self.harmony_low <= self.harmony_high, "harmony_low", || {
            format!("{} exceeds harmony_high {}", self.harmony_low, self.harmony_high)
        })?;
        check(self.gradcheck_points > 0, "gradcheck_points", || "must be positive".into())?;
        check(self.gradcheck_step > 0.0, "gradcheck_step", || {
            format!("must be positive, got {}", self.gradcheck_step)
        })?;
        check(self.gradcheck_tolerance > 0.0, "gradcheck_tolerance", || {
            format!("must be positive, got {}", self.gradcheck_tolerance)
        })?;
        Ok(())
    }

    pub fn scenario(&self) -> ScenarioSpec {
        ScenarioSpec {
            extent: self.extent,
            input_cells: self.input_cells,
            classes: self.classes,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_box: self.min_box,
            max_box: self.max_box,
            noise: self.noise,
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            scenario: self.scenario(),
            teacher_width: self.teacher_width,
            student_width: self.student_width,
            train_scenes: self.train_scenes,
            test_scenes: self.test_scenes,
            teacher_steps: self.steps,
            student_steps: self.steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            score_floor: self.score_floor,
            nms_iou: self.nms_iou,
            harmony_threshold: self.harmony_threshold,
            harmony_high: self.harmony_high,
            harmony_low: self.harmony_low,
        }
    }

    pub fn distill(&self) -> Result<DistillConfig> {
        Ok(DistillConfig {
            alpha: self.alpha,
            beta: self.beta,
            hs_variant: self.hs_variant,
            hd_norm: self.hd_norm,
            hd_weighting: self.hd_weighting,
            pc_mode: self.pc_mode,
            feature_mask: parse_twg(&self.twg)?,
            twg_hidden: self.twg_hidden,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
