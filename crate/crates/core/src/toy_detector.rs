//! Synthetic scenes and a two-level dense detector used to exercise the
//! distillation losses end to end.
//!
//! Scenes are square rasters. Each input cell carries a one-hot class
//! channel per class plus four channels holding the distances from the cell
//! center to the left, top, right and bottom sides of the object covering
//! it (normalized by a quarter of the scene extent). Objects are painted in
//! order, so later objects occlude earlier ones.
//!
//! The network pools the raster 2x2, applies affine+tanh to get the first
//! feature level (stride 4 for a 64-unit scene on a 32-cell raster), then
//! pools and applies affine+tanh again for the second level (stride 8).
//! Each level has its own classification and regression head.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::feature_distill::{
    tfd_dynamic, tfd_fixed, total_loss, AdaptiveLayer, FeatureLevel, FeatureMask, TfdLevel, TwgModule,
};
use crate::geometry::{decode_node, encode_distance, AnchorGrid, BBox, GroundTruth, GroundTruthSet};
use crate::harmony::{
    harmony_node, hd_loss_uniform, hd_loss_weighted, psi_node, HarmonyGrid, HsVariant, LossNorm,
    WeightedHdLevel,
};
use crate::params::{read_json, write_json, ParamSet, TensorRecord};
use crate::task_signals::{
    classification_probability, iou_matrix, regression_probability, PcMode, PredictionGrid,
    Provenance, TaskProbabilityGrid,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub extent: f64,
    /// Raster cells per side; must be a multiple of 4.
    pub input_cells: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_box: f64,
    pub max_box: f64,
    pub noise: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            extent: 64.0,
            input_cells: 32,
            classes: 3,
            min_objects: 1,
            max_objects: 4,
            min_box: 12.0,
            max_box: 28.0,
            noise: 0.05,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.classes < 2 {
            return bad(format!("classes must be at least 2, got {}", self.classes));
        }
        if !(self.extent > 0.0) {
            return bad(format!("extent must be positive, got {}", self.extent));
        }
        if self.input_cells < 4 || self.input_cells % 4 != 0 {
            return bad(format!("input_cells must be a positive multiple of 4, got {}", self.input_cells));
        }
        if self.min_objects > self.max_objects {
            return bad(format!("min_objects {} exceeds max_objects {}", self.min_objects, self.max_objects));
        }
        if !(self.min_box > 0.0 && self.min_box <= self.max_box && self.max_box <= self.extent) {
            return bad(format!(
                "impossible box sizes [{}, {}] for extent {}",
                self.min_box, self.max_box, self.extent
            ));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.classes + 4
    }

    fn input_stride(&self) -> f64 {
        self.extent / self.input_cells as f64
    }

    /// Anchor grids of the two feature levels.
    pub fn anchor_grids(&self) -> [AnchorGrid; 2] {
        let s0 = self.input_stride() * 2.0;
        let n0 = self.input_cells / 2;
        [
            AnchorGrid::new(0, s0, n0, n0),
            AnchorGrid::new(1, s0 * 2.0, n0 / 2, n0 / 2),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    /// `input_cells² x (classes + 4)` raster.
    pub input: Tensor,
    pub gts: GroundTruthSet,
}

/// Renders a scene; deterministic in `(spec, seed)`.
pub fn generate_scene(spec: &ScenarioSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<GroundTruth> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut candidate = None;
        for _attempt in 0..200 {
            let w = rng.random_range(spec.min_box..=spec.max_box);
            let h = rng.random_range(spec.min_box..=spec.max_box);
            let x1 = rng.random_range(0.0..=spec.extent - w);
            let y1 = rng.random_range(0.0..=spec.extent - h);
            let bbox = BBox::new(x1, y1, x1 + w, y1 + h)?;
            let class = rng.random_range(0..spec.classes);
            let crowded = objects.iter().any(|o| {
                o.bbox.iou(&bbox) > 0.25
                    || o.bbox.intersection(&bbox) > 0.5 * o.bbox.area().min(bbox.area())
            });
            candidate = Some(GroundTruth { bbox, class });
            if !crowded {
                break;
            }
        }
        objects.push(candidate.expect("at least one attempt"));
    }

    let n = spec.input_cells;
    let stride = spec.input_stride();
    let norm = spec.extent / 4.0;
    let ch = spec.in_channels();
    let mut input = Tensor::zeros(n * n, ch);
    for gt in &objects {
        let b = gt.bbox;
        for j in 0..n {
            let cy = stride * (j as f64 + 0.5);
            for i in 0..n {
                let cx = stride * (i as f64 + 0.5);
                if !b.contains(cx, cy) {
                    continue;
                }
                let r = j * n + i;
                for k in 0..spec.classes {
                    input.set(r, k, (k == gt.class) as u8 as f64);
                }
                let dists = [cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy];
                for (k, d) in dists.iter().enumerate() {
                    input.set(r, spec.classes + k, d / norm);
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("finite noise");
        for v in input.as_mut_slice() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(SyntheticScene {
        seed,
        input,
        gts: GroundTruthSet::new(objects, spec.classes)?,
    })
}

/// Scenes for seeds `first_seed .. first_seed + count`.
pub fn generate_scenes(spec: &ScenarioSpec, first_seed: u64, count: usize) -> Result<Vec<SyntheticScene>> {
    (0..count as u64).map(|k| generate_scene(spec, first_seed + k)).collect()
}

/// Graph nodes for one detector level.
#[derive(Clone, Copy, Debug)]
pub struct LevelNodes {
    pub feature: NodeId,
    pub logits: NodeId,
    pub offsets: NodeId,
    pub anchors: AnchorGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorNet {
    pub width: usize,
    pub spec: ScenarioSpec,
    pub params: ParamSet,
}

const BACKBONE: [&str; 2] = ["backbone.0", "backbone.1"];

fn head_name(level: usize, head: &str, part: &str) -> String {
    format!("head.{level}.{head}.{part}")
}

impl DetectorNet {
    /// Uniform `±1/sqrt(fan_in)` weights; classification bias at −2 and
    /// regression bias at a 10-unit half-extent prior.
    pub fn new(spec: &ScenarioSpec, width: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if width == 0 {
            return Err(Error::InvalidArgument("detector width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
        };
        let mut params = ParamSet::new();
        params.insert(format!("{}.weight", BACKBONE[0]), uniform(spec.in_channels(), width));
        params.insert(format!("{}.bias", BACKBONE[0]), Tensor::zeros(1, width));
        params.insert(format!("{}.weight", BACKBONE[1]), uniform(width, width));
        params.insert(format!("{}.bias", BACKBONE[1]), Tensor::zeros(1, width));
        for anchors in spec.anchor_grids() {
            let l = anchors.level;
            params.insert(head_name(l, "cls", "weight"), uniform(width, spec.classes));
            params.insert(head_name(l, "cls", "bias"), Tensor::filled(1, spec.classes, -2.0));
            params.insert(head_name(l, "reg", "weight"), uniform(width, 4));
            params.insert(
                head_name(l, "reg", "bias"),
                Tensor::filled(1, 4, encode_distance(10.0, anchors.stride)),
            );
        }
        Ok(Self {
            width,
            spec: spec.clone(),
            params,
        })
    }

    /// Zero-initialized heads; useful for checking the forward wiring.
    pub fn zero_heads(mut self) -> Self {
        let names: Vec<String> = self
            .params
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| n.starts_with("head."))
            .collect();
        for n in names {
            let t = self.params.get_mut(&n).expect("listed");
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        self
    }

    /// Adds the network to `g`. Parameters are trainable inputs when
    /// `trainable`, frozen inputs otherwise.
    pub fn build(&self, g: &mut Graph, input: NodeId, trainable: bool) -> Vec<LevelNodes> {
        let mut p = |name: String| {
            if trainable {
                self.params.node(g, &name)
            } else {
                self.params.frozen_node(g, &name)
            }
        };
        let w0 = p(format!("{}.weight", BACKBONE[0]));
        let b0 = p(format!("{}.bias", BACKBONE[0]));
        let w1 = p(format!("{}.weight", BACKBONE[1]));
        let b1 = p(format!("{}.bias", BACKBONE[1]));
        let heads: Vec<[NodeId; 4]> = (0..2)
            .map(|l| {
                [
                    p(head_name(l, "cls", "weight")),
                    p(head_name(l, "cls", "bias")),
                    p(head_name(l, "reg", "weight")),
                    p(head_name(l, "reg", "bias")),
                ]
            })
            .collect();

        let n = self.spec.input_cells;
        let pooled = g.avg_pool_2x2(input, n, n);
        let h = g.affine(pooled, w0, b0);
        let f0 = g.tanh(h);
        let pooled = g.avg_pool_2x2(f0, n / 2, n / 2);
        let h = g.affine(pooled, w1, b1);
        let f1 = g.tanh(h);

        [f0, f1]
            .into_iter()
            .zip(self.spec.anchor_grids())
            .zip(heads)
            .map(|((feature, anchors), [cw, cb, rw, rb])| LevelNodes {
                feature,
                logits: g.affine(feature, cw, cb),
                offsets: g.affine(feature, rw, rb),
                anchors,
            })
            .collect()
    }

    pub fn bind(&self, bindings: &mut Bindings) {
        self.params.bind(bindings);
    }

    pub fn save(&self, path: &Path, trace: &[StepTrace], auxiliary: &[&ParamSet]) -> Result<()> {
        let ckpt = Checkpoint {
            kind: "detector".into(),
            width: self.width,
            scenario: self.spec.clone(),
            tensors: self.params.to_records(),
            auxiliary: auxiliary.iter().flat_map(|p| p.to_records()).collect(),
            trace: trace.to_vec(),
        };
        write_json(path, &ckpt)
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ckpt: Checkpoint = read_json(path)?;
        let net = Self::from_checkpoint(&ckpt)?;
        Ok((net, ckpt))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "detector" {
            return Err(Error::Checkpoint(format!("unexpected kind `{}`", ckpt.kind)));
        }
        let params = ParamSet::from_records(ckpt.tensors.clone())?;
        let reference = DetectorNet::new(&ckpt.scenario, ckpt.width, 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint("unexpected extra tensors".into()));
        }
        Ok(Self {
            width: ckpt.width,
            spec: ckpt.scenario.clone(),
            params,
        })
    }
}

/// Text checkpoint document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub kind: String,
    pub width: usize,
    pub scenario: ScenarioSpec,
    pub tensors: Vec<TensorRecord>,
    #[serde(default)]
    pub auxiliary: Vec<TensorRecord>,
    #[serde(default)]
    pub trace: Vec<StepTrace>,
}

/// Evaluated features and predictions of every level.
pub fn forward(net: &DetectorNet, scene: &SyntheticScene) -> Result<Vec<(FeatureLevel, PredictionGrid)>> {
    let mut g = Graph::new();
    let x = g.constant(scene.input.clone());
    let levels = net.build(&mut g, x, false);
    let mut b = Bindings::new();
    net.bind(&mut b);
    g.evaluate_all(&b)?;
    let val = |id: NodeId| g.value(id).expect("evaluated").clone();
    Ok(levels
        .iter()
        .map(|lvl| {
            (
                FeatureLevel {
                    level: lvl.anchors.level,
                    height: lvl.anchors.height,
                    width: lvl.anchors.width,
                    data: val(lvl.feature),
                    provenance: Provenance::Student,
                },
                PredictionGrid {
                    anchors: lvl.anchors,
                    logits: val(lvl.logits),
                    offsets: val(lvl.offsets),
                },
            )
        })
        .collect())
}

/// Classification targets: 1 where the cell center lies inside a ground
/// truth of that class.
pub fn class_targets(anchors: &AnchorGrid, gts: &GroundTruthSet, classes: usize) -> Tensor {
    let mut t = Tensor::zeros(anchors.cells(), classes);
    for (r, (cx, cy)) in anchors.centers().enumerate() {
        for gt in gts.iter() {
            if gt.bbox.contains(cx, cy) {
                t.set(r, gt.class, 1.0);
            }
        }
    }
    t
}

/// `N x G` indicator of which ground truths contain each cell center.
fn containment(anchors: &AnchorGrid, gts: &GroundTruthSet) -> Tensor {
    let mut t = Tensor::zeros(anchors.cells(), gts.len());
    for (r, (cx, cy)) in anchors.centers().enumerate() {
        for (k, gt) in gts.iter().enumerate() {
            if gt.bbox.contains(cx, cy) {
                t.set(r, k, 1.0);
            }
        }
    }
    t
}

/// Head outputs of one level as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct DetectorLevel {
    pub anchors: AnchorGrid,
    pub logits: NodeId,
    pub offsets: NodeId,
}

/// Detector loss: per level, the mean binary cross-entropy over every
/// (cell, class) logit plus the mean of `1 − IoU` over positive cells,
/// summed over levels. A positive cell is one whose center lies inside a
/// ground truth; its regression target is the containing ground truth with
/// the highest IoU against the decoded box.
pub fn detector_loss_node(g: &mut Graph, levels: &[DetectorLevel], gts: &GroundTruthSet, classes: usize) -> NodeId {
    let mut terms = Vec::new();
    for lvl in levels {
        let y = g.constant(class_targets(&lvl.anchors, gts, classes));
        let sp = g.softplus(lvl.logits);
        let yz = g.mul(y, lvl.logits);
        let bce = g.sub(sp, yz);
        terms.push(g.mean(bce));

        let contain = containment(&lvl.anchors, gts);
        let positive: Vec<f64> = (0..contain.rows())
            .map(|r| contain.row(r).iter().any(|&v| v > 0.0) as u8 as f64)
            .collect();
        let count = positive.iter().sum::<f64>();
        if count == 0.0 {
            continue;
        }
        let boxes = decode_node(g, lvl.offsets, &lvl.anchors);
        let ious = iou_matrix(g, &boxes, gts).expect("positives imply ground truths");
        let c = g.constant(contain);
        let masked = g.mul(ious, c);
        let best = g.max_reduce(masked);
        let one = g.scalar(1.0);
        let miss = g.sub(one, best);
        let p = g.constant(Tensor::column(positive));
        let miss = g.mul(p, miss);
        let total = g.sum(miss);
        terms.push(g.scale(total, 1.0 / count));
    }
    g.add_all(&terms)
}

/// Stand-alone detector-loss graph over bound prediction grids. Trainable
/// inputs are `logits.{level}` and `offsets.{level}`.
pub fn detector_loss_graph(preds: &[PredictionGrid], gts: &GroundTruthSet) -> Result<(Graph, Bindings)> {
    let classes = preds.first().map_or(0, |p| p.classes());
    if preds.iter().any(|p| p.classes() != classes) {
        return Err(Error::InvalidArgument("levels disagree on class count".into()));
    }
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let mut levels = Vec::new();
    for p in preds {
        let l = p.level();
        let logits = g.trainable(format!("logits.{l}"));
        let offsets = g.trainable(format!("offsets.{l}"));
        b.insert(format!("logits.{l}"), p.logits.clone());
        b.insert(format!("offsets.{l}"), p.offsets.clone());
        levels.push(DetectorLevel {
            anchors: p.anchors,
            logits,
            offsets,
        });
    }
    let loss = detector_loss_node(&mut g, &levels, gts, classes);
    g.set_output(loss);
    Ok((g, b))
}

/// Whether harmony distillation weights cells by the Ψ foreground mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HdWeighting {
    Uniform,
    #[default]
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub hs_variant: HsVariant,
    pub hd_norm: LossNorm,
    pub hd_weighting: HdWeighting,
    pub pc_mode: PcMode,
    pub feature_mask: FeatureMask,
    pub twg_hidden: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 0.01,
            hs_variant: HsVariant::Tanh,
            hd_norm: LossNorm::L1,
            hd_weighting: HdWeighting::Weighted,
            pc_mode: PcMode::Softmax,
            feature_mask: FeatureMask::Dynamic,
            twg_hidden: 16,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be a finite non-negative number, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be a finite non-negative number, got {}", self.beta));
        }
        if let FeatureMask::Fixed { cls, reg } = self.feature_mask {
            if !(cls >= 0.0 && reg >= 0.0) {
                return bad(format!("fixed task weights must be non-negative, got ({cls}, {reg})"));
            }
        }
        if self.twg_hidden == 0 {
            return bad("twg_hidden must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub distill: Option<DistillConfig>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            learning_rate: 0.5,
            batch_size: 4,
            seed: 0,
            distill: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        match &self.distill {
            Some(d) => d.validate(),
            None => Ok(()),
        }
    }
}

/// Loss components of one step, each averaged over the batch. `twg` holds
/// the batch-mean `(T⁰, T¹)` per level when weights are generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepTrace {
    pub step: usize,
    pub total: f64,
    pub detector: f64,
    pub hd: f64,
    pub tfd: f64,
    #[serde(default)]
    pub twg: Vec<(f64, f64)>,
}

/// Frozen teacher quantities of one level of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherLevel {
    pub feature: Tensor,
    pub p_c: Tensor,
    pub p_r: Tensor,
    pub hs: Tensor,
}

/// Evaluates the teacher once per scene; training reuses the result.
pub fn teacher_targets(
    teacher: &DetectorNet,
    scene: &SyntheticScene,
    mode: PcMode,
    variant: HsVariant,
) -> Result<Vec<TeacherLevel>> {
    forward(teacher, scene)?
        .into_iter()
        .map(|(feature, pred)| {
            let tp = TaskProbabilityGrid::compute(&pred, &scene.gts, mode, Provenance::Teacher)?;
            let hs = HarmonyGrid::compute(tp.level, &tp.p_c, &tp.p_r, variant)?;
            Ok(TeacherLevel {
                feature: feature.data,
                p_c: tp.p_c,
                p_r: tp.p_r,
                hs: hs.hs,
            })
        })
        .collect()
}

/// Student-side distillation state.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillState {
    pub config: DistillConfig,
    pub phi: AdaptiveLayer,
    pub twg: Option<TwgModule>,
}

impl DistillState {
    /// Initializes φ and TWG from a stream of `seed` disjoint from the one
    /// used for batch sampling.
    pub fn new(config: &DistillConfig, student: &DetectorNet, teacher: &DetectorNet, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let phi = AdaptiveLayer::new(2, student.width, teacher.width, &mut rng);
        let twg = (config.feature_mask == FeatureMask::Dynamic).then(|| TwgModule::new(config.twg_hidden, &mut rng));
        Self {
            config: config.clone(),
            phi,
            twg,
        }
    }

    fn bind(&self, b: &mut Bindings) {
        self.phi.params.bind(b);
        if let Some(twg) = &self.twg {
            twg.params.bind(b);
        }
    }
}

/// Nodes of one scene's training objective.
pub struct Objective {
    pub total: NodeId,
    pub detector: NodeId,
    pub hd: Option<NodeId>,
    pub tfd: Option<NodeId>,
    pub twg: Vec<NodeId>,
}

/// Builds the training objective of one scene. Without distillation this
/// is the bare detector loss.
pub fn build_objective(
    g: &mut Graph,
    net: &DetectorNet,
    scene: &SyntheticScene,
    distill: Option<(&DistillState, &[TeacherLevel])>,
) -> Objective {
    let x = g.constant(scene.input.clone());
    let levels = net.build(g, x, true);
    let det_levels: Vec<DetectorLevel> = levels
        .iter()
        .map(|l| DetectorLevel {
            anchors: l.anchors,
            logits: l.logits,
            offsets: l.offsets,
        })
        .collect();
    let detector = detector_loss_node(g, &det_levels, &scene.gts, net.spec.classes);
    let Some((state, teacher)) = distill else {
        return Objective {
            total: detector,
            detector,
            hd: None,
            tfd: None,
            twg: Vec::new(),
        };
    };
    let cfg = &state.config;

    let mut hd_uniform = Vec::new();
    let mut hd_weighted = Vec::new();
    let mut student_masks = Vec::new();
    let mut tfd_levels = Vec::new();
    for (lvl, t) in levels.iter().zip(teacher) {
        let p_c = classification_probability(g, lvl.logits, cfg.pc_mode);
        let p_r = regression_probability(g, lvl.offsets, &lvl.anchors, &scene.gts);
        let (hs, _) = harmony_node(g, p_c, p_r, cfg.hs_variant);
        let hs_t = g.constant(t.hs.clone());
        match cfg.hd_weighting {
            HdWeighting::Uniform => hd_uniform.push((hs_t, hs)),
            HdWeighting::Weighted => {
                let psi = (t.p_r.sum() > 0.0).then(|| psi_node(g, &t.p_r, &t.p_c, p_c));
                hd_weighted.push(WeightedHdLevel {
                    teacher: hs_t,
                    student: hs,
                    psi,
                });
            }
        }
        student_masks.push((p_c, p_r));
        let teacher_feature = g.constant(t.feature.clone());
        let projected = state.phi.project_node(g, lvl.anchors.level, lvl.feature);
        let (p_c_t, p_r_t) = match cfg.feature_mask {
            FeatureMask::Whole => {
                let ones = Tensor::filled(t.p_c.rows(), 1, 1.0);
                (ones.clone(), ones)
            }
            _ => (t.p_c.clone(), t.p_r.clone()),
        };
        tfd_levels.push(TfdLevel {
            teacher: teacher_feature,
            projected,
            p_c_t,
            p_r_t,
        });
    }
    let hd = match cfg.hd_weighting {
        HdWeighting::Uniform => hd_loss_uniform(g, &hd_uniform, cfg.hd_norm),
        HdWeighting::Weighted => hd_loss_weighted(g, &hd_weighted, cfg.hd_norm),
    };
    let (tfd, twg) = match (&cfg.feature_mask, &state.twg) {
        (FeatureMask::Dynamic, Some(twg)) => {
            let out = tfd_dynamic(g, &tfd_levels, &student_masks, twg);
            (out.loss, out.weights)
        }
        (FeatureMask::Fixed { cls, reg }, _) => (
            tfd_fixed(g, &tfd_levels, *cls, *reg).expect("validated weights"),
            Vec::new(),
        ),
        _ => (
            tfd_fixed(g, &tfd_levels, 0.5, 0.5).expect("valid weights"),
            Vec::new(),
        ),
    };
    let total = total_loss(g, detector, hd, tfd, cfg.alpha, cfg.beta);
    Objective {
        total,
        detector,
        hd: Some(hd),
        tfd: Some(tfd),
        twg,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub net: DetectorNet,
    pub distill: Option<DistillState>,
    pub trace: Vec<StepTrace>,
}

/// Plain gradient descent on the per-batch mean objective. Batches are
/// drawn with replacement from `scenes` by a generator seeded with
/// `config.seed`; the teacher, when present, is evaluated once per scene
/// and never updated.
pub fn train(
    net: &DetectorNet,
    scenes: &[SyntheticScene],
    config: &TrainingConfig,
    teacher: Option<&DetectorNet>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no training scenes".into()));
    }
    let mut state = match (&config.distill, teacher) {
        (Some(d), Some(t)) => {
            if t.spec != net.spec {
                return Err(Error::InvalidArgument("teacher and student scenarios differ".into()));
            }
            Some(DistillState::new(d, net, t, config.seed))
        }
        (None, None) => None,
        (Some(_), None) => {
            return Err(Error::InvalidArgument("distillation requires a teacher".into()));
        }
        (None, Some(_)) => {
            return Err(Error::InvalidArgument("a teacher was given but distillation is off".into()));
        }
    };
    let targets: Vec<Vec<TeacherLevel>> = match (&state, teacher) {
        (Some(s), Some(t)) => scenes
            .iter()
            .map(|sc| teacher_targets(t, sc, s.config.pc_mode, s.config.hs_variant))
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };

    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.steps);
    let scale = 1.0 / config.batch_size as f64;
    for step in 0..config.steps {
        let mut grads = Gradients::new();
        let mut row = StepTrace {
            step,
            total: 0.0,
            detector: 0.0,
            hd: 0.0,
            tfd: 0.0,
            twg: Vec::new(),
        };
        for _ in 0..config.batch_size {
            let k = rng.random_range(0..scenes.len());
            let mut g = Graph::new();
            let distill = state.as_ref().map(|s| (s, targets[k].as_slice()));
            let obj = build_objective(&mut g, &net, &scenes[k], distill);
            g.set_output(obj.total);
            let mut b = Bindings::new();
            net.bind(&mut b);
            if let Some(s) = &state {
                s.bind(&mut b);
            }
            let total = match g.evaluate(&b) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteLoss { step }),
                Err(e) => return Err(e),
            };
            let value = |id: Option<NodeId>| id.map_or(0.0, |id| g.value(id).expect("evaluated").item());
            row.total += scale * total;
            row.detector += scale * value(Some(obj.detector));
            row.hd += scale * value(obj.hd);
            row.tfd += scale * value(obj.tfd);
            if row.twg.is_empty() {
                row.twg = vec![(0.0, 0.0); obj.twg.len()];
            }
            for (acc, &w) in row.twg.iter_mut().zip(&obj.twg) {
                let t = g.value(w).expect("evaluated");
                acc.0 += scale * t.get(0, 0);
                acc.1 += scale * t.get(0, 1);
            }
            for (name, d) in g.backpropagate()? {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, v) in acc.as_mut_slice().iter_mut().zip(d.as_slice()) {
                            *a += v;
                        }
                    }
                    None => {
                        grads.insert(name, d);
                    }
                }
            }
        }
        let lr = config.learning_rate * scale;
        net.params.descend(&grads, lr);
        if let Some(s) = state.as_mut() {
            s.phi.params.descend(&grads, lr);
            if let Some(twg) = s.twg.as_mut() {
                twg.params.descend(&grads, lr);
            }
        }
        trace.push(row);
    }
    Ok(TrainOutcome {
        net,
        distill: state,
        trace,
    })
}

/// One serialized scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub seed: u64,
    pub input: TensorRecord,
    pub objects: Vec<GroundTruth>,
}

/// Scene document: the generating scenario plus the rendered scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub scenario: ScenarioSpec,
    pub scenes: Vec<SceneRecord>,
}

pub fn save_scenes(path: &Path, spec: &ScenarioSpec, scenes: &[SyntheticScene]) -> Result<()> {
    let file = SceneFile {
        scenario: spec.clone(),
        scenes: scenes
            .iter()
            .map(|s| SceneRecord {
                seed: s.seed,
                input: TensorRecord {
                    name: "input".into(),
                    shape: [s.input.rows(), s.input.cols()],
                    values: s.input.as_slice().to_vec(),
                },
                objects: s.gts.objects.clone(),
            })
            .collect(),
    };
    write_json(path, &file)
}

pub fn load_scenes(path: &Path) -> Result<(ScenarioSpec, Vec<SyntheticScene>)> {
    let file: SceneFile = read_json(path)?;
    file.scenario.validate()?;
    let n = file.scenario.input_cells;
    let shape = [n * n, file.scenario.in_channels()];
    let scenes = file
        .scenes
        .into_iter()
        .map(|r| {
            if r.input.shape != shape || r.input.values.len() != shape[0] * shape[1] {
                return Err(Error::Checkpoint(format!(
                    "scene {} input has shape {:?}, expected {:?}",
                    r.seed, r.input.shape, shape
                )));
            }
            Ok(SyntheticScene {
                seed: r.seed,
                input: Tensor::new(shape[0], shape[1], r.input.values),
                gts: GroundTruthSet::new(r.objects, file.scenario.classes)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((file.scenario, scenes))
}
