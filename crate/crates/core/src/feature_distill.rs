//! Feature mimicking, task-decoupled feature distillation with fixed or
//! generated task weights, and the combined training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::task_signals::Provenance;
use crate::tensor::Tensor;

/// Guard on mask-normalization denominators.
pub const MASK_EPS: f64 = 1e-12;

/// Dense feature map of one level, `(height*width) x channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLevel {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub data: Tensor,
    pub provenance: Provenance,
}

impl FeatureLevel {
    pub fn channels(&self) -> usize {
        self.data.cols()
    }
}

/// Per-level channel projection aligning student features to the teacher's
/// channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveLayer {
    pub levels: usize,
    pub student_channels: usize,
    pub teacher_channels: usize,
    pub params: ParamSet,
}

impl AdaptiveLayer {
    /// Identity when channel counts match, otherwise uniform
    /// `±1/sqrt(student_channels)`; biases start at zero.
    pub fn new(levels: usize, student_channels: usize, teacher_channels: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        for l in 0..levels {
            let w = if student_channels == teacher_channels {
                let mut w = Tensor::zeros(student_channels, teacher_channels);
                for k in 0..student_channels {
                    w.set(k, k, 1.0);
                }
                w
            } else {
                let bound = 1.0 / (student_channels as f64).sqrt();
                Tensor::new(
                    student_channels,
                    teacher_channels,
                    (0..student_channels * teacher_channels)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect(),
                )
            };
            params.insert(Self::weight_name(l), w);
            params.insert(Self::bias_name(l), Tensor::zeros(1, teacher_channels));
        }
        Self {
            levels,
            student_channels,
            teacher_channels,
            params,
        }
    }

    pub fn weight_name(level: usize) -> String {
        format!("phi.{level}.weight")
    }

    pub fn bias_name(level: usize) -> String {
        format!("phi.{level}.bias")
    }

    /// `φ(F^s)` for one level as a graph node.
    pub fn project_node(&self, g: &mut Graph, level: usize, student: NodeId) -> NodeId {
        let w = self.params.node(g, &Self::weight_name(level));
        let b = self.params.node(g, &Self::bias_name(level));
        g.affine(student, w, b)
    }

    pub fn project(&self, f_s: &FeatureLevel) -> Result<FeatureLevel> {
        if f_s.level >= self.levels {
            return Err(Error::InvalidArgument(format!("no adaptive layer for level {}", f_s.level)));
        }
        if f_s.channels() != self.student_channels {
            return Err(Error::InvalidArgument(format!(
                "adaptive layer expects {} channels, got {}",
                self.student_channels,
                f_s.channels()
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(f_s.data.clone());
        let y = self.project_node(&mut g, f_s.level, x);
        let mut b = Bindings::new();
        self.params.bind(&mut b);
        g.evaluate_all(&b)?;
        Ok(FeatureLevel {
            data: g.value(y).expect("evaluated").clone(),
            ..f_s.clone()
        })
    }
}

/// Two affine maps and a two-way softmax producing `(T⁰, T¹)` from the
/// pooled teacher and student probability masks.
#[derive(Clone, Debug, PartialEq)]
pub struct TwgModule {
    pub hidden: usize,
    pub params: ParamSet,
}

pub const TWG_FC1_WEIGHT: &str = "twg.fc1.weight";
pub const TWG_FC1_BIAS: &str = "twg.fc1.bias";
pub const TWG_FC2_WEIGHT: &str = "twg.fc2.weight";
pub const TWG_FC2_BIAS: &str = "twg.fc2.bias";

impl TwgModule {
    /// First map uniform `±1/sqrt(4)`, second map zero so the module starts
    /// at equal weights.
    pub fn new(hidden: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        params.insert(
            TWG_FC1_WEIGHT,
            Tensor::new(4, hidden, (0..4 * hidden).map(|_| rng.random_range(-0.5..0.5)).collect()),
        );
        params.insert(TWG_FC1_BIAS, Tensor::zeros(1, hidden));
        params.insert(TWG_FC2_WEIGHT, Tensor::zeros(hidden, 2));
        params.insert(TWG_FC2_BIAS, Tensor::zeros(1, 2));
        Self { hidden, params }
    }
}

/// Fixed `(ω_c, ω_r)` or generated per-level `(T⁰_l, T¹_l)`.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskWeights {
    Fixed { cls: f64, reg: f64 },
    Dynamic(TwgModule),
}

/// `(T⁰, T¹)` as a `1 x 2` node from four `N x 1` mask nodes.
pub fn twg_weights_node(
    g: &mut Graph,
    twg: &TwgModule,
    p_c_t: NodeId,
    p_r_t: NodeId,
    p_c_s: NodeId,
    p_r_s: NodeId,
) -> NodeId {
    let cat = g.concat(vec![p_c_t, p_r_t, p_c_s, p_r_s]);
    let pooled = g.global_avg_pool(cat);
    let w1 = twg.params.node(g, TWG_FC1_WEIGHT);
    let b1 = twg.params.node(g, TWG_FC1_BIAS);
    let h = g.affine(pooled, w1, b1);
    let w2 = twg.params.node(g, TWG_FC2_WEIGHT);
    let b2 = twg.params.node(g, TWG_FC2_BIAS);
    let logits = g.affine(h, w2, b2);
    g.softmax(logits)
}

/// Evaluated `(T⁰, T¹)` for one level's masks.
pub fn twg_weights(twg: &TwgModule, p_c_t: &Tensor, p_r_t: &Tensor, p_c_s: &Tensor, p_r_s: &Tensor) -> Result<(f64, f64)> {
    let shape = p_c_t.shape();
    if [p_r_t, p_c_s, p_r_s].iter().any(|t| t.shape() != shape) || shape.1 != 1 {
        return Err(Error::InvalidArgument("TWG masks must be four same-shape N x 1 grids".into()));
    }
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = [p_c_t, p_r_t, p_c_s, p_r_s]
        .iter()
        .map(|t| g.constant((*t).clone()))
        .collect();
    let w = twg_weights_node(&mut g, twg, nodes[0], nodes[1], nodes[2], nodes[3]);
    let mut b = Bindings::new();
    twg.params.bind(&mut b);
    g.evaluate_all(&b)?;
    let t = g.value(w).expect("evaluated");
    Ok((t.get(0, 0), t.get(0, 1)))
}

/// Per-cell squared residual summed over channels, `N x 1`.
pub fn residual_node(g: &mut Graph, teacher: NodeId, projected: NodeId) -> NodeId {
    let d = g.sub(teacher, projected);
    let sq = g.square(d);
    g.sum_cols(sq)
}

/// Unmasked mimic loss: `Σ_l Σ_cells Σ_channels (F^t − φ(F^s))²`.
pub fn fpn_mimic_loss(g: &mut Graph, levels: &[(NodeId, NodeId)]) -> NodeId {
    let terms: Vec<NodeId> = levels
        .iter()
        .map(|&(t, p)| {
            let r = residual_node(g, t, p);
            g.sum(r)
        })
        .collect();
    g.add_all(&terms)
}

/// `Σ mask·residual / (Σ mask + ε)`, or `None` for an all-zero mask.
pub fn masked_term(g: &mut Graph, residual: NodeId, mask: &Tensor) -> Option<NodeId> {
    let total = mask.sum();
    if total == 0.0 {
        return None;
    }
    let m = g.constant(mask.clone());
    let w = g.mul(m, residual);
    let num = g.sum(w);
    let den = g.scalar(total + MASK_EPS);
    Some(g.div(num, den))
}

/// One level of task-decoupled distillation: teacher features, projected
/// student features, and the teacher's probability masks (`N x 1`).
#[derive(Clone, Debug)]
pub struct TfdLevel {
    pub teacher: NodeId,
    pub projected: NodeId,
    pub p_c_t: Tensor,
    pub p_r_t: Tensor,
}

/// Fixed-weight task-decoupled distillation.
pub fn tfd_fixed(g: &mut Graph, levels: &[TfdLevel], w_cls: f64, w_reg: f64) -> Result<NodeId> {
    if w_cls < 0.0 || w_reg < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "task weights must be non-negative, got ({w_cls}, {w_reg})"
        )));
    }
    let mut terms = Vec::new();
    for lvl in levels {
        let r = residual_node(g, lvl.teacher, lvl.projected);
        for (mask, w) in [(&lvl.p_c_t, w_cls), (&lvl.p_r_t, w_reg)] {
            if let Some(t) = masked_term(g, r, mask) {
                terms.push(g.scale(t, w));
            }
        }
    }
    Ok(g.add_all(&terms))
}

/// Output of [`tfd_dynamic`]: the loss and each level's `1 x 2` weights.
#[derive(Clone, Debug)]
pub struct DynamicTfd {
    pub loss: NodeId,
    pub weights: Vec<NodeId>,
}

/// Task-decoupled distillation with TWG-generated weights. Student masks
/// enter the weight generator detached; gradients reach TWG only through
/// its parameters.
pub fn tfd_dynamic(
    g: &mut Graph,
    levels: &[TfdLevel],
    student_masks: &[(NodeId, NodeId)],
    twg: &TwgModule,
) -> DynamicTfd {
    assert_eq!(levels.len(), student_masks.len(), "one student mask pair per level");
    let mut terms = Vec::new();
    let mut weights = Vec::new();
    for (lvl, &(p_c_s, p_r_s)) in levels.iter().zip(student_masks) {
        let ct = g.constant(lvl.p_c_t.clone());
        let rt = g.constant(lvl.p_r_t.clone());
        let cs = g.detach(p_c_s);
        let rs = g.detach(p_r_s);
        let t = twg_weights_node(g, twg, ct, rt, cs, rs);
        weights.push(t);
        let r = residual_node(g, lvl.teacher, lvl.projected);
        for (k, mask) in [&lvl.p_c_t, &lvl.p_r_t].into_iter().enumerate() {
            if let Some(term) = masked_term(g, r, mask) {
                let tk = g.column(t, k);
                terms.push(g.mul(tk, term));
            }
        }
    }
    DynamicTfd {
        loss: g.add_all(&terms),
        weights,
    }
}

/// `detector + α·hd + β·tfd`.
pub fn total_loss(g: &mut Graph, detector: NodeId, hd: NodeId, tfd: NodeId, alpha: f64, beta: f64) -> NodeId {
    let a = g.scale(hd, alpha);
    let b = g.scale(tfd, beta);
    let s = g.add(detector, a);
    g.add(s, b)
}

pub fn total_loss_value(detector: f64, hd: f64, tfd: f64, alpha: f64, beta: f64) -> f64 {
    detector + alpha * hd + beta * tfd
}

/// Which spatial mask guides feature distillation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureMask {
    /// Uniform mask: the unmasked mimic loss normalized per level.
    Whole,
    Fixed { cls: f64, reg: f64 },
    Dynamic,
}
