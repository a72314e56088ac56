//! Finite-difference checks of every loss at random points, shared by the
//! command-line `gradcheck` and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_check, Bindings, Graph, NodeId};
use crate::error::Result;
use crate::feature_distill::{fpn_mimic_loss, tfd_dynamic, tfd_fixed, AdaptiveLayer, TfdLevel, TwgModule};
use crate::geometry::{AnchorGrid, BBox, GroundTruth, GroundTruthSet};
use crate::harmony::{harmony_node, hd_loss_uniform, hd_loss_weighted, psi_node, HsVariant, LossNorm, WeightedHdLevel};
use crate::task_signals::{classification_probability, regression_probability, PcMode, PredictionGrid};
use crate::tensor::Tensor;
use crate::toy_detector::detector_loss_graph;

pub const SUITE_LOSSES: [&str; 6] = [
    "hd_loss_uniform",
    "hd_loss_weighted",
    "fpn_mimic_loss",
    "tfd_fixed",
    "tfd_dynamic",
    "detector_loss",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub loss: String,
    pub points: usize,
    pub coordinates: usize,
    pub tie_flips: usize,
    pub max_rel_error: f64,
}

impl SuiteResult {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

const EXTENT: f64 = 32.0;
const CLASSES: usize = 3;
const STUDENT_CH: usize = 3;
const TEACHER_CH: usize = 5;

fn grids() -> [AnchorGrid; 2] {
    [
        AnchorGrid::for_extent(0, EXTENT, 8.0),
        AnchorGrid::for_extent(1, EXTENT, 16.0),
    ]
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

fn random_gts(rng: &mut ChaCha8Rng) -> GroundTruthSet {
    let objects = (0..2)
        .map(|_| {
            let w = rng.random_range(8.0..20.0);
            let h = rng.random_range(8.0..20.0);
            let x1 = rng.random_range(0.0..EXTENT - w);
            let y1 = rng.random_range(0.0..EXTENT - h);
            GroundTruth {
                bbox: BBox { x1, y1, x2: x1 + w, y2: y1 + h },
                class: rng.random_range(0..CLASSES),
            }
        })
        .collect();
    GroundTruthSet::new(objects, CLASSES).expect("valid boxes")
}

/// Offsets decoding to half-extents of roughly 3 to 12 units.
fn random_offsets(rng: &mut ChaCha8Rng, anchors: &AnchorGrid) -> Tensor {
    random_tensor(rng, anchors.cells(), 4, -1.0, 1.0).map(|v| v + 8.0 / anchors.stride - 0.5)
}

struct Point {
    graph: Graph,
    bindings: Bindings,
}

/// Student head inputs and the p_c / p_r / HS nodes derived from them.
struct HeadNodes {
    p_c: NodeId,
    p_r: NodeId,
    hs: NodeId,
}

fn student_heads(
    g: &mut Graph,
    b: &mut Bindings,
    rng: &mut ChaCha8Rng,
    gts: &GroundTruthSet,
    mode: PcMode,
    variant: HsVariant,
) -> Vec<HeadNodes> {
    grids()
        .iter()
        .map(|a| {
            let l = a.level;
            let logits = g.trainable(format!("logits.{l}"));
            let offsets = g.trainable(format!("offsets.{l}"));
            b.insert(format!("logits.{l}"), random_tensor(rng, a.cells(), CLASSES, -3.0, 3.0));
            b.insert(format!("offsets.{l}"), random_offsets(rng, a));
            let p_c = classification_probability(g, logits, mode);
            let p_r = regression_probability(g, offsets, a, gts);
            let (hs, _) = harmony_node(g, p_c, p_r, variant);
            HeadNodes { p_c, p_r, hs }
        })
        .collect()
}

fn hd_point(rng: &mut ChaCha8Rng, k: usize, weighted: bool) -> Point {
    let mode = if k % 2 == 0 { PcMode::Softmax } else { PcMode::Sigmoid };
    let variant = HsVariant::ALL[k % 3];
    let norm = if k % 4 < 2 { LossNorm::L1 } else { LossNorm::L2 };
    let gts = random_gts(rng);
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let heads = student_heads(&mut g, &mut b, rng, &gts, mode, variant);
    let mut uniform = Vec::new();
    let mut levels = Vec::new();
    for (h, a) in heads.iter().zip(grids()) {
        let n = a.cells();
        let hs_t = g.constant(random_tensor(rng, n, 1, variant.floor(), 1.0));
        if weighted {
            let p_r_t = random_tensor(rng, n, 1, 0.0, 1.0);
            let p_c_t = random_tensor(rng, n, 1, 0.0, 1.0);
            let psi = psi_node(&mut g, &p_r_t, &p_c_t, h.p_c);
            levels.push(WeightedHdLevel {
                teacher: hs_t,
                student: h.hs,
                psi: Some(psi),
            });
        } else {
            uniform.push((hs_t, h.hs));
        }
    }
    let loss = if weighted {
        hd_loss_weighted(&mut g, &levels, norm)
    } else {
        hd_loss_uniform(&mut g, &uniform, norm)
    };
    g.set_output(loss);
    Point { graph: g, bindings: b }
}

/// Student features, teacher features and a φ projection per level.
fn feature_setup(
    g: &mut Graph,
    b: &mut Bindings,
    rng: &mut ChaCha8Rng,
) -> (Vec<(NodeId, NodeId)>, AdaptiveLayer) {
    let mut phi = AdaptiveLayer::new(2, STUDENT_CH, TEACHER_CH, rng);
    let names: Vec<String> = phi.params.iter().map(|(n, _)| n.clone()).collect();
    for n in names {
        let t = phi.params.get_mut(&n).expect("listed");
        *t = random_tensor(rng, t.rows(), t.cols(), -1.0, 1.0);
    }
    phi.params.bind(b);
    let pairs = grids()
        .iter()
        .map(|a| {
            let l = a.level;
            let fs = g.trainable(format!("features.{l}"));
            b.insert(format!("features.{l}"), random_tensor(rng, a.cells(), STUDENT_CH, -1.0, 1.0));
            let ft = g.constant(random_tensor(rng, a.cells(), TEACHER_CH, -1.0, 1.0));
            let proj = phi.project_node(g, l, fs);
            (ft, proj)
        })
        .collect();
    (pairs, phi)
}

fn mimic_point(rng: &mut ChaCha8Rng) -> Point {
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let (pairs, _) = feature_setup(&mut g, &mut b, rng);
    let loss = fpn_mimic_loss(&mut g, &pairs);
    g.set_output(loss);
    Point { graph: g, bindings: b }
}

fn tfd_levels(rng: &mut ChaCha8Rng, pairs: &[(NodeId, NodeId)]) -> Vec<TfdLevel> {
    pairs
        .iter()
        .zip(grids())
        .map(|(&(teacher, projected), a)| TfdLevel {
            teacher,
            projected,
            p_c_t: random_tensor(rng, a.cells(), 1, 0.0, 1.0),
            p_r_t: random_tensor(rng, a.cells(), 1, 0.0, 1.0),
        })
        .collect()
}

fn tfd_fixed_point(rng: &mut ChaCha8Rng) -> Point {
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let (pairs, _) = feature_setup(&mut g, &mut b, rng);
    let levels = tfd_levels(rng, &pairs);
    let (wc, wr) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let loss = tfd_fixed(&mut g, &levels, wc, wr).expect("non-negative weights");
    g.set_output(loss);
    Point { graph: g, bindings: b }
}

fn tfd_dynamic_point(rng: &mut ChaCha8Rng, k: usize) -> Point {
    let mode = if k % 2 == 0 { PcMode::Softmax } else { PcMode::Sigmoid };
    let gts = random_gts(rng);
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let (pairs, _) = feature_setup(&mut g, &mut b, rng);
    let levels = tfd_levels(rng, &pairs);
    let heads = student_heads(&mut g, &mut b, rng, &gts, mode, HsVariant::Tanh);
    let masks: Vec<(NodeId, NodeId)> = heads.iter().map(|h| (h.p_c, h.p_r)).collect();
    let mut twg = TwgModule::new(4, rng);
    let names: Vec<String> = twg.params.iter().map(|(n, _)| n.clone()).collect();
    for n in names {
        let t = twg.params.get_mut(&n).expect("listed");
        *t = random_tensor(rng, t.rows(), t.cols(), -1.0, 1.0);
    }
    twg.params.bind(&mut b);
    let out = tfd_dynamic(&mut g, &levels, &masks, &twg);
    g.set_output(out.loss);
    Point { graph: g, bindings: b }
}

fn detector_point(rng: &mut ChaCha8Rng) -> Result<Point> {
    let gts = random_gts(rng);
    let preds: Vec<PredictionGrid> = grids()
        .iter()
        .map(|a| PredictionGrid {
            anchors: *a,
            logits: random_tensor(rng, a.cells(), CLASSES, -3.0, 3.0),
            offsets: random_offsets(rng, a),
        })
        .collect();
    let (graph, bindings) = detector_loss_graph(&preds, &gts)?;
    Ok(Point { graph, bindings })
}

/// Runs `points` random points of every loss in [`SUITE_LOSSES`].
pub fn gradient_suite(points: usize, seed: u64, step: f64) -> Result<Vec<SuiteResult>> {
    SUITE_LOSSES
        .iter()
        .enumerate()
        .map(|(i, &loss)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut out = SuiteResult {
                loss: loss.to_string(),
                points,
                coordinates: 0,
                tie_flips: 0,
                max_rel_error: 0.0,
            };
            for k in 0..points {
                let mut p = match i {
                    0 => hd_point(&mut rng, k, false),
                    1 => hd_point(&mut rng, k, true),
                    2 => mimic_point(&mut rng),
                    3 => tfd_fixed_point(&mut rng),
                    4 => tfd_dynamic_point(&mut rng, k),
                    _ => detector_point(&mut rng)?,
                };
                let r = finite_difference_check(&mut p.graph, &p.bindings, step)?;
                out.coordinates += r.coordinates;
                out.tie_flips += r.tie_flips.len();
                out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
            }
            Ok(out)
        })
        .collect()
}
