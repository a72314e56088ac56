//! Per-cell classification and regression probabilities of a prediction grid.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::error::Result;
use crate::geometry::{decode_node, iou_node, AnchorGrid, BoxNodes, GroundTruthSet};
use crate::tensor::Tensor;

/// How the per-cell maximum class logit is mapped into `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcMode {
    /// Softmax across all cells of the level.
    #[default]
    Softmax,
    /// Independent logistic per cell.
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Teacher,
    Student,
}

/// Dense head output for one level: `N x C` logits and `N x 4` offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionGrid {
    pub anchors: AnchorGrid,
    pub logits: Tensor,
    pub offsets: Tensor,
}

impl PredictionGrid {
    pub fn level(&self) -> usize {
        self.anchors.level
    }

    pub fn classes(&self) -> usize {
        self.logits.cols()
    }
}

/// `p_c` from an `N x C` logit node: per-cell max over classes, then the
/// selected normalization. Returns an `N x 1` node.
pub fn classification_probability(g: &mut Graph, logits: NodeId, mode: PcMode) -> NodeId {
    let best = g.max_reduce(logits);
    match mode {
        PcMode::Softmax => g.softmax(best),
        PcMode::Sigmoid => g.sigmoid(best),
    }
}

/// `N x G` IoU of every decoded box against every ground truth, or `None`
/// when there are no ground truths.
pub fn iou_matrix(g: &mut Graph, boxes: &BoxNodes, gts: &GroundTruthSet) -> Option<NodeId> {
    if gts.is_empty() {
        return None;
    }
    let cols = gts
        .iter()
        .map(|gt| {
            let gn = BoxNodes::constant(g, &gt.bbox);
            iou_node(g, boxes, &gn)
        })
        .collect();
    Some(g.concat(cols))
}

/// `p_r`: per-cell max IoU of the decoded box against all ground truths.
/// An empty ground-truth set yields a zero grid.
pub fn regression_probability(
    g: &mut Graph,
    offsets: NodeId,
    anchors: &AnchorGrid,
    gts: &GroundTruthSet,
) -> NodeId {
    let boxes = decode_node(g, offsets, anchors);
    match iou_matrix(g, &boxes, gts) {
        Some(m) => g.max_reduce(m),
        None => g.constant(Tensor::zeros(anchors.cells(), 1)),
    }
}

/// Evaluated `p_c` and `p_r` grids for one level.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskProbabilityGrid {
    pub level: usize,
    pub p_c: Tensor,
    pub p_r: Tensor,
    pub provenance: Provenance,
}

impl TaskProbabilityGrid {
    pub fn compute(
        pred: &PredictionGrid,
        gts: &GroundTruthSet,
        mode: PcMode,
        provenance: Provenance,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let logits = g.constant(pred.logits.clone());
        let offsets = g.constant(pred.offsets.clone());
        let p_c = classification_probability(&mut g, logits, mode);
        let p_r = regression_probability(&mut g, offsets, &pred.anchors, gts);
        g.evaluate_all(&Bindings::new())?;
        Ok(Self {
            level: pred.level(),
            p_c: g.value(p_c).expect("evaluated").clone(),
            p_r: g.value(p_r).expect("evaluated").clone(),
            provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::geometry::{encode_distance, BBox, GroundTruth};

    fn gts(boxes: &[BBox]) -> GroundTruthSet {
        GroundTruthSet::new(
            boxes
                .iter()
                .map(|&bbox| GroundTruth { bbox, class: 0 })
                .collect(),
            1,
        )
        .unwrap()
    }

    fn pc(logits: Tensor, mode: PcMode) -> Tensor {
        let mut g = Graph::new();
        let l = g.constant(logits);
        let p = classification_probability(&mut g, l, mode);
        g.evaluate_all(&Bindings::new()).unwrap();
        g.value(p).unwrap().clone()
    }

    #[test]
    fn softmax_pc_examples() {
        let p = pc(Tensor::filled(4, 1, 1.7), PcMode::Softmax);
        assert!(p.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let p = pc(Tensor::new(1, 3, vec![-4.0, 9.0, 2.0]), PcMode::Softmax);
        assert_eq!(p.item(), 1.0);
        let p = pc(Tensor::new(3, 2, vec![0.3, -2.0, 1.0, 5.0, -1.0, 0.0]), PcMode::Softmax);
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_pc_at_zero() {
        assert_eq!(pc(Tensor::zeros(1, 1), PcMode::Sigmoid).item(), 0.5);
    }

    fn pr(offsets: Tensor, anchors: AnchorGrid, gts: &GroundTruthSet) -> Tensor {
        let mut g = Graph::new();
        let o = g.constant(offsets);
        let p = regression_probability(&mut g, o, &anchors, gts);
        g.evaluate_all(&Bindings::new()).unwrap();
        g.value(p).unwrap().clone()
    }

    #[test]
    fn exact_decode_gives_unit_pr() {
        let anchors = AnchorGrid::new(0, 1.0, 1, 1);
        // Center (0.5, 0.5), distances 0.25, 0.25, 1.5, 2.5.
        let target = BBox::new(0.25, 0.25, 2.0, 3.0).unwrap();
        let o = Tensor::new(
            1,
            4,
            vec![
                encode_distance(0.25, 1.0),
                encode_distance(0.25, 1.0),
                encode_distance(1.5, 1.0),
                encode_distance(2.5, 1.0),
            ],
        );
        let p = pr(o, anchors, &gts(&[target]));
        assert!((p.item() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_ground_truth_gives_zero_grid() {
        let anchors = AnchorGrid::new(0, 2.0, 2, 2);
        let p = pr(Tensor::zeros(4, 4), anchors, &GroundTruthSet::default());
        assert_eq!(p, Tensor::zeros(4, 1));
    }

    #[test]
    fn pr_takes_max_over_ground_truths() {
        let anchors = AnchorGrid::new(0, 1.0, 1, 1);
        let o = Tensor::new(1, 4, vec![encode_distance(1.0, 1.0); 4]);
        // Decoded box is (-0.5, -0.5, 1.5, 1.5), area 4.
        let pred = BBox::new(-0.5, -0.5, 1.5, 1.5).unwrap();
        let far = BBox::new(-0.5, -0.5, 1.5, 0.1).unwrap(); // iou 0.3
        let near = BBox::new(-0.5, -0.5, 1.5, 0.9).unwrap(); // iou 0.7
        assert!((pred.iou(&far) - 0.3).abs() < 1e-9);
        assert!((pred.iou(&near) - 0.7).abs() < 1e-9);
        let p = pr(o, anchors, &gts(&[far, near]));
        assert!((p.item() - 0.7).abs() < 1e-9);
    }

    #[test]
    fn both_signals_gradcheck() {
        let anchors = AnchorGrid::new(0, 2.0, 3, 3);
        let truth = gts(&[
            BBox::new(0.5, 0.8, 4.0, 5.0).unwrap(),
            BBox::new(2.5, 1.0, 6.0, 4.5).unwrap(),
        ]);
        let mut g = Graph::new();
        let logits = g.trainable("logits");
        let offsets = g.trainable("offsets");
        let p_c = classification_probability(&mut g, logits, PcMode::Softmax);
        let p_r = regression_probability(&mut g, offsets, &anchors, &truth);
        let w = g.constant(Tensor::column((0..9).map(|k| 0.3 + 0.1 * k as f64).collect()));
        let a = g.mul(p_c, w);
        let b = g.mul(p_r, w);
        let s = g.add(a, b);
        let t = g.sum(s);
        g.set_output(t);
        let bind = Bindings::new()
            .with(
                "logits",
                Tensor::new(9, 2, (0..18).map(|k| ((k * 5 % 7) as f64) / 3.0 - 1.0).collect()),
            )
            .with(
                "offsets",
                Tensor::new(9, 4, (0..36).map(|k| ((k * 11 % 13) as f64) / 10.0 - 0.2).collect()),
            );
        let r = finite_difference_check(&mut g, &bind, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
