//! Box decoding, IoU, greedy NMS and a rasterized IoU oracle.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard added to IoU denominators.
pub const IOU_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 <= x2 && y1 <= y2) {
            return Err(Error::InvalidArgument(format!(
                "box ({x1}, {y1}, {x2}, {y2}) has negative extent"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        iw * ih
    }

    /// Intersection-over-union; zero for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        inter / (self.area() + other.area() - inter + IOU_EPS)
    }
}

/// Anchor points of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub level: usize,
    pub stride: f64,
    pub width: usize,
    pub height: usize,
}

impl AnchorGrid {
    pub fn new(level: usize, stride: f64, width: usize, height: usize) -> Self {
        Self {
            level,
            stride,
            width,
            height,
        }
    }

    /// Grid tiling a square scene of `extent` units at the given stride.
    pub fn for_extent(level: usize, extent: f64, stride: f64) -> Self {
        let cells = (extent / stride).round() as usize;
        Self::new(level, stride, cells, cells)
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// Center of cell `index` in row-major order.
    pub fn center(&self, index: usize) -> (f64, f64) {
        let (i, j) = (index % self.width, index / self.width);
        (self.stride * (i as f64 + 0.5), self.stride * (j as f64 + 0.5))
    }

    pub fn centers(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.cells()).map(|k| self.center(k))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub objects: Vec<GroundTruth>,
}

impl GroundTruthSet {
    pub fn new(objects: Vec<GroundTruth>, classes: usize) -> Result<Self> {
        for gt in &objects {
            BBox::new(gt.bbox.x1, gt.bbox.y1, gt.bbox.x2, gt.bbox.y2)?;
            if gt.class >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label {} outside [0, {classes})",
                    gt.class
                )));
            }
        }
        Ok(Self { objects })
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &GroundTruth> {
        self.objects.iter()
    }

    /// Highest IoU of `b` against any ground truth, or 0 when empty.
    pub fn best_iou(&self, b: &BBox) -> f64 {
        self.objects.iter().map(|g| g.bbox.iou(b)).fold(0.0, f64::max)
    }
}

/// Anchor-point decode: each offset is a softplus-positive distance from the
/// anchor center to one box side, in units of the level stride.
pub fn decode(offsets: [f64; 4], center: (f64, f64), stride: f64) -> BBox {
    let (cx, cy) = center;
    BBox {
        x1: cx - stride * softplus(offsets[0]),
        y1: cy - stride * softplus(offsets[1]),
        x2: cx + stride * softplus(offsets[2]),
        y2: cy + stride * softplus(offsets[3]),
    }
}

/// Inverse of the per-side softplus used by [`decode`]; `distance > 0`.
pub fn encode_distance(distance: f64, stride: f64) -> f64 {
    let d = distance / stride;
    if d > 30.0 {
        d
    } else {
        d.exp_m1().ln()
    }
}

/// Column nodes (`N x 1`) holding box corners.
#[derive(Clone, Copy, Debug)]
pub struct BoxNodes {
    pub x1: NodeId,
    pub y1: NodeId,
    pub x2: NodeId,
    pub y2: NodeId,
}

impl BoxNodes {
    pub fn constant(g: &mut Graph, b: &BBox) -> Self {
        Self {
            x1: g.scalar(b.x1),
            y1: g.scalar(b.y1),
            x2: g.scalar(b.x2),
            y2: g.scalar(b.y2),
        }
    }
}

/// Differentiable [`decode`] of an `N x 4` offset grid over an anchor grid.
pub fn decode_node(g: &mut Graph, offsets: NodeId, anchors: &AnchorGrid) -> BoxNodes {
    let (cxs, cys): (Vec<f64>, Vec<f64>) = anchors.centers().unzip();
    let cx = g.constant(Tensor::column(cxs));
    let cy = g.constant(Tensor::column(cys));
    let sides: Vec<NodeId> = (0..4)
        .map(|k| {
            let o = g.column(offsets, k);
            let sp = g.softplus(o);
            g.scale(sp, anchors.stride)
        })
        .collect();
    BoxNodes {
        x1: g.sub(cx, sides[0]),
        y1: g.sub(cy, sides[1]),
        x2: g.add(cx, sides[2]),
        y2: g.add(cy, sides[3]),
    }
}

/// Differentiable IoU with the max/min intersection formulation.
pub fn iou_node(g: &mut Graph, a: &BoxNodes, b: &BoxNodes) -> NodeId {
    let zero = g.scalar(0.0);
    let ix1 = g.max(a.x1, b.x1);
    let iy1 = g.max(a.y1, b.y1);
    let ix2 = g.min(a.x2, b.x2);
    let iy2 = g.min(a.y2, b.y2);
    let iw = g.sub(ix2, ix1);
    let iw = g.max(iw, zero);
    let ih = g.sub(iy2, iy1);
    let ih = g.max(ih, zero);
    let inter = g.mul(iw, ih);
    let area_a = area_node(g, a);
    let area_b = area_node(g, b);
    let union = g.add(area_a, area_b);
    let union = g.sub(union, inter);
    let eps = g.scalar(IOU_EPS);
    let union = g.add(union, eps);
    g.div(inter, union)
}

fn area_node(g: &mut Graph, b: &BoxNodes) -> NodeId {
    let w = g.sub(b.x2, b.x1);
    let h = g.sub(b.y2, b.y1);
    g.mul(w, h)
}

/// IoU estimated by counting cell centers of a `resolution x resolution`
/// raster laid over the union's bounding extent.
pub fn raster_iou(a: &BBox, b: &BBox, resolution: usize) -> Result<f64> {
    if resolution < 64 {
        return Err(Error::InvalidArgument(format!(
            "raster resolution {resolution} below 64"
        )));
    }
    for bx in [a, b] {
        if bx.area() <= 0.0 {
            return Err(Error::DegenerateBox(format!("{bx:?}")));
        }
    }
    let (x0, y0) = (a.x1.min(b.x1), a.y1.min(b.y1));
    let (x1, y1) = (a.x2.max(b.x2), a.y2.max(b.y2));
    let (dx, dy) = ((x1 - x0) / resolution as f64, (y1 - y0) / resolution as f64);
    let (mut inter, mut union) = (0usize, 0usize);
    for j in 0..resolution {
        let y = y0 + (j as f64 + 0.5) * dy;
        for i in 0..resolution {
            let x = x0 + (i as f64 + 0.5) * dx;
            let (ina, inb) = (a.contains(x, y), b.contains(x, y));
            inter += (ina && inb) as usize;
            union += (ina || inb) as usize;
        }
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// A scored, labelled box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class: usize,
}

/// One suppression performed by greedy NMS, as candidate indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Suppression {
    pub kept: usize,
    pub suppressed: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NmsOutcome {
    /// Indices of kept candidates in descending-score order.
    pub kept: Vec<usize>,
    pub suppressions: Vec<Suppression>,
}

/// Candidate indices in descending score, ties broken by lower index.
pub fn score_order(candidates: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .score
            .total_cmp(&candidates[a].score)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy per-class NMS recording which kept box removed which candidate.
pub fn nms_traced(candidates: &[Detection], iou_threshold: f64) -> NmsOutcome {
    let order = score_order(candidates);
    let mut removed = vec![false; candidates.len()];
    let mut out = NmsOutcome::default();
    for (pos, &i) in order.iter().enumerate() {
        if removed[i] {
            continue;
        }
        out.kept.push(i);
        for &j in &order[pos + 1..] {
            if removed[j] || candidates[j].class != candidates[i].class {
                continue;
            }
            if candidates[i].bbox.iou(&candidates[j].bbox) > iou_threshold {
                removed[j] = true;
                out.suppressions.push(Suppression {
                    kept: i,
                    suppressed: j,
                });
            }
        }
    }
    out
}

/// Greedy per-class NMS; returns kept candidates in descending-score order.
pub fn nms(candidates: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_traced(candidates, iou_threshold)
        .kept
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}
