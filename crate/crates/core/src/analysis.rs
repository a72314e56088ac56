//! Measurement procedures over detector output: harmony histograms, NMS
//! suppression audits, error buckets, precision/recall and report files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::Result;
use crate::geometry::{decode, nms, nms_traced, Detection, GroundTruthSet};
use crate::task_signals::PredictionGrid;
use crate::toy_detector::StepTrace;

/// Every cell of every level as a detection: class is the arg-max logit
/// and score its sigmoid. Cells scoring below `score_floor` are dropped.
pub fn detections(preds: &[PredictionGrid], score_floor: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for p in preds {
        for (r, center) in p.anchors.centers().enumerate() {
            let logits = p.logits.row(r);
            let mut class = 0;
            for (k, &z) in logits.iter().enumerate() {
                if z > logits[class] {
                    class = k;
                }
            }
            let score = sigmoid(logits[class]);
            if score < score_floor {
                continue;
            }
            let o = p.offsets.row(r);
            let bbox = decode([o[0], o[1], o[2], o[3]], center, p.anchors.stride);
            out.push(Detection { bbox, score, class });
        }
    }
    out
}

/// Thresholded detections followed by greedy per-class NMS.
pub fn post_nms(preds: &[PredictionGrid], score_floor: f64, iou_threshold: f64) -> Vec<Detection> {
    nms(&detections(preds, score_floor), iou_threshold)
}

/// IoU band edges. Buckets are `IoU ≥ high`, `low ≤ IoU < high` and
/// `IoU < low`, in that order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmonyBands {
    pub high: f64,
    pub low: f64,
}

impl Default for HarmonyBands {
    fn default() -> Self {
        Self { high: 0.9, low: 0.5 }
    }
}

impl HarmonyBands {
    /// Bands for the toy regime, where the top bucket starts at 0.8.
    pub fn toy() -> Self {
        Self { high: 0.8, low: 0.5 }
    }

    pub fn bucket(&self, iou: f64) -> usize {
        if iou >= self.high {
            0
        } else if iou >= self.low {
            1
        } else {
            2
        }
    }

    pub fn labels(&self) -> [String; 3] {
        let (h, l) = (self.high, self.low);
        [format!("iou_ge_{h}"), format!("iou_{l}_{h}"), format!("iou_lt_{l}")]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmonyHistogram {
    pub threshold: f64,
    pub bands: HarmonyBands,
    pub counts: [usize; 3],
}

impl HarmonyHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Bucket fractions, or `None` when no prediction passed the threshold.
    pub fn fractions(&self) -> Option<[f64; 3]> {
        let n = self.total();
        (n > 0).then(|| self.counts.map(|c| c as f64 / n as f64))
    }

    /// Fraction in the top band; 0 when empty.
    pub fn harmonious(&self) -> f64 {
        self.fractions().map_or(0.0, |f| f[0])
    }

    pub fn merge(&mut self, other: &HarmonyHistogram) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
    }
}

/// Buckets the `(score, IoU)` pairs scoring strictly above `threshold`.
pub fn harmony_histogram(predictions: &[(f64, f64)], threshold: f64, bands: HarmonyBands) -> HarmonyHistogram {
    let mut counts = [0; 3];
    for &(score, iou) in predictions {
        if score > threshold {
            counts[bands.bucket(iou)] += 1;
        }
    }
    HarmonyHistogram {
        threshold,
        bands,
        counts,
    }
}

/// `(score, best GT IoU)` for each detection.
pub fn score_iou_pairs(dets: &[Detection], gts: &GroundTruthSet) -> Vec<(f64, f64)> {
    dets.iter().map(|d| (d.score, gts.best_iou(&d.bbox))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub kept: usize,
    pub suppressed: usize,
    pub kept_score: f64,
    pub kept_iou: f64,
    pub suppressed_score: f64,
    pub suppressed_iou: f64,
}

impl AuditEvent {
    /// The kept box localizes worse than the box it removed.
    pub fn is_inharmonious(&self) -> bool {
        self.kept_iou < self.suppressed_iou
    }
}

/// Replays greedy NMS over `candidates` and reports every suppression with
/// both boxes' best ground-truth IoU.
pub fn nms_audit(candidates: &[Detection], gts: &GroundTruthSet, iou_threshold: f64) -> Vec<AuditEvent> {
    nms_traced(candidates, iou_threshold)
        .suppressions
        .into_iter()
        .map(|s| {
            let (k, x) = (&candidates[s.kept], &candidates[s.suppressed]);
            AuditEvent {
                kept: s.kept,
                suppressed: s.suppressed,
                kept_score: k.score,
                kept_iou: gts.best_iou(&k.bbox),
                suppressed_score: x.score,
                suppressed_iou: gts.best_iou(&x.bbox),
            }
        })
        .collect()
}

pub fn inharmonious_events(events: &[AuditEvent]) -> Vec<AuditEvent> {
    events.iter().copied().filter(AuditEvent::is_inharmonious).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub correct: usize,
    pub loc: usize,
    pub oth: usize,
    pub bg: usize,
    #[serde(rename = "fn")]
    pub false_negative: usize,
}

impl ErrorBreakdown {
    pub fn predictions(&self) -> usize {
        self.correct + self.loc + self.oth + self.bg
    }

    pub fn merge(&mut self, o: &ErrorBreakdown) {
        self.correct += o.correct;
        self.loc += o.loc;
        self.oth += o.oth;
        self.bg += o.bg;
        self.false_negative += o.false_negative;
    }
}

/// Greedy one-to-one matching in descending score over predictions scoring
/// at least `floor`. A prediction is Correct when an unmatched ground truth
/// of its class overlaps it with IoU > 0.5; otherwise Loc when any
/// ground truth of its class has IoU > 0.1 (this includes duplicates of an
/// already matched object), Oth when a ground truth of another class has
/// IoU > 0.1, and BG otherwise. Unmatched ground truths count as FN.
pub fn error_analysis(predictions: &[Detection], gts: &GroundTruthSet, floor: f64) -> ErrorBreakdown {
    let kept: Vec<Detection> = predictions.iter().copied().filter(|d| d.score >= floor).collect();
    let mut matched = vec![false; gts.len()];
    let mut out = ErrorBreakdown::default();
    for i in crate::geometry::score_order(&kept) {
        let d = &kept[i];
        let mut best_free: Option<(usize, f64)> = None;
        let (mut same, mut other) = (0.0f64, 0.0f64);
        for (k, gt) in gts.iter().enumerate() {
            let iou = gt.bbox.iou(&d.bbox);
            if gt.class != d.class {
                other = other.max(iou);
                continue;
            }
            same = same.max(iou);
            if !matched[k] && best_free.is_none_or(|(_, b)| iou > b) {
                best_free = Some((k, iou));
            }
        }
        match best_free {
            Some((k, iou)) if iou > 0.5 => {
                matched[k] = true;
                out.correct += 1;
            }
            _ if same > 0.1 => out.loc += 1,
            _ if other > 0.1 => out.oth += 1,
            _ => out.bg += 1,
        }
    }
    out.false_negative = matched.iter().filter(|&&m| !m).count();
    out
}

/// One precision/recall point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision/recall curve for one class over a set of scenes, matching
/// greedily at `iou_threshold`. Empty when the class has no ground truth.
pub fn pr_curve(scenes: &[(Vec<Detection>, GroundTruthSet)], class: usize, iou_threshold: f64) -> Vec<PrPoint> {
    let positives: usize = scenes
        .iter()
        .map(|(_, g)| g.iter().filter(|gt| gt.class == class).count())
        .sum();
    if positives == 0 {
        return Vec::new();
    }
    let mut hits: Vec<(f64, bool)> = Vec::new();
    for (dets, gts) in scenes {
        let own: Vec<Detection> = dets.iter().copied().filter(|d| d.class == class).collect();
        let mut matched = vec![false; gts.len()];
        for i in crate::geometry::score_order(&own) {
            let d = &own[i];
            let mut best: Option<(usize, f64)> = None;
            for (k, gt) in gts.iter().enumerate() {
                if gt.class != class || matched[k] {
                    continue;
                }
                let iou = gt.bbox.iou(&d.bbox);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            let hit = match best {
                Some((k, iou)) if iou >= iou_threshold => {
                    matched[k] = true;
                    true
                }
                _ => false,
            };
            hits.push((d.score, hit));
        }
    }
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    hits.iter()
        .enumerate()
        .map(|(n, &(score, hit))| {
            tp += hit as usize;
            PrPoint {
                score,
                precision: tp as f64 / (n + 1) as f64,
                recall: tp as f64 / positives as f64,
            }
        })
        .collect()
}

/// Area under the monotone precision envelope.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, p) in curve.iter().enumerate() {
        let envelope = curve[i..].iter().map(|q| q.precision).fold(0.0, f64::max);
        ap += (p.recall - prev_recall) * envelope;
        prev_recall = p.recall;
    }
    ap
}

/// Mean AP at IoU 0.5 over classes that have ground truth.
pub fn toy_map(scenes: &[(Vec<Detection>, GroundTruthSet)], classes: usize) -> f64 {
    let aps: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let curve = pr_curve(scenes, c, 0.5);
            let has_gt = scenes.iter().any(|(_, g)| g.iter().any(|gt| gt.class == c));
            has_gt.then(|| average_precision(&curve))
        })
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Everything [`emit_report`] writes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub harmony: Vec<(String, HarmonyHistogram)>,
    pub errors: Vec<(String, ErrorBreakdown)>,
    pub traces: Vec<(String, Vec<StepTrace>)>,
}

/// Fixed six-decimal rendering used in every table.
pub fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// Writes a comma-separated table with LF line endings.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for r in rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Harmony table: one row per model, three bucket-fraction columns.
pub fn harmony_rows(harmony: &[(String, HarmonyHistogram)]) -> (Vec<String>, Vec<Vec<String>>) {
    let labels = harmony
        .first()
        .map_or_else(|| HarmonyBands::default().labels(), |(_, h)| h.bands.labels());
    let mut header = vec!["model".to_string()];
    header.extend(labels);
    let rows = harmony
        .iter()
        .map(|(name, h)| {
            let f = h.fractions().unwrap_or([0.0; 3]);
            let mut row = vec![name.clone()];
            row.extend(f.iter().map(|&v| fmt6(v)));
            row
        })
        .collect();
    (header, rows)
}

/// Writes `harmony.csv`, `errors.csv`, `loss_trace.csv`, `twg_trace.csv`
/// and an SVG plot per trace table into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let (header, rows) = harmony_rows(&report.harmony);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(&dir.join("harmony.csv"), &header, &rows)?;

    let rows: Vec<Vec<String>> = report
        .errors
        .iter()
        .map(|(name, e)| {
            let mut row = vec![name.clone()];
            row.extend([e.correct, e.loc, e.oth, e.bg, e.false_negative].map(|v| v.to_string()));
            row
        })
        .collect();
    write_table(&dir.join("errors.csv"), &["model", "correct", "loc", "oth", "bg", "fn"], &rows)?;

    let mut loss_rows = Vec::new();
    let mut twg_rows = Vec::new();
    let mut loss_series = Vec::new();
    let mut twg_series = Vec::new();
    for (name, trace) in &report.traces {
        for t in trace {
            loss_rows.push(vec![
                name.clone(),
                t.step.to_string(),
                fmt6(t.total),
                fmt6(t.detector),
                fmt6(t.hd),
                fmt6(t.tfd),
            ]);
            for (l, &(c, r)) in t.twg.iter().enumerate() {
                twg_rows.push(vec![name.clone(), t.step.to_string(), l.to_string(), fmt6(c), fmt6(r)]);
            }
        }
        loss_series.push((format!("{name} total"), trace.iter().map(|t| t.total).collect::<Vec<_>>()));
        let levels = trace.first().map_or(0, |t| t.twg.len());
        for l in 0..levels {
            twg_series.push((format!("{name} level {l} cls"), trace.iter().map(|t| t.twg[l].0).collect()));
        }
    }
    write_table(
        &dir.join("loss_trace.csv"),
        &["model", "step", "total", "detector", "hd", "tfd"],
        &loss_rows,
    )?;
    write_table(&dir.join("twg_trace.csv"), &["model", "step", "level", "w_cls", "w_reg"], &twg_rows)?;
    std::fs::write(dir.join("loss_trace.svg"), line_plot("loss", &loss_series))?;
    std::fs::write(dir.join("twg_trace.svg"), line_plot("TWG classification weight", &twg_series))?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Standalone SVG with one polyline per series against the sample index.
pub fn line_plot(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let (w, h, pad) = (640.0, 400.0, 40.0);
    let values = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let longest = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{pad}" y="24" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        svg,
        r#"<polyline points="{pad},{pad} {pad},{b} {r},{b}" fill="none" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(
        svg,
        r#"<text x="4" y="{:.1}" font-family="sans-serif" font-size="10">{hi:.3}</text>"#,
        pad + 4.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="4" y="{:.1}" font-family="sans-serif" font-size="10">{lo:.3}</text>"#,
        h - pad
    );
    for (k, (name, v)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = v
            .iter()
            .enumerate()
            .filter(|(_, y)| y.is_finite())
            .map(|(i, &y)| {
                let px = pad + (w - 2.0 * pad) * i as f64 / (longest - 1) as f64;
                let py = h - pad - (h - 2.0 * pad) * (y - lo) / (hi - lo);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"><title>{}</title></polyline>"#,
            pts.join(" "),
            escape(name)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" fill="{color}">{}</text>"#,
            w - 200.0,
            pad + 12.0 * (k as f64 + 1.0),
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, GroundTruth};

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(b: BBox, score: f64, class: usize) -> Detection {
        Detection { bbox: b, score, class }
    }

    fn gts(objs: &[(BBox, usize)]) -> GroundTruthSet {
        GroundTruthSet::new(objs.iter().map(|&(bbox, class)| GroundTruth { bbox, class }).collect(), 3).unwrap()
    }

    #[test]
    fn histogram_buckets() {
        let h = harmony_histogram(&[(0.95, 1.0), (0.99, 1.0)], 0.9, HarmonyBands::default());
        assert_eq!(h.fractions(), Some([1.0, 0.0, 0.0]));
        let h = harmony_histogram(&[(0.95, 0.95), (0.95, 0.7), (0.95, 0.3), (0.5, 1.0)], 0.9, HarmonyBands::default());
        let f = h.fractions().unwrap();
        for v in f {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn histogram_empty_is_not_an_error() {
        let h = harmony_histogram(&[(0.2, 1.0)], 0.9, HarmonyBands::default());
        assert!(h.is_empty());
        assert_eq!(h.fractions(), None);
    }

    #[test]
    fn audit_flags_misranked_suppression() {
        let g = gts(&[(bb(0.0, 0.0, 10.0, 10.0), 0)]);
        // kept box: IoU 0.5 with the object, suppressed box: IoU 0.9
        let kept = bb(0.0, 0.0, 10.0, 5.0);
        let suppressed = bb(0.0, 0.0, 10.0, 9.0);
        let cands = [det(kept, 0.9, 0), det(suppressed, 0.8, 0)];
        let events = nms_audit(&cands, &g, 0.5);
        assert_eq!(events.len(), 1);
        assert!((events[0].kept_iou - 0.5).abs() < 1e-9);
        assert!((events[0].suppressed_iou - 0.9).abs() < 1e-9);
        assert_eq!(inharmonious_events(&events).len(), 1);
    }

    #[test]
    fn audit_without_overlap_is_empty() {
        let g = gts(&[(bb(0.0, 0.0, 10.0, 10.0), 0)]);
        let cands = [det(bb(0.0, 0.0, 5.0, 5.0), 0.9, 0), det(bb(20.0, 20.0, 30.0, 30.0), 0.8, 0)];
        assert!(nms_audit(&cands, &g, 0.5).is_empty());
    }

    #[test]
    fn error_buckets() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let g = gts(&[(a, 0)]);
        let perfect = error_analysis(&[det(a, 0.9, 0)], &g, 0.0);
        assert_eq!(perfect, ErrorBreakdown { correct: 1, ..Default::default() });

        let loc = error_analysis(&[det(bb(0.0, 0.0, 10.0, 3.0), 0.9, 0)], &g, 0.0);
        assert_eq!(loc.loc, 1);
        assert_eq!(loc.false_negative, 1);

        let none = error_analysis(&[], &g, 0.0);
        assert_eq!(none.false_negative, 1);
        assert_eq!(none.predictions(), 0);

        let oth = error_analysis(&[det(a, 0.9, 1)], &g, 0.0);
        assert_eq!(oth.oth, 1);
        let bg = error_analysis(&[det(bb(50.0, 50.0, 60.0, 60.0), 0.9, 0)], &g, 0.0);
        assert_eq!(bg.bg, 1);
        let dup = error_analysis(&[det(a, 0.9, 0), det(a, 0.8, 0)], &g, 0.0);
        assert_eq!((dup.correct, dup.loc), (1, 1));
    }

    #[test]
    fn loc_band_is_closed_at_half() {
        let g = gts(&[(bb(0.0, 0.0, 10.0, 10.0), 0)]);
        let half = bb(0.0, 0.0, 10.0, 5.0);
        let e = error_analysis(&[det(half, 0.9, 0)], &g, 0.0);
        assert_eq!(e.loc, 1);
    }

    #[test]
    fn ap_of_perfect_detector_is_one() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let scenes = vec![(vec![det(a, 0.9, 0)], gts(&[(a, 0)]))];
        assert!((toy_map(&scenes, 3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_is_deterministic_and_header_only_when_empty() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&RunReport::default(), dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("harmony.csv")).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(text.trim_end().split(',').count(), 4);
        let loss = std::fs::read_to_string(dir.path().join("loss_trace.csv")).unwrap();
        assert_eq!(loss, "model,step,total,detector,hd,tfd\n");
    }
}
