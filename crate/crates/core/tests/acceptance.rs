//! One line per acceptance criterion; exits nonzero if any fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tbd_core::analysis::{error_analysis, inharmonious_events, nms_audit, write_table};
use tbd_core::autodiff::{Bindings, Graph};
use tbd_core::experiment::{
    compare_seed, harmony_study_distill, hd_ablation, mask_ablation, median, train_teacher, AblationRow,
    ExperimentConfig,
};
use tbd_core::feature_distill::{tfd_dynamic, tfd_fixed, twg_weights, TfdLevel, TwgModule, TWG_FC2_BIAS, TWG_FC2_WEIGHT};
use tbd_core::geometry::{nms, raster_iou, AnchorGrid, BBox, Detection, GroundTruth, GroundTruthSet};
use tbd_core::harmony::{hd_loss_uniform, hd_loss_weighted, HsVariant, LossNorm, WeightedHdLevel};
use tbd_core::task_signals::{PcMode, PredictionGrid, Provenance, TaskProbabilityGrid};
use tbd_core::tensor::Tensor;
use tbd_core::toy_detector::{generate_scenes, train, DetectorNet, DistillConfig, ScenarioSpec, TrainingConfig};
use tbd_core::verification::gradient_suite;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

fn rand_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let w = rng.random_range(1.0..extent / 2.0);
    let h = rng.random_range(1.0..extent / 2.0);
    let x = rng.random_range(0.0..extent - w);
    let y = rng.random_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h).unwrap()
}

fn eval_scalar(g: &mut Graph, b: &Bindings, out: tbd_core::autodiff::NodeId) -> f64 {
    g.set_output(out);
    g.evaluate(b).unwrap()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let results = gradient_suite(20, 2024, 1e-6).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    for r in &results {
        ensure(r.max_rel_error < 1e-4, format!("{} max rel error {:.3e}", r.loss, r.max_rel_error))?;
        ensure(r.coordinates > 0, format!("{} checked no coordinates", r.loss))?;
    }
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("6 losses x 20 points, worst rel error {worst:.2e}, {secs:.1}s"))
}

fn identities() -> Outcome {
    for v in HsVariant::ALL {
        ensure((v.score(0.0) - 1.0).abs() < 1e-12, format!("{} at 0", v.name()))?;
        for k in 1..=100 {
            ensure(v.score(k as f64 / 100.0) < v.score(0.0), format!("{} not maximal at 0", v.name()))?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut g = Graph::new();
        let b = Bindings::new();
        let mut pairs = Vec::new();
        let mut weighted = Vec::new();
        for n in [16, 4] {
            let t = g.constant(rand_tensor(&mut rng, n, 1, 0.2, 1.0));
            let s = g.constant(rand_tensor(&mut rng, n, 1, 0.2, 1.0));
            let psi = g.constant(Tensor::filled(n, 1, rng.random_range(0.1..3.0)));
            pairs.push((t, s));
            weighted.push(WeightedHdLevel { teacher: t, student: s, psi: Some(psi) });
        }
        for norm in [LossNorm::L1, LossNorm::L2] {
            let u = hd_loss_uniform(&mut g, &pairs, norm);
            let w = hd_loss_weighted(&mut g, &weighted, norm);
            let (u, w) = (eval_scalar(&mut g, &b, u), eval_scalar(&mut g, &b, w));
            worst = worst.max((u - w).abs());
        }
    }
    ensure(worst < 1e-12, format!("weighted vs uniform HD differ by {worst:e}"))?;

    let mut worst_tfd: f64 = 0.0;
    for _ in 0..20 {
        let mut g = Graph::new();
        let b = Bindings::new();
        let mut levels = Vec::new();
        let mut masks = Vec::new();
        for n in [16, 4] {
            let teacher = g.constant(rand_tensor(&mut rng, n, 5, -1.0, 1.0));
            let projected = g.constant(rand_tensor(&mut rng, n, 5, -1.0, 1.0));
            levels.push(TfdLevel {
                teacher,
                projected,
                p_c_t: rand_tensor(&mut rng, n, 1, 0.0, 1.0),
                p_r_t: rand_tensor(&mut rng, n, 1, 0.0, 1.0),
            });
            masks.push((
                g.constant(rand_tensor(&mut rng, n, 1, 0.0, 1.0)),
                g.constant(rand_tensor(&mut rng, n, 1, 0.0, 1.0)),
            ));
        }
        // fc2 at zero pins the generated weights to (0.5, 0.5)
        let mut twg = TwgModule::new(8, &mut rng);
        for name in [TWG_FC2_WEIGHT, TWG_FC2_BIAS] {
            let t = twg.params.get_mut(name).unwrap();
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        let mut bind = b.clone();
        twg.params.bind(&mut bind);
        let dynamic = tfd_dynamic(&mut g, &levels, &masks, &twg).loss;
        let fixed = tfd_fixed(&mut g, &levels, 0.5, 0.5).unwrap();
        let d = eval_scalar(&mut g, &bind, dynamic);
        let f = eval_scalar(&mut g, &bind, fixed);
        worst_tfd = worst_tfd.max((d - f).abs());
    }
    ensure(worst_tfd < 1e-12, format!("pinned dynamic vs fixed TFD differ by {worst_tfd:e}"))?;

    let spec = ScenarioSpec::default();
    let scenes = generate_scenes(&spec, 0, 16).map_err(|e| e.to_string())?;
    let teacher = DetectorNet::new(&spec, 24, 77).unwrap();
    let student = DetectorNet::new(&spec, 8, 3).unwrap();
    let base = TrainingConfig { steps: 25, learning_rate: 0.5, batch_size: 2, seed: 11, distill: None };
    let vanilla = train(&student, &scenes, &base, None).map_err(|e| e.to_string())?;
    let zero = TrainingConfig {
        distill: Some(DistillConfig { alpha: 0.0, beta: 0.0, ..DistillConfig::default() }),
        ..base
    };
    let zeroed = train(&student, &scenes, &zero, Some(&teacher)).map_err(|e| e.to_string())?;
    ensure(zeroed.trace.iter().any(|t| t.hd > 0.0 && t.tfd > 0.0), "distillation terms were not built")?;
    for (a, b) in vanilla.trace.iter().zip(&zeroed.trace) {
        ensure(
            a.total.to_bits() == b.total.to_bits() && a.detector.to_bits() == b.detector.to_bits(),
            format!("trace differs at step {}", a.step),
        )?;
    }
    for (name, p) in vanilla.net.params.iter() {
        let q = zeroed.net.params.get(name).unwrap();
        ensure(
            p.as_slice().iter().zip(q.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()),
            format!("parameter {name} differs"),
        )?;
    }
    Ok(format!(
        "HS maxima at 0, weighted/uniform HD gap {worst:.1e}, pinned TFD gap {worst_tfd:.1e}, alpha=beta=0 bitwise over {} steps",
        base.steps
    ))
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = rand_box(&mut rng, 64.0);
        let b = if rng.random_bool(0.5) {
            // nearby box so most pairs overlap
            let dx = rng.random_range(-6.0..6.0);
            let dy = rng.random_range(-6.0..6.0);
            BBox::new(a.x1 + dx, a.y1 + dy, a.x2 + dx + rng.random_range(-2.0..2.0), a.y2 + dy + 2.0).unwrap()
        } else {
            rand_box(&mut rng, 64.0)
        };
        let r = raster_iou(&a, &b, 256).map_err(|e| e.to_string())?;
        worst = worst.max((a.iou(&b) - r).abs());
    }
    ensure(worst < 0.01, format!("iou vs raster differ by {worst}"))?;

    let mut worst_pr: f64 = 0.0;
    for _ in 0..10 {
        let anchors = AnchorGrid::for_extent(0, 64.0, 8.0);
        let gts = GroundTruthSet::new(
            (0..3).map(|k| GroundTruth { bbox: rand_box(&mut rng, 64.0), class: k % 2 }).collect(),
            2,
        )
        .unwrap();
        let pred = PredictionGrid {
            anchors,
            logits: rand_tensor(&mut rng, anchors.cells(), 2, -1.0, 1.0),
            offsets: rand_tensor(&mut rng, anchors.cells(), 4, -1.0, 2.0),
        };
        let grid = TaskProbabilityGrid::compute(&pred, &gts, PcMode::Softmax, Provenance::Student).unwrap();
        for (k, center) in anchors.centers().enumerate() {
            let o = pred.offsets.row(k);
            let b = tbd_core::geometry::decode([o[0], o[1], o[2], o[3]], center, anchors.stride);
            let oracle = gts
                .iter()
                .map(|g| raster_iou(&b, &g.bbox, 256).unwrap())
                .fold(0.0, f64::max);
            worst_pr = worst_pr.max((grid.p_r.get(k, 0) - oracle).abs());
        }
    }
    ensure(worst_pr < 0.01, format!("p_r vs oracle differ by {worst_pr}"))?;
    Ok(format!("1000 box pairs max |iou - raster| {worst:.4}, p_r grid max gap {worst_pr:.4}"))
}

fn structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for draw in 0..100 {
        let mut twg = TwgModule::new(6, &mut rng);
        let names: Vec<String> = twg.params.iter().map(|(n, _)| n.clone()).collect();
        for n in names {
            let t = twg.params.get_mut(&n).unwrap();
            *t = rand_tensor(&mut rng, t.rows(), t.cols(), -3.0, 3.0);
        }
        for n in [256, 64] {
            let m: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, n, 1, 0.0, 1.0)).collect();
            let (a, b) = twg_weights(&twg, &m[0], &m[1], &m[2], &m[3]).unwrap();
            ensure((a + b - 1.0).abs() < 1e-12, format!("TWG draw {draw} sums to {}", a + b))?;
        }
    }
    for n in [256usize, 64] {
        let side = (n as f64).sqrt() as usize;
        let anchors = AnchorGrid::new(0, 4.0, side, side);
        let pred = PredictionGrid {
            anchors,
            logits: rand_tensor(&mut rng, n, 3, -5.0, 5.0),
            offsets: Tensor::zeros(n, 4),
        };
        let gts = GroundTruthSet::default();
        let g = TaskProbabilityGrid::compute(&pred, &gts, PcMode::Softmax, Provenance::Student).unwrap();
        ensure((g.p_c.sum() - 1.0).abs() < 1e-12, "spatial softmax does not sum to 1")?;
    }
    let (mut idempotent, mut partitions) = (0, 0);
    for _ in 0..100 {
        let count = rng.random_range(0..30);
        let cands: Vec<Detection> = (0..count)
            .map(|_| Detection { bbox: rand_box(&mut rng, 48.0), score: rng.random_range(0.0..1.0), class: rng.random_range(0..2) })
            .collect();
        let thr = rng.random_range(0.3..0.7);
        let kept = nms(&cands, thr);
        ensure(nms(&kept, thr) == kept, "nms not idempotent")?;
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                ensure(a.class != b.class || a.bbox.iou(&b.bbox) <= thr, "kept boxes overlap")?;
            }
        }
        idempotent += 1;
        let gts = GroundTruthSet::new(
            (0..rng.random_range(0..4)).map(|_| GroundTruth { bbox: rand_box(&mut rng, 48.0), class: rng.random_range(0..2) }).collect(),
            2,
        )
        .unwrap();
        let floor = rng.random_range(0.0..0.5);
        let e = error_analysis(&kept, &gts, floor);
        let above = kept.iter().filter(|d| d.score >= floor).count();
        ensure(e.predictions() == above, "error buckets do not partition predictions")?;
        ensure(e.false_negative + e.correct == gts.len(), "FN + matched != GTs")?;
        partitions += 1;
    }
    Ok(format!("TWG sums 100 draws x 2 levels, softmax sums, NMS {idempotent} sets, buckets {partitions} sets"))
}

fn reproduction() -> Outcome {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let distill = harmony_study_distill();
    let teacher = train_teacher(&cfg, 99).map_err(|e| e.to_string())?;
    let test = cfg.test_set().map_err(|e| e.to_string())?;
    let (mut van_h, mut dis_h, mut gap_drop, mut hd_ratio) = (vec![], vec![], vec![], vec![]);
    for seed in 0..5 {
        let c = compare_seed(&cfg, seed, &teacher.net, &distill, &test).map_err(|e| e.to_string())?;
        van_h.push(c.vanilla.harmony.harmonious());
        dis_h.push(c.distilled.harmony.harmonious());
        let (gv, gd) = (c.vanilla.hs_gap.unwrap(), c.distilled.hs_gap.unwrap());
        gap_drop.push(1.0 - gd / gv);
        // last-10-step mean against the first step smooths batch noise
        let tr = &c.distilled_trace;
        let tail = tr[tr.len() - 10..].iter().map(|s| s.hd).sum::<f64>() / 10.0;
        hd_ratio.push(tail / tr[0].hd);
        println!(
            "    seed {seed}: harmonious vanilla {:.3} distilled {:.3}, HS gap {gv:.4} -> {gd:.4}",
            van_h[seed as usize], dis_h[seed as usize]
        );
    }
    let secs = t.elapsed().as_secs_f64();
    let (mv, md, mg, mh) = (median(&van_h), median(&dis_h), median(&gap_drop), median(&hd_ratio));
    let summary = format!(
        "median harmonious {mv:.3} -> {md:.3}, median HS gap drop {:.1}%, HD final/initial {mh:.2}, {secs:.0}s",
        100.0 * mg
    );
    ensure(md > mv, format!("distilled not more harmonious: {summary}"))?;
    ensure(mg >= 0.30, format!("HS gap drop below 30%: {summary}"))?;
    ensure(mh < 0.30, format!("HD did not fall below 30% of initial: {summary}"))?;
    ensure(secs < 600.0, format!("too slow: {summary}"))?;
    Ok(summary)
}

fn ablation_bytes(rows: &[AblationRow]) -> String {
    rows.iter()
        .map(|r| format!("{},{:.6},{:.6},{:.6}\n", r.label, r.metrics.toy_map, r.metrics.harmony.harmonious(), r.final_hd))
        .collect()
}

fn ablations() -> Outcome {
    let cfg = ExperimentConfig {
        teacher_width: 24,
        student_width: 8,
        train_scenes: 16,
        test_scenes: 20,
        teacher_steps: 60,
        student_steps: 30,
        ..ExperimentConfig::default()
    };
    let teacher = train_teacher(&cfg, 1).map_err(|e| e.to_string())?.net;
    let test = cfg.test_set().map_err(|e| e.to_string())?;
    let base = DistillConfig::default();
    let run = || -> Result<(Vec<AblationRow>, Vec<AblationRow>), String> {
        Ok((
            hd_ablation(&cfg, 2, &teacher, &test, &base).map_err(|e| e.to_string())?,
            mask_ablation(&cfg, 2, &teacher, &test, &base).map_err(|e| e.to_string())?,
        ))
    };
    let (hd, masks) = run()?;
    let (hd2, masks2) = run()?;
    ensure(hd.len() == 6 && masks.len() == 5, "grid sizes")?;
    ensure(ablation_bytes(&hd) == ablation_bytes(&hd2), "HD grid not deterministic")?;
    ensure(ablation_bytes(&masks) == ablation_bytes(&masks2), "mask grid not deterministic")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (name, rows) in [("hd.csv", &hd), ("mask.csv", &masks)] {
        let body: Vec<Vec<String>> = rows.iter().map(|r| vec![r.label.clone(), format!("{:.6}", r.final_hd)]).collect();
        write_table(&dir.path().join(name), &["setting", "final_hd"], &body).map_err(|e| e.to_string())?;
    }
    Ok("6-cell HD grid and 5-cell mask grid completed twice with identical tables".into())
}

fn audit_scenario() -> Outcome {
    let gt = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let gts = GroundTruthSet::new(vec![GroundTruth { bbox: gt, class: 0 }], 1).unwrap();
    let cands = [
        Detection { bbox: BBox::new(0.0, 0.0, 10.0, 5.0).unwrap(), score: 0.9, class: 0 },
        Detection { bbox: BBox::new(0.0, 0.0, 10.0, 9.0).unwrap(), score: 0.8, class: 0 },
    ];
    let events = nms_audit(&cands, &gts, 0.5);
    let bad = inharmonious_events(&events);
    ensure(bad.len() == 1, format!("{} inharmonious events", bad.len()))?;
    let e = bad[0];
    ensure((e.kept_iou - 0.5).abs() < 1e-9 && (e.suppressed_iou - 0.9).abs() < 1e-9, "wrong IoUs")?;
    Ok(format!(
        "kept ({:.1}, IoU {:.2}) suppressed ({:.1}, IoU {:.2})",
        e.kept_score, e.kept_iou, e.suppressed_score, e.suppressed_iou
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient suite", gradients),
        ("algebraic identities", identities),
        ("oracle equivalence", oracles),
        ("structural invariants", structure),
        ("directional harmony reproduction", reproduction),
        ("ablation grids", ablations),
        ("nms audit scenario", audit_scenario),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
