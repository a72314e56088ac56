use tbd_core::autodiff::finite_difference_check;
use tbd_core::geometry::{encode_distance, GroundTruthSet};
use tbd_core::task_signals::PredictionGrid;
use tbd_core::tensor::Tensor;
use tbd_core::toy_detector::*;
use tbd_core::Error;

fn spec() -> ScenarioSpec {
    ScenarioSpec::default()
}

#[test]
fn scenes_are_deterministic() {
    assert_eq!(generate_scene(&spec(), 42).unwrap(), generate_scene(&spec(), 42).unwrap());
    assert_ne!(generate_scene(&spec(), 42).unwrap(), generate_scene(&spec(), 43).unwrap());
}

#[test]
fn noiseless_single_object_paints_only_its_box() {
    let s = ScenarioSpec { noise: 0.0, min_objects: 1, max_objects: 1, ..spec() };
    let scene = generate_scene(&s, 7).unwrap();
    assert_eq!(scene.gts.len(), 1);
    let b = scene.gts.objects[0].bbox;
    let n = s.input_cells;
    let stride = s.extent / n as f64;
    let mut inside = 0;
    for r in 0..n * n {
        let (cx, cy) = (stride * ((r % n) as f64 + 0.5), stride * ((r / n) as f64 + 0.5));
        let nonzero = scene.input.row(r).iter().any(|&v| v != 0.0);
        assert_eq!(nonzero, b.contains(cx, cy), "cell {r}");
        inside += nonzero as usize;
    }
    assert!(inside > 0);
}

#[test]
fn object_count_is_honoured() {
    let s = ScenarioSpec { min_objects: 4, max_objects: 4, ..spec() };
    for seed in 0..10 {
        let scene = generate_scene(&s, seed).unwrap();
        assert_eq!(scene.gts.len(), 4);
        for gt in scene.gts.iter() {
            assert!(gt.bbox.x1 >= 0.0 && gt.bbox.y1 >= 0.0 && gt.bbox.x2 <= s.extent && gt.bbox.y2 <= s.extent);
        }
    }
}

#[test]
fn impossible_box_sizes_rejected() {
    let s = ScenarioSpec { min_box: 30.0, max_box: 20.0, ..spec() };
    assert!(matches!(generate_scene(&s, 0), Err(Error::InvalidArgument(_))));
    let s = ScenarioSpec { max_box: 100.0, ..spec() };
    assert!(generate_scene(&s, 0).is_err());
    let s = ScenarioSpec { classes: 1, ..spec() };
    assert!(generate_scene(&s, 0).is_err());
}

#[test]
fn zero_input_and_heads_give_zero_logits() {
    let net = DetectorNet::new(&spec(), 16, 0).unwrap().zero_heads();
    let scene = SyntheticScene {
        seed: 0,
        input: Tensor::zeros(32 * 32, spec().in_channels()),
        gts: GroundTruthSet::default(),
    };
    for (_, p) in forward(&net, &scene).unwrap() {
        assert!(p.logits.as_slice().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn level_shapes() {
    let net = DetectorNet::new(&spec(), 16, 0).unwrap();
    let scene = generate_scene(&spec(), 1).unwrap();
    let out = forward(&net, &scene).unwrap();
    assert_eq!(out.len(), 2);
    let dims: Vec<(usize, usize, f64)> = out.iter().map(|(f, p)| (f.height, f.width, p.anchors.stride)).collect();
    assert_eq!(dims, vec![(16, 16, 4.0), (8, 8, 8.0)]);
    assert_eq!(out[0].0.data.shape(), (256, 16));
    assert_eq!(out[1].1.logits.shape(), (64, 3));
    assert_eq!(out[1].1.offsets.shape(), (64, 4));
    assert_eq!(forward(&net, &scene).unwrap(), out);
}

fn perfect_preds(scene: &SyntheticScene, logit: f64) -> Vec<PredictionGrid> {
    spec()
        .anchor_grids()
        .iter()
        .map(|a| {
            let targets = class_targets(a, &scene.gts, 3);
            let logits = targets.map(|y| if y > 0.0 { logit } else { -logit });
            let mut offsets = Tensor::filled(a.cells(), 4, 0.0);
            for (r, (cx, cy)) in a.centers().enumerate() {
                if let Some(gt) = scene.gts.iter().find(|g| g.bbox.contains(cx, cy)) {
                    let b = gt.bbox;
                    for (k, d) in [cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy].into_iter().enumerate() {
                        offsets.set(r, k, encode_distance(d.max(1e-9), a.stride));
                    }
                }
            }
            PredictionGrid { anchors: *a, logits, offsets }
        })
        .collect()
}

#[test]
fn perfect_predictions_approach_zero_loss() {
    let s = ScenarioSpec { min_objects: 1, max_objects: 1, ..spec() };
    let scene = generate_scene(&s, 3).unwrap();
    let mut prev = f64::INFINITY;
    for logit in [5.0, 10.0, 30.0] {
        let (mut g, b) = detector_loss_graph(&perfect_preds(&scene, logit), &scene.gts).unwrap();
        let v = g.evaluate(&b).unwrap();
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < 1e-9, "{prev}");
}

#[test]
fn empty_ground_truth_is_classification_only() {
    let scene = SyntheticScene {
        seed: 0,
        input: Tensor::zeros(1024, 7),
        gts: GroundTruthSet::default(),
    };
    let preds: Vec<PredictionGrid> = spec()
        .anchor_grids()
        .iter()
        .map(|a| PredictionGrid {
            anchors: *a,
            logits: Tensor::filled(a.cells(), 3, 0.0),
            offsets: Tensor::filled(a.cells(), 4, 1.0),
        })
        .collect();
    let (mut g, b) = detector_loss_graph(&preds, &scene.gts).unwrap();
    // two levels of mean BCE at logit 0
    assert!((g.evaluate(&b).unwrap() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    let grads = g.backpropagate().unwrap();
    assert!(grads["offsets.0"].as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn detector_loss_gradcheck() {
    let scene = generate_scene(&ScenarioSpec { input_cells: 16, extent: 32.0, min_box: 8.0, max_box: 16.0, ..spec() }, 5).unwrap();
    let net = DetectorNet::new(&ScenarioSpec { input_cells: 16, extent: 32.0, min_box: 8.0, max_box: 16.0, ..spec() }, 4, 1).unwrap();
    let preds: Vec<_> = forward(&net, &scene).unwrap().into_iter().map(|(_, p)| p).collect();
    let (mut g, b) = detector_loss_graph(&preds, &scene.gts).unwrap();
    let r = finite_difference_check(&mut g, &b, 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

fn small_run(distill: Option<DistillConfig>, steps: usize) -> (TrainingConfig, DetectorNet, Vec<SyntheticScene>) {
    let scenes = generate_scenes(&spec(), 100, 8).unwrap();
    let net = DetectorNet::new(&spec(), 8, 4).unwrap();
    (TrainingConfig { steps, learning_rate: 0.5, batch_size: 2, seed: 3, distill }, net, scenes)
}

#[test]
fn training_is_deterministic_and_traces_nonnegative() {
    let teacher = DetectorNet::new(&spec(), 16, 9).unwrap();
    let (cfg, net, scenes) = small_run(Some(DistillConfig::default()), 6);
    let a = train(&net, &scenes, &cfg, Some(&teacher)).unwrap();
    let b = train(&net, &scenes, &cfg, Some(&teacher)).unwrap();
    assert_eq!(a, b);
    for t in &a.trace {
        assert!(t.total >= 0.0 && t.detector >= 0.0 && t.hd >= 0.0 && t.tfd >= 0.0);
        assert_eq!(t.twg.len(), 2);
        for (c, r) in &t.twg {
            assert!((c + r - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn teacher_is_frozen() {
    let teacher = DetectorNet::new(&spec(), 16, 9).unwrap();
    let before = teacher.clone();
    let (cfg, net, scenes) = small_run(Some(DistillConfig::default()), 4);
    let out = train(&net, &scenes, &cfg, Some(&teacher)).unwrap();
    assert_eq!(teacher, before);
    assert_ne!(out.net.params, net.params);
}

#[test]
fn teacher_presence_must_match_distillation() {
    let teacher = DetectorNet::new(&spec(), 16, 9).unwrap();
    let (cfg, net, scenes) = small_run(Some(DistillConfig::default()), 2);
    assert!(train(&net, &scenes, &cfg, None).is_err());
    let (cfg, net, scenes) = small_run(None, 2);
    assert!(train(&net, &scenes, &cfg, Some(&teacher)).is_err());
}

#[test]
fn invalid_training_config_rejected() {
    let (mut cfg, net, scenes) = small_run(None, 0);
    assert!(train(&net, &scenes, &cfg, None).is_err());
    cfg.steps = 1;
    cfg.learning_rate = 0.0;
    assert!(train(&net, &scenes, &cfg, None).is_err());
}

#[test]
fn nan_input_aborts_with_step() {
    let (cfg, net, mut scenes) = small_run(None, 3);
    for s in scenes.iter_mut() {
        s.input.set(0, 0, f64::NAN);
    }
    assert!(matches!(train(&net, &scenes, &cfg, None), Err(Error::NonFiniteLoss { step: 0 })));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, net, scenes) = small_run(None, 2);
    let out = train(&net, &scenes, &cfg, None).unwrap();
    let path = dir.path().join("net.json");
    out.net.save(&path, &out.trace, &[]).unwrap();
    let (back, ckpt) = DetectorNet::load(&path).unwrap();
    assert_eq!(back, out.net);
    assert_eq!(ckpt.trace, out.trace);

    let mut doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    doc["tensors"][0]["shape"] = serde_json::json!([1, 1]);
    doc["tensors"][0]["values"] = serde_json::json!([0.0]);
    std::fs::write(&path, doc.to_string()).unwrap();
    assert!(matches!(DetectorNet::load(&path), Err(Error::Checkpoint(_))));
    std::fs::write(&path, "{ not json").unwrap();
    assert!(matches!(DetectorNet::load(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn scene_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = generate_scenes(&spec(), 0, 3).unwrap();
    let path = dir.path().join("scenes.json");
    save_scenes(&path, &spec(), &scenes).unwrap();
    let (s, back) = load_scenes(&path).unwrap();
    assert_eq!(s, spec());
    assert_eq!(back, scenes);
}
