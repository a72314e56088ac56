use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use tbd_core::analysis::{
    detections, emit_report, fmt6, harmony_rows, nms_audit, write_table, RunReport,
};
use tbd_core::experiment::{evaluate, hd_ablation, mask_ablation, AblationRow, TEST_SEED_OFFSET};
use tbd_core::toy_detector::{
    forward, generate_scenes, load_scenes, save_scenes, train, Checkpoint, DetectorNet, ScenarioSpec,
    StepTrace, SyntheticScene, TrainOutcome, TrainingConfig,
};
use tbd_core::verification::gradient_suite;

use crate::config::RunConfig;
use crate::Command;

pub fn dispatch(command: &Command, c: &RunConfig) -> Result<ExitCode> {
    // Prerequisites are checked before anything is written.
    if matches!(command, Command::Distill | Command::Ablate) && c.teacher.is_none() {
        bail!("this command requires --teacher <checkpoint>");
    }
    if matches!(command, Command::Eval | Command::Analyze) && c.models.is_empty() {
        bail!("this command requires at least one --model <checkpoint>");
    }
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    std::fs::write(c.out.join("config.toml"), c.to_toml()?)?;
    match command {
        Command::GenData => gen_data(c),
        Command::TrainTeacher => train_detector(c, c.teacher_width, false, "teacher.json"),
        Command::TrainStudent => train_detector(c, c.student_width, false, "vanilla.json"),
        Command::Distill => train_detector(c, c.student_width, true, "distilled.json"),
        Command::Eval => eval(c),
        Command::Analyze => analyze(c),
        Command::Gradcheck => gradcheck(c),
        Command::Ablate => ablate(c),
    }
}

fn train_set(c: &RunConfig) -> Result<Vec<SyntheticScene>> {
    scenes(c, "train_scenes.json", c.seed * c.train_scenes as u64, c.train_scenes)
}

fn test_set(c: &RunConfig) -> Result<Vec<SyntheticScene>> {
    scenes(c, "test_scenes.json", TEST_SEED_OFFSET, c.test_scenes)
}

/// Scenes from `--data` when given, otherwise rendered from the config.
fn scenes(c: &RunConfig, file: &str, first_seed: u64, count: usize) -> Result<Vec<SyntheticScene>> {
    match &c.data {
        Some(dir) => {
            let path = dir.join(file);
            let (spec, scenes) = load_scenes(&path).with_context(|| format!("loading scenes {}", path.display()))?;
            if spec != c.scenario() {
                bail!("scenes in {} were generated with a different scenario", path.display());
            }
            Ok(scenes)
        }
        None => Ok(generate_scenes(&c.scenario(), first_seed, count)?),
    }
}

fn load_net(path: &Path, what: &str) -> Result<(DetectorNet, Checkpoint)> {
    DetectorNet::load(path).with_context(|| format!("loading {what} checkpoint {}", path.display()))
}

fn gen_data(c: &RunConfig) -> Result<ExitCode> {
    let spec: ScenarioSpec = c.scenario();
    let train = generate_scenes(&spec, c.seed * c.train_scenes as u64, c.train_scenes)?;
    let test = generate_scenes(&spec, TEST_SEED_OFFSET, c.test_scenes)?;
    save_scenes(&c.out.join("train_scenes.json"), &spec, &train)?;
    save_scenes(&c.out.join("test_scenes.json"), &spec, &test)?;
    println!("wrote {} training and {} held-out scenes to {}", train.len(), test.len(), c.out.display());
    Ok(ExitCode::SUCCESS)
}

fn train_detector(c: &RunConfig, width: usize, distill: bool, file: &str) -> Result<ExitCode> {
    let teacher = match (&c.teacher, distill) {
        (Some(path), true) => Some(load_net(path, "teacher")?.0),
        _ => None,
    };
    let scenes = train_set(c)?;
    let net = DetectorNet::new(&c.scenario(), width, c.seed)?;
    let config = TrainingConfig {
        steps: c.steps,
        learning_rate: c.learning_rate,
        batch_size: c.batch_size,
        seed: c.seed,
        distill: distill.then(|| c.distill()).transpose()?,
    };
    let TrainOutcome { net, distill, trace } = train(&net, &scenes, &config, teacher.as_ref())?;
    let mut aux = Vec::new();
    if let Some(d) = &distill {
        aux.push(&d.phi.params);
        if let Some(t) = &d.twg {
            aux.push(&t.params);
        }
    }
    let path = c.out.join(file);
    net.save(&path, &trace, &aux)?;
    let name = file.trim_end_matches(".json").to_string();
    emit_report(
        &RunReport {
            traces: vec![(name, trace.clone())],
            ..RunReport::default()
        },
        &c.out,
    )?;
    let last = trace.last().expect("positive steps");
    println!(
        "{}: step {} total {:.6} detector {:.6} hd {:.6} tfd {:.6}",
        path.display(),
        last.step,
        last.total,
        last.detector,
        last.hd,
        last.tfd
    );
    Ok(ExitCode::SUCCESS)
}

fn label(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn models(c: &RunConfig) -> Result<Vec<(String, DetectorNet, Vec<StepTrace>)>> {
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for path in &c.models {
        let (net, ckpt) = load_net(path, "model")?;
        let mut name = label(path);
        while !seen.insert(name.clone()) {
            name.push('\'');
        }
        out.push((name, net, ckpt.trace));
    }
    Ok(out)
}

fn eval(c: &RunConfig) -> Result<ExitCode> {
    let exp = c.experiment();
    let test = test_set(c)?;
    let teacher = match &c.teacher {
        Some(p) => Some(load_net(p, "teacher")?.0),
        None => None,
    };
    let mut metric_rows = Vec::new();
    let mut harmony = Vec::new();
    for (name, net, _) in models(c)? {
        let probe = teacher.as_ref().map(|t| (t, c.pc_mode, c.hs_variant));
        let m = evaluate(&net, &test, &exp, probe)?;
        metric_rows.push(vec![
            name.clone(),
            fmt6(m.toy_map),
            fmt6(m.harmony.harmonious()),
            m.harmony.total().to_string(),
            m.hs_gap.map_or_else(String::new, fmt6),
        ]);
        let single = vec![(name.clone(), m.harmony.clone())];
        let (header, rows) = harmony_rows(&single);
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_table(&c.out.join(format!("harmony_{name}.csv")), &header, &rows)?;
        println!("{name}: toy-mAP {:.4}, harmonious {:.4} of {}", m.toy_map, m.harmony.harmonious(), m.harmony.total());
        harmony.push((name, m.harmony));
    }
    let (header, rows) = harmony_rows(&harmony);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(&c.out.join("harmony.csv"), &header, &rows)?;
    write_table(
        &c.out.join("metrics.csv"),
        &["model", "toy_map", "harmonious", "above_threshold", "hs_gap"],
        &metric_rows,
    )?;
    Ok(ExitCode::SUCCESS)
}

fn analyze(c: &RunConfig) -> Result<ExitCode> {
    let exp = c.experiment();
    let test = test_set(c)?;
    let mut report = RunReport::default();
    let mut audit_rows = Vec::new();
    for (name, net, trace) in models(c)? {
        let m = evaluate(&net, &test, &exp, None)?;
        let mut inharmonious = 0;
        for scene in &test {
            let preds: Vec<_> = forward(&net, scene)?.into_iter().map(|(_, p)| p).collect();
            let cands = detections(&preds, c.score_floor);
            for e in nms_audit(&cands, &scene.gts, c.nms_iou) {
                inharmonious += e.is_inharmonious() as usize;
                audit_rows.push(vec![
                    name.clone(),
                    scene.seed.to_string(),
                    fmt6(e.kept_score),
                    fmt6(e.kept_iou),
                    fmt6(e.suppressed_score),
                    fmt6(e.suppressed_iou),
                    (e.is_inharmonious() as u8).to_string(),
                ]);
            }
        }
        println!("{name}: {inharmonious} inharmonious suppressions");
        report.harmony.push((name.clone(), m.harmony));
        report.errors.push((name.clone(), m.errors));
        report.traces.push((name, trace));
    }
    emit_report(&report, &c.out)?;
    write_table(
        &c.out.join("nms_audit.csv"),
        &["model", "scene", "kept_score", "kept_iou", "suppressed_score", "suppressed_iou", "inharmonious"],
        &audit_rows,
    )?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(c: &RunConfig) -> Result<ExitCode> {
    let results = gradient_suite(c.gradcheck_points, c.seed, c.gradcheck_step)?;
    let mut rows = Vec::new();
    let mut ok = true;
    for r in &results {
        let pass = r.passes(c.gradcheck_tolerance);
        ok &= pass;
        println!(
            "{:<18} max rel error {:.3e} over {} coordinates ({} tie flips) {}",
            r.loss,
            r.max_rel_error,
            r.coordinates,
            r.tie_flips,
            if pass { "ok" } else { "FAIL" }
        );
        rows.push(vec![
            r.loss.clone(),
            r.points.to_string(),
            r.coordinates.to_string(),
            r.tie_flips.to_string(),
            format!("{:e}", r.max_rel_error),
        ]);
    }
    write_table(
        &c.out.join("gradcheck.csv"),
        &["loss", "points", "coordinates", "tie_flips", "max_rel_error"],
        &rows,
    )?;
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn ablation_table(path: PathBuf, rows: &[AblationRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                fmt6(r.metrics.toy_map),
                fmt6(r.metrics.harmony.harmonious()),
                r.metrics.hs_gap.map_or_else(String::new, fmt6),
                fmt6(r.final_hd),
                fmt6(r.final_tfd),
            ]
        })
        .collect();
    write_table(&path, &["setting", "toy_map", "harmonious", "hs_gap", "final_hd", "final_tfd"], &rows)?;
    Ok(())
}

fn ablate(c: &RunConfig) -> Result<ExitCode> {
    let teacher_path = c.teacher.as_ref().expect("checked in dispatch");
    let (teacher, _) = load_net(teacher_path, "teacher")?;
    let exp = c.experiment();
    let test = test_set(c)?;
    let base = c.distill()?;
    let hd = hd_ablation(&exp, c.seed, &teacher, &test, &base)?;
    ablation_table(c.out.join("ablation_hd.csv"), &hd)?;
    let masks = mask_ablation(&exp, c.seed, &teacher, &test, &base)?;
    ablation_table(c.out.join("ablation_mask.csv"), &masks)?;
    println!("wrote {} + {} ablation rows to {}", hd.len(), masks.len(), c.out.display());
    Ok(ExitCode::SUCCESS)
}
