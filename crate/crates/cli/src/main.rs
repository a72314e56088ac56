mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use tbd_core::harmony::{HsVariant, LossNorm};
use tbd_core::task_signals::PcMode;

use crate::config::RunConfig;

/// Task-balanced distillation on synthetic detection scenes.
#[derive(Debug, Parser)]
#[command(name = "tbd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render training and held-out scenes.
    GenData,
    /// Train the wide detector.
    TrainTeacher,
    /// Train a narrow detector without distillation.
    TrainStudent,
    /// Train a narrow detector distilled from `--teacher`.
    Distill,
    /// Toy-mAP, harmony tables and HS gap for each `--model`.
    Eval,
    /// Full report: harmony, error buckets, traces, NMS audit.
    Analyze,
    /// Finite-difference check of every loss.
    Gradcheck,
    /// Harmony-variant and feature-mask ablation grids.
    Ablate,
}

#[derive(Debug, Args)]
struct Flags {
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Teacher checkpoint.
    #[arg(long, global = true)]
    teacher: Option<PathBuf>,
    /// Directory holding train_scenes.json / test_scenes.json.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Model checkpoint; repeatable.
    #[arg(long = "model", global = true)]
    models: Vec<PathBuf>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    beta: Option<f64>,
    #[arg(long, global = true, value_parser = parse_variant)]
    hs_variant: Option<HsVariant>,
    #[arg(long, global = true, value_parser = parse_norm)]
    hd_norm: Option<LossNorm>,
    #[arg(long, global = true, value_parser = parse_pc_mode)]
    pc_mode: Option<PcMode>,
    /// on | off | whole | fixed:<w_cls>,<w_reg>
    #[arg(long, global = true)]
    twg: Option<String>,
}

fn parse_variant(s: &str) -> Result<HsVariant, String> {
    HsVariant::ALL
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| format!("expected tanh, exp or log, got `{s}`"))
}

fn parse_norm(s: &str) -> Result<LossNorm, String> {
    match s {
        "l1" => Ok(LossNorm::L1),
        "l2" => Ok(LossNorm::L2),
        _ => Err(format!("expected l1 or l2, got `{s}`")),
    }
}

fn parse_pc_mode(s: &str) -> Result<PcMode, String> {
    match s {
        "softmax" => Ok(PcMode::Softmax),
        "sigmoid" => Ok(PcMode::Sigmoid),
        _ => Err(format!("expected softmax or sigmoid, got `{s}`")),
    }
}

fn resolve(flags: Flags) -> Result<RunConfig> {
    let mut c = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = flags.seed {
        c.seed = v;
    }
    if let Some(v) = flags.out {
        c.out = v;
    }
    if let Some(v) = flags.teacher {
        c.teacher = Some(v);
    }
    if let Some(v) = flags.data {
        c.data = Some(v);
    }
    if !flags.models.is_empty() {
        c.models = flags.models;
    }
    if let Some(v) = flags.steps {
        c.steps = v;
    }
    if let Some(v) = flags.alpha {
        c.alpha = v;
    }
    if let Some(v) = flags.beta {
        c.beta = v;
    }
    if let Some(v) = flags.hs_variant {
        c.hs_variant = v;
    }
    if let Some(v) = flags.hd_norm {
        c.hd_norm = v;
    }
    if let Some(v) = flags.pc_mode {
        c.pc_mode = v;
    }
    if let Some(v) = flags.twg {
        c.twg = v;
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = resolve(cli.flags)?;
    commands::dispatch(&cli.command, &config)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
