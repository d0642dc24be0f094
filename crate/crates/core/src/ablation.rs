//! Interaction-principle and decoder-structure ablation matrix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{TextGranularity, TrainConfig, VpmMode};
use crate::data::Dataset;
use crate::error::Result;
use crate::train::{evaluate, train, TrainOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    /// `"principles"` or `"structure"`.
    pub table: &'static str,
    pub name: &'static str,
    pub config: TrainConfig,
}

/// Cumulative interaction-principle rows, then decoder and projection structure rows.
pub fn variants(base: &TrainConfig) -> Vec<Variant> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let baseline = |c: &mut TrainConfig| {
        c.model.use_activation = false;
        c.model.vpm = VpmMode::Off;
        c.model.use_l2v = false;
        c.model.text_granularity = TextGranularity::WordAndSentence;
        c.model.vpm_self_attention = true;
    };
    let full = |c: &mut TrainConfig| {
        c.model.use_activation = true;
        c.model.vpm = VpmMode::Multi;
        c.model.use_l2v = true;
        c.model.text_granularity = TextGranularity::WordAndSentence;
        c.model.vpm_self_attention = true;
    };
    let row = |table, name, config| Variant { table, name, config };
    vec![
        row("principles", "Simple Baseline", with(&baseline)),
        row(
            "principles",
            "+ Language-to-Vision Decoder",
            with(&|c| {
                baseline(c);
                c.model.use_l2v = true;
            }),
        ),
        row(
            "principles",
            "+ Single-Scale Vision Projection Module",
            with(&|c| {
                baseline(c);
                c.model.use_l2v = true;
                c.model.vpm = VpmMode::Single;
            }),
        ),
        row(
            "principles",
            "+ Multi-Scale Vision Projection Module",
            with(&|c| {
                baseline(c);
                c.model.use_l2v = true;
                c.model.vpm = VpmMode::Multi;
            }),
        ),
        row("principles", "+ Activation Module", with(&full)),
        row(
            "principles",
            "Only utilize sentence embedding",
            with(&|c| {
                full(c);
                c.model.text_granularity = TextGranularity::SentenceOnly;
            }),
        ),
        row(
            "structure",
            "1 Decoder Layer",
            with(&|c| {
                full(c);
                c.model.l2v_layers = 1;
                c.model.l2v_encoder_layers = 0;
            }),
        ),
        row(
            "structure",
            "3 Decoder Layers",
            with(&|c| {
                full(c);
                c.model.l2v_layers = 3;
                c.model.l2v_encoder_layers = 0;
            }),
        ),
        row(
            "structure",
            "6 Decoder Layers",
            with(&|c| {
                full(c);
                c.model.l2v_layers = 6;
                c.model.l2v_encoder_layers = 0;
            }),
        ),
        row(
            "structure",
            "+ Encoder Layers",
            with(&|c| {
                full(c);
                c.model.l2v_layers = 6;
                c.model.l2v_encoder_layers = c.model.l2v_encoder_layers.max(1);
            }),
        ),
        row(
            "structure",
            "Only Cross-Attention Fusion",
            with(&|c| {
                full(c);
                c.model.vpm_self_attention = false;
            }),
        ),
        row("structure", "Both Self and Cross-Attention Fusion", with(&full)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: String,
    pub name: String,
    pub config_hash: String,
    pub params: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub mean_iou: f64,
    pub p50: f64,
    pub p70: f64,
    pub p90: f64,
}

/// Trains every variant, each capped at `max_steps` when given, and
/// evaluates it on `eval_set`.
pub fn run_ablation(
    base: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
    max_steps: Option<usize>,
    out_dir: Option<&Path>,
    verbose: bool,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let all = variants(base);
    let total = all.len();
    for (i, v) in all.into_iter().enumerate() {
        let mut cfg = v.config;
        if max_steps.is_some() {
            cfg.max_steps = max_steps;
        }
        if verbose {
            eprintln!("[{}/{total}] {}", i + 1, v.name);
        }
        let opts = TrainOptions { out_dir: out_dir.map(|d| d.join(format!("{i:02}"))), verbose: false };
        let outcome = train(&cfg, train_set, None, &opts)?;
        let report = evaluate(&outcome.model, &eval_set.samples)?;
        rows.push(AblationRow {
            table: v.table.to_string(),
            name: v.name.to_string(),
            config_hash: cfg.model.hash(),
            params: outcome.model.params.numel(),
            steps: outcome.step_losses.len(),
            final_loss: outcome.step_losses.last().copied().unwrap_or(f64::NAN),
            mean_iou: report.mean_iou,
            p50: report.p50,
            p70: report.p70,
            p90: report.p90,
        });
    }
    Ok(rows)
}

/// Plain-text table with one line per row.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<42} {:>6} {:>10} {:>8} {:>7} {:>7} {:>7}\n", "Model", "steps", "loss", "IoU", "P@0.5", "P@0.7", "P@0.9");
    let mut table = "";
    for r in rows {
        if r.table != table {
            table = &r.table;
            s.push_str(&format!("-- {table}\n"));
        }
        s.push_str(&format!(
            "{:<42} {:>6} {:>10.5} {:>8.4} {:>7.3} {:>7.3} {:>7.3}\n",
            r.name, r.steps, r.final_loss, r.mean_iou, r.p50, r.p70, r.p90
        ));
    }
    s
}
