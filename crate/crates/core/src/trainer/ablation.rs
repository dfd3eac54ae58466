//! The loss-term ablation grid: baseline, +kd, each relational term on top
//! of kd, both memory terms, and the full objective.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::{Experiment, Trainer};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationRow {
    pub name: &'static str,
    pub kd: bool,
    pub batch_p2p: bool,
    pub memory_p2p: bool,
    pub memory_p2r: bool,
}

impl AblationRow {
    const fn new(name: &'static str, kd: bool, bp: bool, mp: bool, mr: bool) -> Self {
        Self {
            name,
            kd,
            batch_p2p: bp,
            memory_p2p: mp,
            memory_p2r: mr,
        }
    }

    /// `base` with the weights of disabled terms set to zero. Enabled terms
    /// keep the weights from `base`.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let d = &mut cfg.distill;
        let keep = |on: bool, w: f64| if on { w } else { 0.0 };
        d.kd_weight = keep(self.kd, d.kd_weight);
        d.alpha = keep(self.batch_p2p, d.alpha);
        d.beta = keep(self.memory_p2p, d.beta);
        d.gamma = keep(self.memory_p2r, d.gamma);
        cfg
    }
}

pub fn ablation_grid() -> [AblationRow; 7] {
    [
        AblationRow::new("baseline", false, false, false, false),
        AblationRow::new("kd", true, false, false, false),
        AblationRow::new("kd+batch_p2p", true, true, false, false),
        AblationRow::new("kd+memory_p2p", true, false, true, false),
        AblationRow::new("kd+memory_p2r", true, false, false, true),
        AblationRow::new("kd+memory_p2p+memory_p2r", true, false, true, true),
        AblationRow::new("full", true, true, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: String,
    /// Final validation mIoU per seed, in seed order.
    pub miou: Vec<f64>,
}

impl AblationResult {
    pub fn mean(&self) -> f64 {
        self.miou.iter().sum::<f64>() / self.miou.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    /// Teacher mIoU per seed; empty for the oracle teacher.
    pub teacher_miou: Vec<f64>,
    pub results: Vec<AblationResult>,
    pub wall_clock_seconds: f64,
}

impl AblationTable {
    pub fn mean_of(&self, row: &str) -> Option<f64> {
        self.results.iter().find(|r| r.row == row).map(AblationResult::mean)
    }

    /// Markdown table, one line per grid row, with per-seed columns.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| row | kd | batch_p2p | memory_p2p | memory_p2r | mean mIoU |");
        for s in &self.seeds {
            let _ = write!(out, " seed {s} |");
        }
        out.push_str("\n|---|---|---|---|---|---|");
        out.push_str(&"---|".repeat(self.seeds.len()));
        out.push('\n');
        let grid = ablation_grid();
        for r in &self.results {
            let mark = |on: bool| if on { "x" } else { "-" };
            let flags = grid.iter().find(|g| g.name == r.row);
            let (kd, bp, mp, mr) = flags.map_or(("?", "?", "?", "?"), |g| {
                (mark(g.kd), mark(g.batch_p2p), mark(g.memory_p2p), mark(g.memory_p2r))
            });
            let _ = write!(out, "| {} | {kd} | {bp} | {mp} | {mr} | {:.4} |", r.row, r.mean());
            for m in &r.miou {
                let _ = write!(out, " {m:.4} |");
            }
            out.push('\n');
        }
        if !self.teacher_miou.is_empty() {
            let mean = self.teacher_miou.iter().sum::<f64>() / self.teacher_miou.len() as f64;
            let _ = writeln!(out, "\nteacher mean mIoU: {mean:.4}");
        }
        out
    }
}

/// Trains every row in `rows` for every seed. The teacher and data pool are
/// built once per seed and shared by all rows. `progress` receives
/// `(seed, row name, final mIoU)` after each run.
pub fn run_ablation(
    base: &TrainConfig,
    seeds: &[u64],
    rows: &[AblationRow],
    mut progress: impl FnMut(u64, &str, f64),
) -> Result<AblationTable> {
    let start = std::time::Instant::now();
    let mut results: Vec<AblationResult> = rows
        .iter()
        .map(|r| AblationResult {
            row: r.name.to_string(),
            miou: Vec::with_capacity(seeds.len()),
        })
        .collect();
    let mut teacher_miou = Vec::new();
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..base.clone() };
        let experiment = Arc::new(Experiment::prepare(&cfg)?);
        if let Some(m) = experiment.teacher_miou(&cfg)? {
            teacher_miou.push(m);
        }
        for (row, result) in rows.iter().zip(&mut results) {
            let outcome = Trainer::new(&row.apply(&cfg), Arc::clone(&experiment))?.run(|_| {})?;
            progress(seed, row.name, outcome.final_miou);
            result.miou.push(outcome.final_miou);
        }
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        teacher_miou,
        results,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}
