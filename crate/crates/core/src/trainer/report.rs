//! Metric trace CSV and JSON run summary.
//!
//! Every float is written with 17 significant digits so values survive a
//! text round trip unchanged.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{CirkdError, Result};
use crate::losses::LossBreakdown;

pub const TRACE_HEADER: &str =
    "iter,lr,loss_task,loss_kd,loss_batch_p2p,loss_mem_p2p,loss_mem_p2r,loss_total,val_miou";

/// One CSV line. Loss fields are empty on the initial evaluation row and
/// `val_miou` is empty between evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub lr: f64,
    pub parts: Option<LossBreakdown>,
    pub total: Option<f64>,
    pub val_miou: Option<f64>,
}

fn sci(v: f64) -> String {
    format!("{v:.16e}")
}

impl TraceRow {
    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(sci).unwrap_or_default();
        let p = self.parts;
        let mut line = format!("{},{}", self.iter, sci(self.lr));
        for v in [
            p.map(|p| p.task),
            p.map(|p| p.kd),
            p.map(|p| p.batch_p2p),
            p.map(|p| p.memory_p2p),
            p.map(|p| p.memory_p2r),
            self.total,
            self.val_miou,
        ] {
            let _ = write!(line, ",{}", opt(v));
        }
        line
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 200);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    std::fs::write(path, trace_csv(rows)).map_err(|e| CirkdError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalLosses {
    pub task: f64,
    pub kd: f64,
    pub batch_p2p: f64,
    pub memory_p2p: f64,
    pub memory_p2r: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: TrainConfig,
    pub iterations: usize,
    pub final_miou: f64,
    /// `null` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// Absent when no step was taken.
    pub final_losses: Option<FinalLosses>,
    pub wall_clock_seconds: f64,
}

/// Pretty JSON formatter that prints floats in scientific notation with 17
/// significant digits.
struct SciFormatter(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for SciFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write!(w, "{v:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        self.write_f64(w, v as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(
        &mut buf,
        SciFormatter(serde_json::ser::PrettyFormatter::new()),
    );
    value
        .serialize(&mut ser)
        .map_err(|e| CirkdError::State(format!("JSON serialization failed: {e}")))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    std::fs::write(path, to_json(summary)?).map_err(|e| CirkdError::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| CirkdError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CirkdError::Format {
        path: path.into(),
        detail: e.to_string(),
    })
}
