//! Per-step metrics as CSV.
//!
//! One header row, one row per step, then `# key=value` summary lines.
//! Floats use six decimals and `.` as separator; lines end in LF. Entropy
//! is empty for trace replay.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use kvfreeze_core::controller::compression_ratio;
use kvfreeze_core::{RecoveryAction, StepMetrics};

use crate::error::{HarnessError, Result};

pub const COLUMNS: [&str; 9] = [
    "step",
    "total",
    "active",
    "frozen",
    "frozen_this_step",
    "restored_this_step",
    "compression",
    "entropy",
    "recovery",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub steps: usize,
    pub mean_compression: f64,
    pub max_compression: f64,
    /// `1 - active / total` of the last row.
    pub final_compression: f64,
    pub total_freezes: usize,
    pub total_restores: usize,
    pub recovery_actions: usize,
    pub wall_clock_s: Option<f64>,
}

impl Summary {
    pub fn from_rows(rows: &[StepMetrics], wall_clock_s: Option<f64>) -> Self {
        let n = rows.len().max(1) as f64;
        let last = rows.last();
        Self {
            steps: rows.len(),
            mean_compression: rows.iter().map(|r| r.compression).sum::<f64>() / n,
            max_compression: rows.iter().map(|r| r.compression).fold(0.0, f64::max),
            final_compression: last.map_or(0.0, |r| compression_ratio(r.total, r.active)),
            total_freezes: rows.iter().map(|r| r.frozen_this_step).sum(),
            total_restores: rows.iter().map(|r| r.restored_this_step).sum(),
            recovery_actions: rows
                .iter()
                .filter(|r| r.recovery != RecoveryAction::None)
                .count(),
            wall_clock_s,
        }
    }

    fn lines(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            ("steps", self.steps.to_string()),
            ("mean_compression", format!("{:.6}", self.mean_compression)),
            ("max_compression", format!("{:.6}", self.max_compression)),
            (
                "final_compression",
                format!("{:.6}", self.final_compression),
            ),
            ("total_freezes", self.total_freezes.to_string()),
            ("total_restores", self.total_restores.to_string()),
            ("recovery_actions", self.recovery_actions.to_string()),
        ];
        if let Some(t) = self.wall_clock_s {
            v.push(("wall_clock_s", format!("{t:.3}")));
        }
        v
    }
}

pub fn write_metrics<W: Write>(
    out: W,
    rows: &[StepMetrics],
    summary: &Summary,
) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.total.to_string(),
            r.active.to_string(),
            r.frozen.to_string(),
            r.frozen_this_step.to_string(),
            r.restored_this_step.to_string(),
            format!("{:.6}", r.compression),
            r.entropy.map(|e| format!("{e:.6}")).unwrap_or_default(),
            r.recovery.label().to_string(),
        ])?;
    }
    let mut out = w.into_inner().map_err(|e| e.into_error())?;
    for (k, v) in summary.lines() {
        writeln!(out, "# {k}={v}")?;
    }
    out.flush()
}

pub fn save_metrics(path: &Path, rows: &[StepMetrics], summary: &Summary) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics(&mut buf, rows, summary).map_err(|e| HarnessError::io(path, e))?;
    fs::write(path, buf).map_err(|e| HarnessError::io(path, e))
}

/// Rows and the raw summary entries of a metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    pub rows: Vec<StepMetrics>,
    pub summary: Vec<(String, String)>,
}

impl MetricsFile {
    pub fn summary_value(&self, key: &str) -> Option<&str> {
        self.summary
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn field<T: FromStr>(rec: &csv::StringRecord, i: usize, line: usize, name: &str) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| HarnessError::Parse {
            path: "metrics".into(),
            line,
            reason: format!("bad {name}"),
        })
}

pub fn read_metrics<R: BufRead>(input: R) -> Result<MetricsFile> {
    let mut table = String::new();
    let mut summary = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| HarnessError::Usage(e.to_string()))?;
        match line.strip_prefix("# ") {
            Some(kv) => {
                let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
                summary.push((k.to_string(), v.to_string()));
            }
            None => {
                table.push_str(&line);
                table.push('\n');
            }
        }
    }
    let mut r = csv::Reader::from_reader(table.as_bytes());
    let header = r
        .headers()
        .map_err(|e| HarnessError::Usage(e.to_string()))?;
    if header.iter().ne(COLUMNS) {
        return Err(HarnessError::Parse {
            path: "metrics".into(),
            line: 1,
            reason: "unexpected header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| HarnessError::Parse {
            path: "metrics".into(),
            line,
            reason: e.to_string(),
        })?;
        let entropy = match rec.get(7) {
            Some("") => None,
            _ => Some(field(&rec, 7, line, "entropy")?),
        };
        let recovery = rec
            .get(8)
            .and_then(|s| s.parse::<RecoveryAction>().ok())
            .ok_or_else(|| HarnessError::Parse {
                path: "metrics".into(),
                line,
                reason: "bad recovery".into(),
            })?;
        rows.push(StepMetrics {
            step: field(&rec, 0, line, "step")?,
            total: field(&rec, 1, line, "total")?,
            active: field(&rec, 2, line, "active")?,
            frozen: field(&rec, 3, line, "frozen")?,
            frozen_this_step: field(&rec, 4, line, "frozen_this_step")?,
            restored_this_step: field(&rec, 5, line, "restored_this_step")?,
            compression: field(&rec, 6, line, "compression")?,
            entropy,
            recovery,
        });
    }
    Ok(MetricsFile { rows, summary })
}

pub fn load_metrics(path: &Path) -> Result<MetricsFile> {
    let f = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    read_metrics(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, total: usize, active: usize, entropy: Option<f64>) -> StepMetrics {
        StepMetrics {
            step,
            total,
            active,
            frozen: total - active,
            frozen_this_step: 1,
            restored_this_step: 0,
            compression: compression_ratio(total, active),
            entropy,
            recovery: if step == 2 {
                RecoveryAction::SoftReset
            } else {
                RecoveryAction::None
            },
        }
    }

    #[test]
    fn layout_and_round_trip() {
        let rows = vec![row(1, 15, 15, Some(5.5)), row(2, 16, 12, Some(5.25))];
        let summary = Summary::from_rows(&rows, None);
        let mut buf = Vec::new();
        write_metrics(&mut buf, &rows, &summary).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(!text.contains('\r'));
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), COLUMNS.join(","));
        assert_eq!(
            lines.next().unwrap(),
            "1,15,15,0,1,0,0.000000,5.500000,None"
        );
        assert_eq!(lines.next().unwrap(), "2,16,12,4,1,0,0.250000,5.250000,SR");
        assert!(text.contains("# final_compression=0.250000\n"));
        assert!(!text.contains("wall_clock"));

        let back = read_metrics(&buf[..]).unwrap();
        assert_eq!(back.rows, rows);
        assert_eq!(back.summary_value("steps"), Some("2"));
        assert_eq!(back.summary_value("recovery_actions"), Some("1"));
    }

    #[test]
    fn replay_rows_have_empty_entropy() {
        let rows = vec![row(1, 15, 15, None)];
        let mut buf = Vec::new();
        write_metrics(&mut buf, &rows, &Summary::from_rows(&rows, Some(1.5))).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains(",0.000000,,None\n"));
        assert!(text.contains("# wall_clock_s=1.500\n"));
        assert_eq!(read_metrics(&buf[..]).unwrap().rows, rows);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(read_metrics(&b"step,total\n1,2\n"[..]).is_err());
    }
}
