//! Text format for score traces.
//!
//! ```text
//! # comment
//! <step> <new> <pos>:<score> <pos>:<score> ...
//! ```
//!
//! One step per line. `<step>` is a positive integer and strictly increases,
//! `<new>` is `1` if the last listed position was appended at this step and
//! `0` otherwise. Pairs list every existing position in ascending order;
//! scores are non-negative decimals with `.` as separator, exponents
//! allowed. Fields are separated by single spaces or tabs. Blank lines and
//! lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use kvfreeze_core::{Error, ScoreTrace, TraceStep};

use crate::error::{HarnessError, Result};

pub fn format_trace(trace: &ScoreTrace) -> String {
    let mut s = String::from("# kvfreeze score trace: <step> <new> <pos>:<score>...\n");
    for st in &trace.steps {
        write!(s, "{} {}", st.step, u8::from(st.new_token)).unwrap();
        for (p, v) in &st.scores {
            write!(s, " {p}:{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn syntax(line: usize, reason: impl Into<String>) -> HarnessError {
    HarnessError::Parse {
        path: "trace".into(),
        line,
        reason: reason.into(),
    }
}

fn at(step: u64, position: Option<usize>, reason: &str) -> HarnessError {
    Error::Trace {
        step,
        position,
        reason: reason.into(),
    }
    .into()
}

/// Parses a trace. Syntax errors name the line; score errors also name the
/// step and position.
pub fn parse_trace(text: &str) -> Result<ScoreTrace> {
    let mut steps: Vec<TraceStep> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let mut fields = body.split_ascii_whitespace();
        let step: u64 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| syntax(line, "expected a step index"))?;
        let new_token = match fields.next() {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(syntax(line, "expected new-token flag 0 or 1")),
        };
        if steps.last().is_some_and(|s| step <= s.step) {
            return Err(at(step, None, "step indices must increase"));
        }
        let mut scores = Vec::new();
        for (expected, f) in fields.enumerate() {
            let (p, v) = f
                .split_once(':')
                .ok_or_else(|| at(step, Some(expected), "expected <pos>:<score>"))?;
            let p: usize = p
                .parse()
                .map_err(|_| at(step, Some(expected), "bad position"))?;
            if p != expected {
                return Err(at(step, Some(expected.min(p)), "missing score"));
            }
            let v: f64 = v.parse().map_err(|_| at(step, Some(p), "bad score"))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(at(step, Some(p), "score must be finite and >= 0"));
            }
            scores.push((p, v));
        }
        if scores.is_empty() {
            return Err(at(step, None, "no scores"));
        }
        steps.push(TraceStep {
            step,
            new_token,
            scores,
        });
    }
    Ok(ScoreTrace { steps })
}

pub fn load_trace(path: &Path) -> Result<ScoreTrace> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_trace(&text).map_err(|e| match e {
        HarnessError::Parse { line, reason, .. } => HarnessError::Parse {
            path: path.display().to_string(),
            line,
            reason,
        },
        other => other,
    })
}

pub fn save_trace(path: &Path, trace: &ScoreTrace) -> Result<()> {
    fs::write(path, format_trace(trace)).map_err(|e| HarnessError::io(path, e))
}
