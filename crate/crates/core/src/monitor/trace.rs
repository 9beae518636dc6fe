//! Statistic trace CSV: `frame_index,T_value,alarm_flag,winner_gamma1,winner_gamma2,winner_gamma3`.
//! Winner fields are empty for burn-in frames. Reals use the shortest round-trip form.

use std::path::Path;

use super::FrameVerdict;
use crate::error::{Error, Result};

pub const TRACE_HEADER: [&str; 6] = [
    "frame_index",
    "T_value",
    "alarm_flag",
    "winner_gamma1",
    "winner_gamma2",
    "winner_gamma3",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub frame_index: usize,
    pub value: f64,
    pub alarm: bool,
    pub winner: Option<[f64; 3]>,
}

impl TraceRow {
    pub fn from_verdict(v: &FrameVerdict) -> Self {
        TraceRow {
            frame_index: v.frame_index,
            value: v.value,
            alarm: v.alarm,
            winner: v.winner.map(|c| [c.gamma1, c.gamma2, c.gamma3]),
        }
    }
}

pub fn write_trace(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_HEADER)?;
    for r in rows {
        let g = |k: usize| r.winner.map_or(String::new(), |w| w[k].to_string());
        w.write_record([
            r.frame_index.to_string(),
            r.value.to_string(),
            (r.alarm as u8).to_string(),
            g(0),
            g(1),
            g(2),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(TRACE_HEADER) {
        return Err(Error::Malformed(format!(
            "{}: unexpected trace header",
            path.display()
        )));
    }
    let bad = |what: &str| Error::Malformed(format!("{}: bad {what}", path.display()));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let winner = if rec[3].is_empty() {
            None
        } else {
            let mut g = [0.0; 3];
            for (k, v) in g.iter_mut().enumerate() {
                *v = rec[3 + k].parse().map_err(|_| bad("winner gamma"))?;
            }
            Some(g)
        };
        rows.push(TraceRow {
            frame_index: rec[0].parse().map_err(|_| bad("frame_index"))?,
            value: rec[1].parse().map_err(|_| bad("T_value"))?,
            alarm: match &rec[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("alarm_flag")),
            },
            winner,
        });
    }
    Ok(rows)
}

/// Per-frame wall time, `frame_index,wall_ms`.
pub fn write_timing(millis: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame_index", "wall_ms"])?;
    for (i, m) in millis.iter().enumerate() {
        w.write_record([i.to_string(), format!("{m:.4}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
