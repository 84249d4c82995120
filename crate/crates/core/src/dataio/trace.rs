//! CSV export of iteration traces.

use std::io::{BufRead, Write};

use crate::runtime::{IterationRecord, IterationTrace};
use crate::{Error, Result};

pub const TRACE_HEADER: &str = "iter,f,grad_norm,what_normsq,lyapunov,uploads_cum_bytes,broadcast_cum_bytes,ate,reproj";

/// One exported row; absent values are empty fields.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub f: f64,
    pub grad_norm: f64,
    pub what_normsq: Option<f64>,
    pub lyapunov: Option<f64>,
    pub uploads_cum_bytes: u64,
    pub broadcast_cum_bytes: u64,
    pub ate: Option<f64>,
    pub reproj: Option<f64>,
}

impl From<&IterationRecord> for TraceRow {
    fn from(r: &IterationRecord) -> Self {
        Self {
            iter: r.iter,
            f: r.f,
            grad_norm: r.grad_norm,
            what_normsq: r.what_normsq,
            lyapunov: r.lyapunov,
            uploads_cum_bytes: r.upload_bytes_cum,
            broadcast_cum_bytes: r.broadcast_bytes_cum,
            ate: r.ate,
            reproj: r.reproj,
        }
    }
}

/// 17 significant digits, exponent form; round-trips every finite f64.
fn real(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(real).unwrap_or_default()
}

pub fn write_rows(rows: &[TraceRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.iter,
            real(r.f),
            real(r.grad_norm),
            opt(r.what_normsq),
            opt(r.lyapunov),
            r.uploads_cum_bytes,
            r.broadcast_cum_bytes,
            opt(r.ate),
            opt(r.reproj)
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trace(trace: &IterationTrace, out: impl Write) -> Result<()> {
    let rows: Vec<TraceRow> = trace.records.iter().map(TraceRow::from).collect();
    write_rows(&rows, out)
}

pub fn read_trace(input: impl BufRead) -> Result<Vec<TraceRow>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    match header {
        Some(h) if h.trim_end() == TRACE_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "missing trace header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let line = line?;
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 9 fields, found {}", fields.len()),
            });
        }
        let bad = |what: &str| Error::Parse {
            line: line_no,
            msg: format!("bad {what}"),
        };
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        let maybe = |s: &str, what: &str| {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s, what).map(Some)
            }
        };
        rows.push(TraceRow {
            iter: fields[0].parse().map_err(|_| bad("iter"))?,
            f: num(fields[1], "f")?,
            grad_norm: num(fields[2], "grad_norm")?,
            what_normsq: maybe(fields[3], "what_normsq")?,
            lyapunov: maybe(fields[4], "lyapunov")?,
            uploads_cum_bytes: fields[5].parse().map_err(|_| bad("uploads_cum_bytes"))?,
            broadcast_cum_bytes: fields[6].parse().map_err(|_| bad("broadcast_cum_bytes"))?,
            ate: maybe(fields[7], "ate")?,
            reproj: maybe(fields[8], "reproj")?,
        });
    }
    Ok(rows)
}
