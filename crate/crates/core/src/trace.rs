//! Per-iteration records and the CSV trace format shared by all solvers.

use std::io::{self, Write};

/// Error metric above which a run is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Records are kept for every iteration up to this index, then decimated.
pub const FULL_TRACE_LIMIT: usize = 100_000;

/// Keep every n-th record past [`FULL_TRACE_LIMIT`].
pub const DECIMATION: usize = 10;

pub const CSV_HEADER: &str = "k,error,primal_residual,dual_norm,objective";

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    /// `‖col{x_1, …, x_q}‖₂`.
    pub error: f64,
    /// `‖Σ A_i x_i − c‖₂`.
    pub primal_residual: f64,
    pub dual_norm: f64,
    /// `Σ f_i(x_i)`, absent when some `f_i` is infinite at the iterate.
    pub objective: Option<f64>,
}

impl IterationRecord {
    pub fn is_finite(&self) -> bool {
        self.error.is_finite() && self.primal_residual.is_finite() && self.dual_norm.is_finite()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    records: Vec<IterationRecord>,
    full: bool,
    pending: Option<IterationRecord>,
}

impl Trace {
    pub fn new(full: bool) -> Self {
        Self {
            records: Vec::new(),
            full,
            pending: None,
        }
    }

    pub fn push(&mut self, record: IterationRecord) {
        if self.full || record.k <= FULL_TRACE_LIMIT || record.k.is_multiple_of(DECIMATION) {
            self.records.push(record);
            self.pending = None;
        } else {
            self.pending = Some(record);
        }
    }

    /// Flushes the last record if decimation skipped it.
    pub fn finish(mut self) -> Vec<IterationRecord> {
        if let Some(r) = self.pending.take() {
            self.records.push(r);
        }
        self.records
    }
}

fn fmt_value(v: f64) -> String {
    format!("{v:e}")
}

pub fn write_csv<W: Write>(records: &[IterationRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        let objective = r.objective.map(fmt_value).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            r.k,
            fmt_value(r.error),
            fmt_value(r.primal_residual),
            fmt_value(r.dual_norm),
            objective
        )?;
    }
    Ok(())
}
