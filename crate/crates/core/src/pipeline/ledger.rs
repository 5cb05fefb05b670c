//! The bound ledger: one row per update, with acceptance bookkeeping.

use crate::error::{Error, Result};
use std::fmt::Write as _;

/// One recorded update of one family.
#[derive(Debug, Clone)]
pub struct LedgerRow {
    pub iteration: usize,
    pub family: &'static str,
    /// Subject index, or `None` for population-level updates.
    pub subject: Option<usize>,
    pub before: f64,
    pub after: f64,
    pub accepted: bool,
    /// Compact diagnostics (halvings, degeneracies, fallbacks).
    pub flags: String,
    pub ms: u128,
}

/// Per-iteration, per-family record of the variational bound.
#[derive(Debug, Clone, Default)]
pub struct BoundLedger {
    pub rows: Vec<LedgerRow>,
    /// When false the ms column is written as 0 so ledgers are
    /// byte-reproducible across runs.
    pub timing: bool,
}

impl BoundLedger {
    pub fn new(timing: bool) -> Self {
        BoundLedger {
            rows: Vec::new(),
            timing,
        }
    }

    pub fn record(&mut self, row: LedgerRow) {
        self.rows.push(row);
    }

    /// Check the ledger invariant: accepted steps never decrease the bound
    /// beyond the relative slack.
    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            if row.accepted && row.after < row.before - 1e-8 * row.before.abs() {
                return Err(Error::invalid(format!(
                    "accepted {} step at iteration {} decreased the bound: {} -> {}",
                    row.family, row.iteration, row.before, row.after
                )));
            }
        }
        Ok(())
    }

    /// CSV serialization: `iteration,family,subject,before,after,accepted,flags,ms`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,family,subject,before,after,accepted,flags,ms\n");
        for row in &self.rows {
            let subject = row
                .subject
                .map(|s| s.to_string())
                .unwrap_or_else(|| "-".into());
            let ms = if self.timing { row.ms } else { 0 };
            let _ = writeln!(
                out,
                "{},{},{},{:.17e},{:.17e},{},{},{}",
                row.iteration,
                row.family,
                subject,
                row.before,
                row.after,
                row.accepted as u8,
                if row.flags.is_empty() { "-" } else { &row.flags },
                ms
            );
        }
        out
    }

    pub fn final_bound(&self) -> Option<f64> {
        self.rows.last().map(|r| if r.accepted { r.after } else { r.before })
    }
}
