//! Report tables rendered as aligned text, CSV, or JSON.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::harness::{ChannelRun, ExperimentResult, PatternCheck, PropertyReport, TraceStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Table,
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Table => "txt",
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl FromStr for Format {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "table" => Ok(Format::Table),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(SimError::config(format!("unknown format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Summary lines printed under the text table only.
    pub notes: Vec<String>,
}

impl Table {
    pub fn new(title: impl Into<String>, headers: &[&str]) -> Self {
        Self {
            title: title.into(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(String::len).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        if !self.title.is_empty() {
            let _ = writeln!(out, "{}", self.title);
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let _ = writeln!(out, "{}", line(&self.headers));
        let _ = writeln!(
            out,
            "{}",
            widths
                .iter()
                .map(|w| "-".repeat(*w))
                .collect::<Vec<_>>()
                .join("  ")
        );
        for r in &self.rows {
            let _ = writeln!(out, "{}", line(r));
        }
        for n in &self.notes {
            let _ = writeln!(out, "{n}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }
}

/// A rendered experiment: its table plus the structured data behind it.
#[derive(Debug, Clone, Serialize)]
pub struct Report<T: Serialize> {
    pub experiment: String,
    pub pass: bool,
    #[serde(skip)]
    pub table: Table,
    pub data: T,
}

impl<T: Serialize> Report<T> {
    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Table => self.table.to_text(),
            Format::Csv => self.table.to_csv(),
            Format::Json => {
                let mut s = serde_json::to_string_pretty(self).expect("report data serializes");
                s.push('\n');
                s
            }
        }
    }
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

fn pass_fail(b: bool) -> &'static str {
    if b {
        "PASS"
    } else {
        "FAIL"
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackData {
    pub cells: Vec<AttackCell>,
    pub checks: Vec<PatternCheck>,
}

/// Per-cell summary; the event log stays out of reports.
#[derive(Debug, Clone, Serialize)]
pub struct AttackCell {
    pub config: String,
    pub spdm: String,
    pub secret: u8,
    pub median_cycles: u64,
    pub min_cycles: u64,
    pub max_cycles: u64,
    pub runs: usize,
    pub redo_count: usize,
    pub remote_em_count: usize,
    pub redo_latency: Option<u64>,
}

pub fn attack_report(
    experiment: &str,
    title: &str,
    results: &[ExperimentResult],
    checks: Vec<PatternCheck>,
) -> Report<AttackData> {
    let mut t = Table::new(
        title,
        &[
            "config",
            "spdm",
            "secret",
            "median",
            "min",
            "max",
            "runs",
            "redos",
            "remote_em",
        ],
    );
    let cells: Vec<AttackCell> = results
        .iter()
        .map(|r| AttackCell {
            config: r.defense.id.short().to_string(),
            spdm: r.defense.spdm.to_string(),
            secret: r.secret as u8,
            median_cycles: r.median_cycles,
            min_cycles: r.per_run.iter().copied().min().unwrap_or(0),
            max_cycles: r.per_run.iter().copied().max().unwrap_or(0),
            runs: r.per_run.len(),
            redo_count: r.redo_count,
            remote_em_count: r.remote_em_count,
            redo_latency: r.redos.first().map(|x| x.latency),
        })
        .collect();
    for c in &cells {
        t.push(vec![
            c.config.clone(),
            c.spdm.clone(),
            c.secret.to_string(),
            c.median_cycles.to_string(),
            c.min_cycles.to_string(),
            c.max_cycles.to_string(),
            c.runs.to_string(),
            c.redo_count.to_string(),
            c.remote_em_count.to_string(),
        ]);
    }
    for ch in &checks {
        t.notes.push(format!(
            "{} {} {}: {} (secret0 {}, secret1 {})",
            pass_fail(ch.pass),
            ch.defense.id,
            ch.defense.spdm,
            ch.expectation,
            ch.secret0,
            ch.secret1
        ));
    }
    let pass = checks.iter().all(|c| c.pass);
    Report {
        experiment: experiment.into(),
        pass,
        table: t,
        data: AttackData { cells, checks },
    }
}

pub fn property_report(reports: Vec<PropertyReport>) -> Report<Vec<PropertyReport>> {
    let mut t = Table::new(
        "receiver total per transmitter subset",
        &["config", "n", "subset", "total", "per_access"],
    );
    for r in &reports {
        for row in &r.rows {
            t.push(vec![
                r.config.clone(),
                r.n.to_string(),
                format!("{:0width$b}", row.subset, width = r.n),
                row.total.to_string(),
                row.per_access
                    .iter()
                    .map(u64::to_string)
                    .collect::<Vec<_>>()
                    .join(";"),
            ]);
        }
        let expected = match (r.expected_per_access, r.expected_total) {
            (Some(e), Some(total)) => {
                format!("expected {} x ({e} + {}) = {total}", r.n, r.overhead)
            }
            _ => "no analytic value".to_string(),
        };
        let verdict = if r.constant {
            format!("constant = {}", r.rows[0].total)
        } else {
            let lo = r.rows.iter().map(|x| x.total).min().unwrap_or(0);
            let hi = r.rows.iter().map(|x| x.total).max().unwrap_or(0);
            format!("not constant, totals {lo}..{hi}")
        };
        t.notes.push(format!(
            "{} {}: {verdict}; {expected}",
            pass_fail(r.pass),
            r.config
        ));
    }
    Report {
        experiment: "property".into(),
        pass: reports.iter().all(|r| r.pass),
        table: t,
        data: reports,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CovertRow {
    pub config: String,
    #[serde(flatten)]
    pub run: ChannelRun,
}

pub fn covert_report(rows: Vec<CovertRow>) -> Report<Vec<CovertRow>> {
    let mut t = Table::new(
        "covert channel",
        &[
            "config",
            "bits",
            "cal0",
            "cal1",
            "threshold",
            "closed",
            "errors",
            "error_rate",
        ],
    );
    for r in &rows {
        let (c0, c1) = r.run.calibration.unwrap_or((0, 0));
        t.push(vec![
            r.config.clone(),
            r.run.payload.len().to_string(),
            c0.to_string(),
            c1.to_string(),
            r.run.threshold.map_or("-".into(), |x| format!("{x:.1}")),
            yes_no(r.run.closed),
            r.run.mismatches().to_string(),
            format!("{:.4}", r.run.error_rate),
        ]);
    }
    Report {
        experiment: "covert".into(),
        pass: true,
        table: t,
        data: rows,
    }
}

pub fn trace_report(
    stats: Vec<TraceStats>,
    notes: Vec<String>,
    pass: bool,
) -> Report<Vec<TraceStats>> {
    let mut t = Table::new(
        "trace workload",
        &[
            "config",
            "accesses",
            "llc",
            "llc_frac",
            "redos",
            "redo_frac",
            "upgrades",
            "upgrade_frac",
            "torc_cycles",
            "redo_cycles",
            "total_cycles",
            "overhead_ratio",
        ],
    );
    for s in &stats {
        t.push(vec![
            s.config.clone(),
            s.demand_accesses.to_string(),
            s.llc_accesses.to_string(),
            format!("{:.4}", s.llc_fraction),
            s.redos.to_string(),
            format!("{:.4}", s.redo_fraction),
            s.upgrades.to_string(),
            format!("{:.4}", s.upgrade_fraction),
            s.torc_delay_cycles.to_string(),
            s.redo_cycles.to_string(),
            s.total_cycles.to_string(),
            format!("{:.4}", s.overhead_ratio),
        ]);
    }
    t.notes = notes;
    Report {
        experiment: "trace".into(),
        pass,
        table: t,
        data: stats,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_table_aligns_columns() {
        let mut t = Table::new("", &["a", "long"]);
        t.push(vec!["xyz".into(), "1".into()]);
        assert_eq!(t.to_text(), "a    long\n---  ----\nxyz  1\n");
    }

    #[test]
    fn csv_quotes_when_needed() {
        let mut t = Table::new("x", &["k", "v"]);
        t.push(vec!["a,b".into(), "2".into()]);
        assert_eq!(t.to_csv(), "k,v\n\"a,b\",2\n");
    }
}
