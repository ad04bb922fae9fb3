//! Metric streams and tables: line-delimited JSON records, CSV for
//! plotting, aligned text for people.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use onellm_core::pipeline::StepRecord;
use serde::Serialize;

use crate::binio::write_atomic;
use crate::{Error, Result};

/// Per-step records of one stage: `<name>.jsonl` plus `<name>.csv` with
/// one row per (step, modality).
pub struct StepLog {
    label: String,
    jsonl: (PathBuf, BufWriter<File>),
    csv: (PathBuf, BufWriter<File>),
    error: Option<Error>,
}

#[derive(Serialize)]
struct Line<'a> {
    stage: &'a str,
    #[serde(flatten)]
    record: &'a StepRecord,
}

fn create(path: PathBuf) -> Result<(PathBuf, BufWriter<File>)> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok((path, BufWriter::new(f)))
}

impl StepLog {
    pub fn create(dir: &Path, name: &str, label: &str) -> Result<Self> {
        let jsonl = create(dir.join(format!("{name}.jsonl")))?;
        let mut csv = create(dir.join(format!("{name}.csv")))?;
        writeln!(csv.1, "stage,phase,step,modality,loss,lr,grad_norm").map_err(|e| Error::io(&csv.0, e))?;
        Ok(Self {
            label: label.to_string(),
            jsonl,
            csv,
            error: None,
        })
    }

    /// Appends one step. The first write failure is kept and reported by
    /// [`StepLog::finish`] so training is not interrupted mid-step.
    pub fn record(&mut self, r: &StepRecord) {
        if self.error.is_some() {
            return;
        }
        if let Err(e) = self.write(r) {
            self.error = Some(e);
        }
    }

    fn write(&mut self, r: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(&Line {
            stage: &self.label,
            record: r,
        })
        .expect("step record serialises");
        writeln!(self.jsonl.1, "{line}").map_err(|e| Error::io(&self.jsonl.0, e))?;
        for (m, loss) in &r.modality_losses {
            writeln!(
                self.csv.1,
                "{},{},{},{m},{loss},{},{}",
                self.label, r.phase, r.step, r.lr, r.grad_norm
            )
            .map_err(|e| Error::io(&self.csv.0, e))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.jsonl.1.flush().map_err(|e| Error::io(&self.jsonl.0, e))?;
        self.csv.1.flush().map_err(|e| Error::io(&self.csv.0, e))
    }
}

/// A titled grid of cells, rendered as aligned text or CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub title: String,
    /// Lines printed between the title and the grid.
    pub notes: Vec<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: impl Into<String>, header: &[&str]) -> Self {
        Self {
            title: title.into(),
            notes: Vec::new(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn note(&mut self, line: impl Into<String>) {
        self.notes.push(line.into());
    }

    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        for n in &self.notes {
            let _ = writeln!(out, "{n}");
        }
        let line = |out: &mut String, cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &self.header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        let _ = writeln!(out, "{}", rule.join("  "));
        for r in &self.rows {
            line(&mut out, r);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let esc = |c: &String| {
            if c.contains([',', '"', '\n']) {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.clone()
            }
        };
        let mut out = String::new();
        for r in std::iter::once(&self.header).chain(&self.rows) {
            let _ = writeln!(out, "{}", r.iter().map(esc).collect::<Vec<_>>().join(","));
        }
        out
    }

    /// Writes `<stem>.txt` and `<stem>.csv`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomic(&dir.join(format!("{stem}.txt")), self.render().as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())
    }
}

/// Fixed-precision cell; `-` when absent.
pub fn cell(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(v) => format!("{v:.digits$}"),
        None => "-".into(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report serialises");
    s.push('\n');
    write_atomic(path, s.as_bytes())
}
