//! Dual-emitted reports: a human-readable text file with aligned tables and
//! a machine-readable tab-separated file with a header row. Every report
//! embeds the fully resolved run config and seed, and all files are written
//! atomically (temp file + rename).

use crate::error::Result;
use crate::train::atomic_write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(headers: Vec<S>) -> Self {
        Self {
            headers: headers.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row<S: Into<String>>(&mut self, cells: Vec<S>) {
        let cells: Vec<String> = cells.into_iter().map(Into::into).collect();
        assert_eq!(cells.len(), self.headers.len(), "row width mismatch");
        self.rows.push(cells);
    }

    /// Space-aligned rendering for the human report.
    pub fn render(&self) -> String {
        let cols = self.headers.len();
        let mut width = vec![0usize; cols];
        for (i, h) in self.headers.iter().enumerate() {
            width[i] = h.len();
        }
        for row in &self.rows {
            for (i, c) in row.iter().enumerate() {
                width[i] = width[i].max(c.len());
            }
        }
        let fmt_line = |cells: &[String]| {
            let mut line = String::new();
            for (i, c) in cells.iter().enumerate() {
                if i > 0 {
                    line.push_str("  ");
                }
                line.push_str(c);
                if i + 1 < cols {
                    for _ in c.len()..width[i] {
                        line.push(' ');
                    }
                }
            }
            line.push('\n');
            line
        };
        let mut out = fmt_line(&self.headers);
        let total: usize = width.iter().sum::<usize>() + 2 * (cols - 1);
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&fmt_line(row));
        }
        out
    }

    /// Tab-separated rendering with a header row for the machine report.
    pub fn to_tsv(&self) -> String {
        let mut out = self.headers.join("\t");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }
}

/// Human report: title, the resolved config, then named sections.
pub fn human_report(title: &str, config_toml: &str, sections: &[(&str, String)]) -> String {
    let mut out = format!("{title}\n{}\n\n", "=".repeat(title.len()));
    out.push_str("## config\n\n");
    out.push_str(config_toml);
    for (heading, body) in sections {
        out.push_str(&format!("\n## {heading}\n\n"));
        out.push_str(body);
    }
    out
}

/// Machine report: the config as `#`-prefixed comment lines, then the table.
pub fn machine_report(config_toml: &str, table: &Table) -> String {
    let mut out = String::new();
    for line in config_toml.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(&table.to_tsv());
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

/// Writes `<stem>.txt` (human) and `<stem>.tsv` (machine) under `dir`.
pub fn write_report_pair(
    dir: &Path,
    stem: &str,
    human: &str,
    machine: &str,
) -> Result<(PathBuf, PathBuf)> {
    let txt = dir.join(format!("{stem}.txt"));
    let tsv = dir.join(format!("{stem}.tsv"));
    write_text(&txt, human)?;
    write_text(&tsv, machine)?;
    Ok((txt, tsv))
}

/// Full-precision float formatting for machine rows, so identical runs
/// produce bit-identical files.
pub fn full(v: f64) -> String {
    format!("{v:.17e}")
}
