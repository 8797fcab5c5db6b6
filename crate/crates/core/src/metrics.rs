//! Append-only metrics CSV. The file opens with the run configuration as
//! `#` comment lines, then a header row; every record carries the config hash.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub struct MetricsWriter {
    out: BufWriter<File>,
    hash: String,
    columns: Vec<String>,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: &Path, cfg: &RunConfig, columns: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut out = BufWriter::new(File::create(path)?);
        for line in cfg.to_text().lines() {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "config_hash,step,{}", columns.join(","))?;
        out.flush()?;
        Ok(MetricsWriter { out, hash: cfg.hash(), columns: columns.iter().map(|s| s.to_string()).collect(), last_step: None })
    }

    /// Writes one record; columns absent from `values` stay empty. Steps must
    /// not decrease.
    pub fn record(&mut self, step: u64, values: &[(&str, f64)]) -> Result<()> {
        if self.last_step.is_some_and(|s| step < s) {
            return Err(Error::Config(format!("metrics step {step} after {}", self.last_step.unwrap())));
        }
        if let Some((k, _)) = values.iter().find(|(k, _)| !self.columns.iter().any(|c| c == k)) {
            return Err(Error::Config(format!("unknown metrics column `{k}`")));
        }
        self.last_step = Some(step);
        let cells: Vec<String> =
            self.columns.iter().map(|c| values.iter().find(|(k, _)| k == c).map_or(String::new(), |(_, v)| v.to_string())).collect();
        writeln!(self.out, "{},{step},{}", self.hash, cells.join(","))?;
        self.out.flush()?;
        Ok(())
    }
}

/// Parsed metrics file: column names and rows of optional values.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub config: String,
    pub columns: Vec<String>,
    pub hashes: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl MetricsTable {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = String::new();
        let mut lines = text.lines();
        let header = loop {
            match lines.next() {
                Some(l) if l.starts_with('#') => {
                    config.push_str(l.trim_start_matches('#').trim_start());
                    config.push('\n');
                }
                Some(l) => break l,
                None => return Err(Error::Config("metrics file has no header".into())),
            }
        };
        let columns: Vec<String> = header.split(',').skip(1).map(String::from).collect();
        let (mut hashes, mut rows) = (vec![], vec![]);
        for l in lines.filter(|l| !l.is_empty()) {
            let mut f = l.split(',');
            hashes.push(f.next().unwrap_or_default().to_string());
            rows.push(f.map(|v| v.parse().ok()).collect());
        }
        Ok(MetricsTable { config, columns, hashes, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r.get(i).copied().flatten()).collect())
    }
}
