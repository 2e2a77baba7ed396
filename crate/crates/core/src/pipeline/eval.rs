use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunManifest;
use crate::error::{Error, Result};

/// One test query's outcome. `predicted` is `None` when the answer could
/// not be parsed or the request failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRow {
    pub query_id: i64,
    pub gold: String,
    pub predicted: Option<String>,
    pub strategy: String,
    pub n_icl: usize,
    pub parsed: bool,
    pub reason: Option<String>,
}

impl EvalRow {
    pub fn is_correct(&self) -> bool {
        self.predicted.as_deref() == Some(self.gold.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Correct over all rows; unparsed rows count as wrong.
    pub accuracy: f64,
    pub n: usize,
    pub correct: usize,
    pub unparsed: usize,
    pub strategy: String,
    pub manifest_hash: String,
    /// gold label -> predicted label (or "<unparsed>") -> count.
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
}

pub const UNPARSED: &str = "<unparsed>";

pub fn evaluate_accuracy(rows: &[EvalRow], manifest_hash: &str) -> Result<EvalSummary> {
    if rows.is_empty() {
        return Err(Error::Empty("evaluation rows"));
    }
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut correct = 0;
    let mut unparsed = 0;
    for r in rows {
        correct += usize::from(r.is_correct());
        unparsed += usize::from(r.predicted.is_none());
        let pred = r.predicted.clone().unwrap_or_else(|| UNPARSED.to_string());
        *confusion.entry(r.gold.clone()).or_default().entry(pred).or_default() += 1;
    }
    let mut strategies: Vec<&str> = rows.iter().map(|r| r.strategy.as_str()).collect();
    strategies.sort_unstable();
    strategies.dedup();
    Ok(EvalSummary {
        accuracy: correct as f64 / rows.len() as f64,
        n: rows.len(),
        correct,
        unparsed,
        strategy: strategies.join("+"),
        manifest_hash: manifest_hash.to_string(),
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportPaths {
    pub manifest: PathBuf,
    pub rows: PathBuf,
    pub summary: PathBuf,
}

fn rows_csv(rows: &[EvalRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))
}

/// Writes `bytes` to `base.ext` unless a file with other content is there,
/// in which case the next free `base.N.ext` is used. Existing files are
/// never modified.
pub(crate) fn write_new(dir: &Path, base: &str, ext: &str, bytes: &[u8]) -> Result<PathBuf> {
    for n in 0.. {
        let name = if n == 0 { format!("{base}.{ext}") } else { format!("{base}.{n}.{ext}") };
        let path = dir.join(name);
        match fs::read(&path) {
            Ok(existing) if existing == bytes => return Ok(path),
            Ok(_) => continue,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
                return Ok(path);
            }
            Err(e) => return Err(Error::io(&path, e)),
        }
    }
    unreachable!("unbounded search ends")
}

/// Writes `<strategy>-<hash>.csv`, its `.summary.json` and the manifest.
pub fn write_report(dir: &Path, manifest: &RunManifest, rows: &[EvalRow]) -> Result<(ReportPaths, EvalSummary)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = manifest.hash();
    let summary = evaluate_accuracy(rows, &hash)?;
    let short = manifest.short_hash();
    let manifest_path = dir.join(format!("manifest-{short}.json"));
    if !manifest_path.exists() {
        manifest.save(&manifest_path)?;
    }
    let base = format!("{}-{short}", summary.strategy);
    let rows_path = write_new(dir, &base, "csv", &rows_csv(rows)?)?;
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    let summary_path = write_new(dir, &base, "summary.json", &json)?;
    Ok((
        ReportPaths {
            manifest: manifest_path,
            rows: rows_path,
            summary: summary_path,
        },
        summary,
    ))
}

pub fn read_report_rows(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
