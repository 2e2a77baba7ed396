//! End-to-end runs: configuration, manifests, inference strategies,
//! evaluation reports and sweeps.

mod eval;
mod infer;
mod manifest;
mod sweep;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use eval::{evaluate_accuracy, read_report_rows, write_report, EvalRow, EvalSummary, ReportPaths};
pub use infer::{run_strategy, InferSetup, PurifyMode, Strategy};
pub use manifest::{file_hash, RunManifest};
pub use sweep::{run_sweep, write_sweep_csv, SweepAxis, SweepRow};

use crate::error::{Error, Result};
use crate::graph::{load_split_file, sample_label_fraction, SplitSpec, TagGraph};
use crate::prompt::{RenderOptions, DEFAULT_MAX_CHARS_PER_DOC};
use crate::scorer::ScorerSpec;
use crate::trainer::TrainConfig;

/// Everything a run reads from its config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scorer: ScorerSpec,
    /// Built-in template name or a template file path.
    pub template: String,
    pub label_fraction: f64,
    pub split_seed: u64,
    pub k_icl: usize,
    pub purify: PurifyMode,
    pub max_chars_per_doc: usize,
    pub max_prompt_chars: Option<usize>,
    /// Evaluate on an evenly spaced subsample of `n` test nodes.
    pub test_limit: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            scorer: ScorerSpec::default(),
            template: "generic".into(),
            label_fraction: 0.1,
            split_seed: 0,
            k_icl: 30,
            purify: PurifyMode::None,
            max_chars_per_doc: DEFAULT_MAX_CHARS_PER_DOC,
            max_prompt_chars: None,
            test_limit: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::bundle(path, None, e.to_string()))
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            max_chars_per_doc: self.max_chars_per_doc,
            max_prompt_chars: self.max_prompt_chars,
        }
    }

    /// The bundle's `splits.json` when present, otherwise a stratified
    /// sample at `label_fraction`.
    pub fn split(&self, graph: &TagGraph, bundle_dir: Option<&Path>) -> Result<SplitSpec> {
        let from_file = match bundle_dir {
            Some(dir) => load_split_file(dir, graph)?,
            None => None,
        };
        let split = match from_file {
            Some(s) => s,
            None => sample_label_fraction(graph, self.label_fraction, self.split_seed)?,
        };
        Ok(match self.test_limit {
            Some(n) => split.with_test_subsample(n),
            None => split,
        })
    }
}
