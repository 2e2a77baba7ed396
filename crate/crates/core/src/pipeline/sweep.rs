use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use super::eval::write_new;
use super::{evaluate_accuracy, run_strategy, InferSetup, RunConfig, Strategy};
use crate::error::{Error, Result};
use crate::graph::{SplitSpec, TagGraph};
use crate::scorer::ScoringContext;
use crate::trainer::{self, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Beta,
    KIcl,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepAxis::Beta),
            "k_icl" | "k-icl" => Ok(SweepAxis::KIcl),
            _ => Err(Error::InvalidArgument(format!("unknown sweep axis {s:?} (beta or k_icl)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

/// One askgnn train+infer per beta value, or one training run shared by
/// every k_icl value. A failing value is recorded and the sweep goes on.
/// All runs share the scoring context's cache.
pub fn run_sweep(
    graph: &TagGraph,
    split: &SplitSpec,
    ctx: &ScoringContext<'_>,
    setup: &InferSetup<'_>,
    config: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Empty("sweep values"));
    }
    let eval = |model: &TrainedModel, k_icl: usize| -> Result<f64> {
        let s = InferSetup { k_icl, ..*setup };
        let rows = run_strategy(&s, Strategy::AskGnn, Some(model))?;
        Ok(evaluate_accuracy(&rows, "")?.accuracy)
    };
    let final_loss = |m: &TrainedModel| m.log.last().map(|r| r.loss_total);
    let row = |value: f64, r: Result<(f64, Option<f64>)>| match r {
        Ok((accuracy, loss)) => SweepRow {
            value,
            accuracy: Some(accuracy),
            final_loss: loss,
            error: None,
        },
        Err(e) => {
            log::warn!("sweep value {value}: {e}");
            SweepRow {
                value,
                accuracy: None,
                final_loss: None,
                error: Some(e.to_string()),
            }
        }
    };
    Ok(match axis {
        SweepAxis::Beta => values
            .iter()
            .map(|&beta| {
                let mut cfg = config.train.clone();
                cfg.beta = beta;
                let r = trainer::train(graph, split, ctx, &cfg)
                    .and_then(|m| Ok((eval(&m, setup.k_icl)?, final_loss(&m))));
                row(beta, r)
            })
            .collect(),
        SweepAxis::KIcl => {
            let model = trainer::train(graph, split, ctx, &config.train)?;
            values
                .iter()
                .map(|&k| {
                    let r = if k >= 0.0 && k.fract() == 0.0 {
                        eval(&model, k as usize).map(|a| (a, final_loss(&model)))
                    } else {
                        Err(Error::InvalidArgument(format!("k_icl must be a whole number, got {k}")))
                    };
                    row(k, r)
                })
                .collect()
        }
    })
}

/// Writes `<base>.csv` in `dir` without touching existing files.
pub fn write_sweep_csv(rows: &[SweepRow], dir: &Path, base: &str) -> Result<PathBuf> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_new(dir, base, "csv", &bytes)
}
