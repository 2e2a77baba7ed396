//! Deterministic stand-in for a language model.
//!
//! Given a query with true class `y*` and a shown example `e` (with the
//! label displayed in the prompt), the help of `e` is
//! `h = [shown label = y*] * max(0, cos(f_q, f_e))^gamma` on raw features.
//! The per-class negative log-likelihood is
//! `NLL(c) = base + alpha * [c != y*] * h`, so helpful examples make the
//! true class more likely relative to the rest, and an unhelpful one leaves
//! all classes tied. With several examples the largest help counts.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, CompletionTask, ScoreRequest, Scorer, ScorerSpec};
use crate::error::{Error, Result, ScorerError};
use crate::graph::TagGraph;
use crate::prompt::IclExample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleParams {
    pub alpha: f64,
    pub base: f64,
    pub gamma: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            base: 0.1,
            gamma: 1.0,
        }
    }
}

impl OracleParams {
    pub(crate) fn describe(&self) -> String {
        format!("(alpha={:?},base={:?},gamma={:?})", self.alpha, self.base, self.gamma)
    }
}

pub struct SyntheticOracle {
    id: String,
    params: OracleParams,
    dim: usize,
    features: Vec<f64>,
    labels: Vec<Option<usize>>,
    vocab: Vec<String>,
    max_parallel: usize,
    calls: AtomicU64,
}

impl SyntheticOracle {
    pub fn new(graph: &TagGraph, spec: &ScorerSpec) -> Result<Self> {
        let p = spec.oracle;
        if !(p.alpha.is_finite() && p.base.is_finite() && p.gamma.is_finite() && p.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("bad oracle parameters {}", p.describe())));
        }
        let f = graph.features();
        let dim = f.cols();
        let mut features = Vec::with_capacity(f.rows() * dim);
        for r in 0..f.rows() {
            let row = f.row(r);
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            features.extend(row.iter().map(|&v| if norm > 0.0 { v as f64 / norm } else { 0.0 }));
        }
        Ok(Self {
            id: spec.scorer_id(),
            params: p,
            dim,
            features,
            labels: graph.labels().to_vec(),
            vocab: graph.label_vocab().to_vec(),
            max_parallel: spec.max_parallel,
            calls: AtomicU64::new(0),
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    fn check(&self, node: usize) -> Result<(), ScorerError> {
        if node < self.labels.len() {
            Ok(())
        } else {
            Err(ScorerError::BadResponse(format!("node {node} is not in the graph")))
        }
    }

    /// Help of showing `example` to `query`; 0 when the query's class is unknown.
    pub fn help(&self, query: usize, example: IclExample) -> f64 {
        match self.labels[query] {
            Some(y) if y == example.label => {
                let cos: f64 = self.row(query).iter().zip(self.row(example.node)).map(|(a, b)| a * b).sum();
                cos.clamp(0.0, 1.0).powf(self.params.gamma)
            }
            _ => 0.0,
        }
    }

    pub fn nll(&self, query: usize, examples: &[IclExample], class: usize) -> f64 {
        let h = examples.iter().map(|&e| self.help(query, e)).fold(0.0, f64::max);
        let wrong = self.labels[query].is_some_and(|y| y != class);
        self.params.base + if wrong { self.params.alpha * h } else { 0.0 }
    }

    /// Class with the lowest NLL; ties go to the lowest class index.
    pub fn answer(&self, query: usize, examples: &[IclExample]) -> usize {
        let mut best = 0;
        let mut best_nll = f64::INFINITY;
        for c in 0..self.vocab.len() {
            let v = self.nll(query, examples, c);
            if v < best_nll {
                best = c;
                best_nll = v;
            }
        }
        best
    }
}

impl Scorer for SyntheticOracle {
    fn scorer_id(&self) -> &str {
        &self.id
    }

    fn token_logprobs(&self, req: &ScoreRequest<'_>) -> Result<Vec<f64>, ScorerError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if req.continuation.is_empty() {
            return Err(ScorerError::EmptyContinuation);
        }
        self.check(req.query)?;
        if req.class >= self.vocab.len() {
            return Err(ScorerError::BadResponse(format!("class {} out of range", req.class)));
        }
        let examples: Vec<IclExample> = req.example.into_iter().collect();
        for e in &examples {
            self.check(e.node)?;
        }
        Ok(vec![-self.nll(req.query, &examples, req.class)])
    }

    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, ScorerError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.check(req.query)?;
        for e in req.examples {
            self.check(e.node)?;
        }
        match req.task {
            CompletionTask::Classify => Ok(self.vocab[self.answer(req.query, req.examples)].clone()),
            CompletionTask::Select { budget } => {
                let mut order: Vec<(usize, f64)> = req
                    .examples
                    .iter()
                    .enumerate()
                    .map(|(i, &e)| (i, self.help(req.query, e)))
                    .collect();
                order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let picks: Vec<String> = order.iter().take(budget).map(|(i, _)| (i + 1).to_string()).collect();
                Ok(picks.join(", "))
            }
        }
    }

    fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn max_parallel(&self) -> usize {
        self.max_parallel
    }
}
