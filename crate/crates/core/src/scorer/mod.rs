//! LLM feedback: per-class perplexity, utility scores and candidate ranking
//! behind a pluggable [`Scorer`].

mod cache;
mod http;
mod oracle;
pub mod stub;

pub use cache::{CacheKey, ScoreCache};
pub use http::HttpScorer;
pub use oracle::{OracleParams, SyntheticOracle};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, ScorerError};
use crate::graph::TagGraph;
use crate::prompt::{render, verbalize, IclExample, PromptTemplate, RenderOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Http,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerSpec {
    pub kind: ScorerKind,
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_parallel: usize,
    pub retries: u32,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
    pub oracle: OracleParams,
}

impl Default for ScorerSpec {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Oracle,
            endpoint: String::new(),
            model: String::new(),
            timeout_secs: 60.0,
            max_parallel: 8,
            retries: 3,
            backoff_ms: 250,
            oracle: OracleParams::default(),
        }
    }
}

impl ScorerSpec {
    pub fn oracle(params: OracleParams) -> Self {
        Self {
            kind: ScorerKind::Oracle,
            oracle: params,
            ..Default::default()
        }
    }

    pub fn http(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            kind: ScorerKind::Http,
            endpoint: endpoint.into(),
            model: model.into(),
            ..Default::default()
        }
    }

    /// Stable digest of kind, endpoint and model. For the oracle the
    /// formula parameters stand in for the model name.
    pub fn scorer_id(&self) -> String {
        let model = match self.kind {
            ScorerKind::Http => self.model.clone(),
            ScorerKind::Oracle => format!("{}{}", self.model, self.oracle.describe()),
        };
        let kind = match self.kind {
            ScorerKind::Http => "http",
            ScorerKind::Oracle => "oracle",
        };
        let mut h = Sha256::new();
        h.update(format!("{kind}|{}|{model}", self.endpoint));
        hex::encode(h.finalize())
    }

    /// Builds the scorer this spec describes. The oracle reads ground truth
    /// from `graph`.
    pub fn build(&self, graph: &TagGraph) -> Result<Arc<dyn Scorer>> {
        Ok(match self.kind {
            ScorerKind::Http => Arc::new(HttpScorer::new(self)?),
            ScorerKind::Oracle => Arc::new(SyntheticOracle::new(graph, self)?),
        })
    }
}

/// One continuation to score: `continuation` follows `prompt`, which was
/// rendered from `query` and `example`.
#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    pub query: usize,
    pub example: Option<IclExample>,
    pub class: usize,
    pub prompt: &'a str,
    pub continuation: &'a str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionTask {
    Classify,
    /// Pick up to `budget` of the listed examples by number.
    Select { budget: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub query: usize,
    pub examples: &'a [IclExample],
    pub prompt: &'a str,
    pub task: CompletionTask,
}

pub const CLASSIFY_MAX_TOKENS: u32 = 16;
pub const SELECT_MAX_TOKENS: u32 = 64;

pub trait Scorer: Send + Sync {
    fn scorer_id(&self) -> &str;
    /// Log-probability of each continuation token given everything before it.
    fn token_logprobs(&self, req: &ScoreRequest<'_>) -> Result<Vec<f64>, ScorerError>;
    /// Greedy completion of `req.prompt`.
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, ScorerError>;
    /// Requests issued so far (cache hits never reach the scorer).
    fn call_count(&self) -> u64;
    fn max_parallel(&self) -> usize;
}

/// `exp(-mean(logprobs))`.
pub fn ppl(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::Empty("log-probabilities"));
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok((-mean).exp())
}

/// Normalized inverse perplexity of `gold` among all classes.
pub fn utility(ppl_by_class: &[f64], gold: usize) -> Result<f64> {
    if gold >= ppl_by_class.len() {
        return Err(Error::IndexOutOfRange {
            index: gold,
            len: ppl_by_class.len(),
        });
    }
    if let Some(p) = ppl_by_class.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::InvalidArgument(format!("perplexity must be finite and positive, got {p}")));
    }
    let total: f64 = ppl_by_class.iter().map(|p| 1.0 / p).sum();
    Ok((1.0 / ppl_by_class[gold]) / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub query_id: usize,
    pub example_id: usize,
    pub ppl: Vec<f64>,
    pub utility: f64,
    pub scorer_id: String,
    pub template_hash: String,
}

/// A query's scored candidates, best utility first (ties by example id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSet {
    pub query_id: usize,
    pub records: Vec<FeedbackRecord>,
}

impl RankedSet {
    pub fn new(query_id: usize, mut records: Vec<FeedbackRecord>) -> Self {
        records.sort_by(|a, b| b.utility.total_cmp(&a.utility).then(a.example_id.cmp(&b.example_id)));
        Self { query_id, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn example_ids(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.example_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairFailure {
    pub query_id: usize,
    pub example_id: usize,
    pub error: ScorerError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankOutcome {
    pub ranked: RankedSet,
    pub failures: Vec<PairFailure>,
}

/// Everything needed to turn (query, example) pairs into feedback.
pub struct ScoringContext<'a> {
    pub graph: &'a TagGraph,
    pub scorer: &'a dyn Scorer,
    pub template: &'a PromptTemplate,
    pub cache: &'a ScoreCache,
    pub render: RenderOptions,
    pool: rayon::ThreadPool,
}

impl<'a> ScoringContext<'a> {
    /// `single_thread` forces serial scorer calls.
    pub fn new(
        graph: &'a TagGraph,
        scorer: &'a dyn Scorer,
        template: &'a PromptTemplate,
        cache: &'a ScoreCache,
        single_thread: bool,
    ) -> Result<Self> {
        let threads = if single_thread { 1 } else { scorer.max_parallel().max(1) };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start scorer pool: {e}")))?;
        Ok(Self {
            graph,
            scorer,
            template,
            cache,
            render: RenderOptions::default(),
            pool,
        })
    }

    fn key(&self, query: usize, example: usize, class: usize) -> CacheKey {
        let ids = self.graph.node_ids();
        CacheKey::new(self.scorer.scorer_id(), self.template.hash(), ids[query], ids[example], class)
    }

    /// The single-example feedback prompt for `(query, example)`.
    pub fn feedback_prompt(&self, query: usize, example: usize) -> Result<String> {
        let label = self
            .graph
            .label(example)
            .ok_or_else(|| Error::InvalidArgument(format!("example node {example} has no label")))?;
        let shown = [(self.graph.text(example), self.graph.label_vocab()[label].as_str())];
        Ok(render(self.template, &shown, self.graph.text(query), &self.render).text)
    }

    fn score_class(&self, query: usize, example: usize, class: usize, prompt: &str) -> Result<f64> {
        let key = self.key(query, example, class);
        if let Some(v) = self.cache.get(&key) {
            return Ok(v);
        }
        let label = self.graph.label(example).expect("checked by feedback_prompt");
        let continuation = verbalize(&self.graph.label_vocab()[class]);
        let lp = self.scorer.token_logprobs(&ScoreRequest {
            query,
            example: Some(IclExample { node: example, label }),
            class,
            prompt,
            continuation: &continuation,
        })?;
        if lp.is_empty() {
            return Err(ScorerError::EmptyContinuation.into());
        }
        let p = ppl(&lp)?;
        self.cache.insert(&key, p)?;
        Ok(p)
    }

    /// Per-class perplexities for each pair; missing cache entries go to
    /// the scorer, at most `max_parallel` at a time. Output order follows
    /// `pairs`.
    pub fn score_pairs(&self, pairs: &[(usize, usize)]) -> Vec<Result<Vec<f64>>> {
        use rayon::prelude::*;
        let n_classes = self.graph.n_classes();
        let prompts: Vec<Result<String>> = pairs.iter().map(|&(q, e)| self.feedback_prompt(q, e)).collect();
        let jobs: Vec<(usize, usize)> = (0..pairs.len())
            .filter(|&i| prompts[i].is_ok())
            .flat_map(|i| (0..n_classes).map(move |c| (i, c)))
            .collect();
        let values: Vec<Result<f64>> = self.pool.install(|| {
            jobs.par_iter()
                .map(|&(i, c)| {
                    let (q, e) = pairs[i];
                    self.score_class(q, e, c, prompts[i].as_ref().expect("filtered"))
                })
                .collect()
        });
        let mut values = values.into_iter();
        prompts
            .into_iter()
            .map(|prompt| {
                prompt?;
                let mut row = Vec::with_capacity(n_classes);
                let mut first_err = None;
                for v in values.by_ref().take(n_classes) {
                    match v {
                        Ok(p) => row.push(p),
                        Err(e) => {
                            first_err.get_or_insert(e);
                        }
                    }
                }
                match first_err {
                    Some(e) => Err(e),
                    None => Ok(row),
                }
            })
            .collect()
    }

    /// Ranks each query's candidates by utility. Failed pairs are reported,
    /// not imputed.
    pub fn rank_many(&self, queries: &[(usize, Vec<usize>)]) -> Result<Vec<RankOutcome>> {
        let pairs: Vec<(usize, usize)> = queries
            .iter()
            .flat_map(|(q, cands)| cands.iter().map(move |&e| (*q, e)))
            .collect();
        let mut scored = self.score_pairs(&pairs).into_iter();
        let mut out = Vec::with_capacity(queries.len());
        for (q, cands) in queries {
            let gold = self
                .graph
                .label(*q)
                .ok_or_else(|| Error::InvalidArgument(format!("query node {q} has no gold label")))?;
            let mut records = Vec::new();
            let mut failures = Vec::new();
            for &e in cands {
                match scored.next().expect("one result per pair") {
                    Ok(ppl) => records.push(FeedbackRecord {
                        query_id: *q,
                        example_id: e,
                        utility: utility(&ppl, gold)?,
                        ppl,
                        scorer_id: self.scorer.scorer_id().to_string(),
                        template_hash: self.template.hash().to_string(),
                    }),
                    Err(Error::Scorer(error)) => failures.push(PairFailure {
                        query_id: *q,
                        example_id: e,
                        error,
                    }),
                    Err(other) => return Err(other),
                }
            }
            out.push(RankOutcome {
                ranked: RankedSet::new(*q, records),
                failures,
            });
        }
        Ok(out)
    }

    pub fn rank_candidates(&self, query: usize, candidates: &[usize]) -> Result<RankOutcome> {
        if candidates.is_empty() {
            return Err(Error::Empty("candidate set"));
        }
        Ok(self.rank_many(&[(query, candidates.to_vec())])?.remove(0))
    }
}
