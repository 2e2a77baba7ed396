//! Learning to retrieve: the encoder is trained on a mix of a listwise
//! feedback loss (pull high-utility candidates toward the query) and node
//! classification cross-entropy.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EmbeddingTable, EncoderConfig, EncoderInput};
use crate::error::{Error, Result};
use crate::graph::{SplitSpec, TagGraph};
use crate::nn::{AdamConfig, Bindings, ListGroup, ParamSet, Tape, Tensor2, Var};
use crate::retriever::{self, derive_seed};
use crate::scorer::{PairFailure, RankedSet, ScoringContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// The `m` highest-utility candidates are positives.
    TopM,
    /// Every candidate is a positive.
    All,
    /// Every candidate, weighted `1 / log2(rank + 1)`.
    RankDiscount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta: f64,
    pub k_feedback: usize,
    pub tau: f64,
    pub feedback_mode: FeedbackMode,
    pub m: usize,
    pub rounds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Minimum fraction of (query, candidate) pairs that must be scored.
    pub coverage_floor: f64,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.2,
            k_feedback: 20,
            tau: 1.0,
            feedback_mode: FeedbackMode::TopM,
            m: 1,
            rounds: 1,
            epochs: 200,
            lr: 0.01,
            weight_decay: 0.0,
            seed: 0,
            coverage_floor: 0.5,
            n_layers: 3,
            hidden_dim: 256,
            dropout: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} not in [0, 1]", self.beta));
        }
        if self.k_feedback == 0 {
            return bad("k_feedback must be at least 1".into());
        }
        if self.feedback_mode == FeedbackMode::TopM && (self.m == 0 || self.m > self.k_feedback) {
            return bad(format!("m = {} must be in 1..={}", self.m, self.k_feedback));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("temperature {} must be positive", self.tau));
        }
        if !(0.0..=1.0).contains(&self.coverage_floor) {
            return bad(format!("coverage floor {} not in [0, 1]", self.coverage_floor));
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        Ok(())
    }

    pub fn encoder_config(&self, graph: &TagGraph) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.n_layers,
            hidden_dim: self.hidden_dim,
            dropout: self.dropout,
            epochs: self.epochs,
            input_dim: graph.feature_dim(),
            n_classes: graph.n_classes(),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Ranked feedback for one round, keyed by query node.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSet {
    pub round: usize,
    pub ranked: BTreeMap<usize, RankedSet>,
    pub scored_pairs: usize,
    pub unscored_pairs: usize,
    pub failures: Vec<PairFailure>,
}

impl FeedbackSet {
    pub fn coverage(&self) -> f64 {
        let total = self.scored_pairs + self.unscored_pairs;
        if total == 0 {
            1.0
        } else {
            self.scored_pairs as f64 / total as f64
        }
    }

    /// Mean over queries of the mean candidate utility.
    pub fn mean_utility(&self) -> f64 {
        let per_query: Vec<f64> = self
            .ranked
            .values()
            .filter(|r| !r.is_empty())
            .map(|r| r.records.iter().map(|x| x.utility).sum::<f64>() / r.len() as f64)
            .collect();
        if per_query.is_empty() {
            0.0
        } else {
            per_query.iter().sum::<f64>() / per_query.len() as f64
        }
    }
}

#[derive(Serialize)]
struct FeedbackLine<'a> {
    round: usize,
    query: i64,
    example: i64,
    rank: usize,
    utility: f64,
    ppl: &'a [f64],
}

impl FeedbackSet {
    /// One JSON line per scored pair, with external node ids.
    pub fn write_jsonl(&self, graph: &TagGraph, path: &Path) -> Result<()> {
        let ids = graph.node_ids();
        let mut out = Vec::new();
        for (q, ranked) in &self.ranked {
            for (rank, r) in ranked.records.iter().enumerate() {
                let line = FeedbackLine {
                    round: self.round,
                    query: ids[*q],
                    example: ids[r.example_id],
                    rank,
                    utility: r.utility,
                    ppl: &r.ppl,
                };
                serde_json::to_writer(&mut out, &line)?;
                out.push(b'\n');
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// `(candidate offset, weight)` positives for a ranked candidate list.
pub fn positives(mode: FeedbackMode, m: usize, n_candidates: usize) -> Vec<(usize, f64)> {
    match mode {
        FeedbackMode::TopM => (0..m.min(n_candidates)).map(|i| (i, 1.0)).collect(),
        FeedbackMode::All => (0..n_candidates).map(|i| (i, 1.0)).collect(),
        FeedbackMode::RankDiscount => (0..n_candidates).map(|i| (i, 1.0 / ((i + 2) as f64).log2())).collect(),
    }
}

/// Listwise feedback loss from explicit similarity rows (one per query)
/// and positives per row.
pub fn feedback_loss(sims: &[Vec<f64>], positives: &[Vec<(usize, f64)>], tau: f64) -> Result<f64> {
    if sims.len() != positives.len() {
        return Err(Error::shape("feedback_loss", "one positive list per query"));
    }
    let mut column = Vec::new();
    let mut groups = Vec::new();
    for (row, pos) in sims.iter().zip(positives) {
        if row.is_empty() {
            continue;
        }
        groups.push(ListGroup {
            start: column.len(),
            len: row.len(),
            positives: pos.clone(),
        });
        column.extend_from_slice(row);
    }
    if groups.is_empty() {
        return Err(Error::Empty("candidate sets"));
    }
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor2::from_vec(column.len(), 1, column)?)?;
    let l = tape.listwise_nll(s, &groups, tau)?;
    Ok(tape.value(l).item())
}

pub fn combined_loss(lf: f64, lc: f64, beta: f64) -> f64 {
    beta * lf + (1.0 - beta) * lc
}

/// Mean cross-entropy of the classification head over `labeled_ids`.
pub fn clf_loss(graph: &TagGraph, embeddings: &EmbeddingTable, params: &ParamSet, labeled_ids: &[usize]) -> Result<f64> {
    if labeled_ids.is_empty() {
        return Err(Error::Empty("labeled set"));
    }
    let targets = label_targets(graph, labeled_ids)?;
    let logits = encoder::classify_logits(embeddings, params)?;
    let mut rows = Vec::with_capacity(labeled_ids.len());
    for &i in labeled_ids {
        rows.push(logits.row(i).to_vec());
    }
    crate::nn::softmax_xent(&Tensor2::from_rows(&rows)?, &targets)
}

fn label_targets(graph: &TagGraph, ids: &[usize]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|&i| {
            graph
                .label(i)
                .ok_or_else(|| Error::InvalidArgument(format!("node {i} is used as labeled but has no label")))
        })
        .collect()
}

/// Flattened feedback: the (query, candidate) pairs and per-query groups
/// for the listwise loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackBatch {
    pub pairs: Vec<(usize, usize)>,
    pub groups: Vec<ListGroup>,
}

impl FeedbackBatch {
    pub fn new(feedback: &FeedbackSet, mode: FeedbackMode, m: usize) -> Self {
        let mut pairs = Vec::new();
        let mut groups = Vec::new();
        for (q, ranked) in &feedback.ranked {
            if ranked.is_empty() {
                continue;
            }
            groups.push(ListGroup {
                start: pairs.len(),
                len: ranked.len(),
                positives: positives(mode, m, ranked.len()),
            });
            pairs.extend(ranked.records.iter().map(|r| (*q, r.example_id)));
        }
        Self { pairs, groups }
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Loss terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub feedback: Option<Var>,
    pub clf: Var,
}

/// Records encoder, both losses and their mix. The feedback term only
/// enters `total` when `beta > 0`; the classification term only when
/// `beta < 1`.
#[allow(clippy::too_many_arguments)]
pub fn record_losses(
    tape: &mut Tape,
    input: &EncoderInput,
    bindings: &Bindings,
    enc: &EncoderConfig,
    batch: &FeedbackBatch,
    labeled_ids: &[usize],
    targets: &[usize],
    config: &TrainConfig,
    dropout_rng: Option<&mut dyn rand::RngCore>,
) -> Result<LossVars> {
    let emb = encoder::forward(tape, input, bindings, enc, dropout_rng)?;
    let feedback = if batch.is_empty() {
        None
    } else {
        let sims = tape.pair_dots(emb, &batch.pairs)?;
        Some(tape.listwise_nll(sims, &batch.groups, config.tau)?)
    };
    let rows = tape.gather_rows(emb, labeled_ids)?;
    let logits = encoder::head_logits(tape, rows, bindings)?;
    let clf = tape.softmax_xent(logits, targets)?;
    let beta = config.beta;
    let total = match feedback {
        Some(lf) if beta >= 1.0 => lf,
        Some(lf) if beta > 0.0 => {
            let a = tape.scale(lf, beta)?;
            let b = tape.scale(clf, 1.0 - beta)?;
            tape.add(a, b)?
        }
        _ => clf,
    };
    Ok(LossVars { total, feedback, clf })
}

/// Retrieves top-`k_feedback` candidates for every training query under the
/// current (dropout-free) embeddings and ranks them with the scorer.
pub fn collect_feedback_round(
    input: &EncoderInput,
    split: &SplitSpec,
    params: &ParamSet,
    enc: &EncoderConfig,
    ctx: &ScoringContext<'_>,
    config: &TrainConfig,
    round: usize,
) -> Result<FeedbackSet> {
    let emb = encoder::encode_input(input, params, enc, None)?;
    collect_feedback_for(&emb, split, ctx, config, round)
}

pub fn collect_feedback_for(
    emb: &EmbeddingTable,
    split: &SplitSpec,
    ctx: &ScoringContext<'_>,
    config: &TrainConfig,
    round: usize,
) -> Result<FeedbackSet> {
    let index = retriever::build_index(emb, split.labeled_ids())?;
    let retrieved = retriever::retrieve_many(&index, emb, split.query_train_ids(), config.k_feedback)?;
    let queries: Vec<(usize, Vec<usize>)> = retrieved.into_iter().map(|r| (r.query_id, r.ids())).collect();
    let outcomes = ctx.rank_many(&queries)?;
    let mut ranked = BTreeMap::new();
    let mut failures = Vec::new();
    let mut scored = 0;
    for o in outcomes {
        scored += o.ranked.len();
        failures.extend(o.failures);
        ranked.insert(o.ranked.query_id, o.ranked);
    }
    let set = FeedbackSet {
        round,
        ranked,
        scored_pairs: scored,
        unscored_pairs: failures.len(),
        failures,
    };
    let total = set.scored_pairs + set.unscored_pairs;
    if set.coverage() < config.coverage_floor {
        return Err(Error::Coverage {
            scored: set.scored_pairs,
            total,
            floor: config.coverage_floor,
        });
    }
    if !set.failures.is_empty() {
        log::warn!("round {round}: {} of {total} pairs unscored", set.unscored_pairs);
    }
    Ok(set)
}

/// Mean over `split`'s training queries of the mean scorer utility of the
/// top-`k` candidates retrieved under `emb`.
pub fn mean_retrieved_utility(emb: &EmbeddingTable, split: &SplitSpec, ctx: &ScoringContext<'_>, k: usize) -> Result<f64> {
    let config = TrainConfig {
        k_feedback: k,
        coverage_floor: 0.0,
        ..Default::default()
    };
    Ok(collect_feedback_for(emb, split, ctx, &config, 0)?.mean_utility())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub round: usize,
    pub loss_total: f64,
    pub loss_feedback: f64,
    pub loss_clf: f64,
    pub lr: f64,
}

pub struct TrainedModel {
    pub params: ParamSet,
    pub encoder: EncoderConfig,
    pub embeddings: EmbeddingTable,
    pub log: Vec<LogRow>,
    pub feedback: Vec<FeedbackSet>,
}

pub const PARAMS_FILE: &str = "params.bin";
pub const ENCODER_FILE: &str = "encoder.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const EMB_BIN: &str = "embeddings.bin";
pub const EMB_JSON: &str = "embeddings.json";

impl TrainedModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(dir.join(PARAMS_FILE))?;
        let enc = serde_json::to_vec_pretty(&self.encoder)?;
        fs::write(dir.join(ENCODER_FILE), enc).map_err(|e| Error::io(dir.join(ENCODER_FILE), e))?;
        self.embeddings.save(&dir.join(EMB_BIN), &dir.join(EMB_JSON))?;
        write_log(&self.log, &dir.join(LOG_FILE))
    }

    /// Loads parameters and encoder settings; embeddings are recomputed
    /// from `graph` so they always match the parameters.
    pub fn load(dir: &Path, graph: &TagGraph) -> Result<Self> {
        let params = ParamSet::load(dir.join(PARAMS_FILE))?;
        let path = dir.join(ENCODER_FILE);
        let encoder: EncoderConfig =
            serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        if encoder.input_dim != graph.feature_dim() || encoder.n_classes != graph.n_classes() {
            return Err(Error::InvalidArgument(format!(
                "model expects {} features / {} classes, graph has {} / {}",
                encoder.input_dim,
                encoder.n_classes,
                graph.feature_dim(),
                graph.n_classes()
            )));
        }
        let embeddings = encoder::encode_all(graph, &params, &encoder, None)?;
        Ok(Self {
            params,
            encoder,
            embeddings,
            log: Vec::new(),
            feedback: Vec::new(),
        })
    }
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Full training: for each round, collect feedback on the current
/// embeddings, then run `epochs` full-batch Adam steps on the combined loss.
pub fn train(
    graph: &TagGraph,
    split: &SplitSpec,
    ctx: &ScoringContext<'_>,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    let enc = config.encoder_config(graph);
    let mut params = encoder::init_params(&enc, config.seed)?;
    train_from(graph, split, ctx, config, &mut params)?.finish(graph, params, enc)
}

pub struct TrainRun {
    pub log: Vec<LogRow>,
    pub feedback: Vec<FeedbackSet>,
}

impl TrainRun {
    fn finish(self, graph: &TagGraph, params: ParamSet, enc: EncoderConfig) -> Result<TrainedModel> {
        let embeddings = encoder::encode_all(graph, &params, &enc, None)?;
        Ok(TrainedModel {
            params,
            encoder: enc,
            embeddings,
            log: self.log,
            feedback: self.feedback,
        })
    }
}

/// Trains `params` in place.
pub fn train_from(
    graph: &TagGraph,
    split: &SplitSpec,
    ctx: &ScoringContext<'_>,
    config: &TrainConfig,
    params: &mut ParamSet,
) -> Result<TrainRun> {
    config.validate()?;
    let enc = config.encoder_config(graph);
    let input = EncoderInput::new(graph);
    let labeled = split.labeled_ids().to_vec();
    if labeled.is_empty() {
        return Err(Error::Empty("labeled set"));
    }
    let targets = label_targets(graph, &labeled)?;
    let adam = config.adam();
    let mut log = Vec::with_capacity(config.rounds * config.epochs);
    let mut feedback = Vec::with_capacity(config.rounds);
    let mut epoch_counter = 0;
    for round in 1..=config.rounds {
        let set = collect_feedback_round(&input, split, params, &enc, ctx, config, round)?;
        let batch = FeedbackBatch::new(&set, config.feedback_mode, config.m);
        feedback.push(set);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, round as u64));
        for _ in 0..config.epochs {
            epoch_counter += 1;
            let epoch = epoch_counter;
            let abort = |e: Error| Error::Training {
                epoch,
                msg: e.to_string(),
            };
            let mut tape = Tape::new();
            let b = params.bind(&mut tape)?;
            let vars = record_losses(&mut tape, &input, &b, &enc, &batch, &labeled, &targets, config, Some(&mut rng))
                .map_err(abort)?;
            let grads = tape.backward(vars.total).map_err(abort)?;
            let grads = b.collect(&tape, &grads);
            params.adam_step(&grads, &adam).map_err(abort)?;
            log.push(LogRow {
                epoch,
                round,
                loss_total: tape.value(vars.total).item(),
                loss_feedback: vars.feedback.map_or(0.0, |v| tape.value(v).item()),
                loss_clf: tape.value(vars.clf).item(),
                lr: adam.lr,
            });
        }
    }
    Ok(TrainRun { log, feedback })
}
