//! Exact cosine top-K over labeled nodes, plus the non-learned selectors
//! used as baselines.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::TagGraph;

pub const STRATEGY_ASKGNN: &str = "askgnn";
pub const STRATEGY_KNN: &str = "knn";
pub const STRATEGY_RANDOM: &str = "random";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: usize,
    /// `(node, score)`, best first.
    pub hits: Vec<(usize, f64)>,
    pub strategy: String,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<usize> {
        self.hits.iter().map(|h| h.0).collect()
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

/// Flat snapshot of unit-normalized labeled rows.
#[derive(Debug, Clone)]
pub struct Index {
    ids: Vec<usize>,
    dim: usize,
    rows: Vec<f64>,
    strategy: String,
}

fn normalized(row: &[f64]) -> Vec<f64> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        row.iter().map(|v| v / norm).collect()
    } else {
        vec![0.0; row.len()]
    }
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na > 0.0 && nb > 0.0 {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Descending score, ascending id.
pub fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

pub fn build_index(embeddings: &EmbeddingTable, labeled_ids: &[usize]) -> Result<Index> {
    build_index_tagged(embeddings, labeled_ids, STRATEGY_ASKGNN)
}

pub fn build_index_tagged(embeddings: &EmbeddingTable, labeled_ids: &[usize], strategy: &str) -> Result<Index> {
    if labeled_ids.is_empty() {
        return Err(Error::Empty("labeled set"));
    }
    let mut ids = labeled_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let dim = embeddings.dim();
    let mut rows = Vec::with_capacity(ids.len() * dim);
    for &id in &ids {
        if id >= embeddings.n_rows() {
            return Err(Error::IndexOutOfRange {
                index: id,
                len: embeddings.n_rows(),
            });
        }
        rows.extend(normalized(embeddings.row(id)));
    }
    Ok(Index {
        ids,
        dim,
        rows,
        strategy: strategy.to_string(),
    })
}

impl Index {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.binary_search(&id).is_ok()
    }
}

/// The `k` labeled nodes most similar to `query`, skipping `exclude`
/// (which should contain the query node itself when it is labeled).
pub fn retrieve_topk(index: &Index, query_id: usize, query: &[f64], k: usize, exclude: &[usize]) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if query.len() != index.dim {
        return Err(Error::shape(
            "retrieve_topk",
            format!("query has {} dims, index has {}", query.len(), index.dim),
        ));
    }
    let q = normalized(query);
    let mut scored: Vec<(usize, f64)> = index
        .ids
        .iter()
        .enumerate()
        .filter(|(_, id)| *id != &query_id && !exclude.contains(id))
        .map(|(slot, &id)| {
            let row = &index.rows[slot * index.dim..(slot + 1) * index.dim];
            let s: f64 = row.iter().zip(&q).map(|(a, b)| a * b).sum();
            (id, s.clamp(-1.0, 1.0))
        })
        .collect();
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    Ok(RetrievalResult {
        query_id,
        hits: scored,
        strategy: index.strategy.clone(),
    })
}

/// Top-K for a graph node, using its own row of `table` as the query.
pub fn retrieve_for_node(index: &Index, table: &EmbeddingTable, node: usize, k: usize) -> Result<RetrievalResult> {
    if node >= table.n_rows() {
        return Err(Error::IndexOutOfRange {
            index: node,
            len: table.n_rows(),
        });
    }
    retrieve_topk(index, node, table.row(node), k, &[])
}

/// `retrieve_for_node` for many queries; safe to run in parallel since the
/// index is read-only. Output order follows `queries`.
pub fn retrieve_many(index: &Index, table: &EmbeddingTable, queries: &[usize], k: usize) -> Result<Vec<RetrievalResult>> {
    queries
        .par_iter()
        .map(|&q| retrieve_for_node(index, table, q, k))
        .collect()
}

/// Cosine top-K over raw node features.
pub fn knn_raw_features(graph: &TagGraph, labeled_ids: &[usize], query_id: usize, k: usize) -> Result<RetrievalResult> {
    let table = EmbeddingTable::from_features(graph);
    let index = build_index_tagged(&table, labeled_ids, STRATEGY_KNN)?;
    retrieve_for_node(&index, &table, query_id, k)
}

/// `k` distinct uniform draws from `labeled_ids` (minus the query), scored 0.
/// The stream is fixed by `(seed, query_id)`.
pub fn random_examples(labeled_ids: &[usize], query_id: usize, k: usize, seed: u64) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let pool: Vec<usize> = labeled_ids.iter().copied().filter(|&id| id != query_id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, query_id as u64));
    let take = k.min(pool.len());
    let hits = rand::seq::index::sample(&mut rng, pool.len(), take)
        .into_iter()
        .map(|i| (pool[i], 0.0))
        .collect();
    Ok(RetrievalResult {
        query_id,
        hits,
        strategy: STRATEGY_RANDOM.into(),
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for sub-stream `salt` of `seed`.
pub(crate) fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

#[derive(Serialize)]
struct ExportRow<'a> {
    query: i64,
    hits: Vec<(i64, f64)>,
    strategy: &'a str,
}

/// One JSON object per result, node ids mapped to the graph's external ids.
pub fn write_results_jsonl(results: &[RetrievalResult], graph: &TagGraph, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let ids = graph.node_ids();
    for r in results {
        let row = ExportRow {
            query: ids[r.query_id],
            hits: r.hits.iter().map(|&(n, s)| (ids[n], s)).collect(),
            strategy: &r.strategy,
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
