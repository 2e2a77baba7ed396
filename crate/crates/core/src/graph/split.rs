use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TagGraph;
use crate::error::{Error, Result};

/// Which nodes supervise the retriever and which are held out for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    labeled_ids: Vec<usize>,
    query_train_ids: Vec<usize>,
    test_ids: Vec<usize>,
    fraction: f64,
    seed: u64,
}

impl SplitSpec {
    pub fn new(
        mut labeled_ids: Vec<usize>,
        mut query_train_ids: Vec<usize>,
        mut test_ids: Vec<usize>,
        fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        labeled_ids.sort_unstable();
        labeled_ids.dedup();
        query_train_ids.sort_unstable();
        query_train_ids.dedup();
        test_ids.sort_unstable();
        test_ids.dedup();
        if let Some(&x) = test_ids.iter().find(|t| labeled_ids.binary_search(t).is_ok()) {
            return Err(Error::InvalidArgument(format!(
                "node {x} is both labeled and in the test set"
            )));
        }
        if let Some(&x) = query_train_ids
            .iter()
            .find(|q| labeled_ids.binary_search(q).is_err())
        {
            return Err(Error::InvalidArgument(format!(
                "training query {x} is not a labeled node"
            )));
        }
        Ok(Self {
            labeled_ids,
            query_train_ids,
            test_ids,
            fraction,
            seed,
        })
    }

    pub fn labeled_ids(&self) -> &[usize] {
        &self.labeled_ids
    }

    pub fn query_train_ids(&self) -> &[usize] {
        &self.query_train_ids
    }

    pub fn test_ids(&self) -> &[usize] {
        &self.test_ids
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Same split with the test set in place of just `n` of its members,
    /// picked as an evenly spaced subsample (keeps runs small).
    pub fn with_test_subsample(&self, n: usize) -> Self {
        let mut out = self.clone();
        if n < self.test_ids.len() && n > 0 {
            let step = self.test_ids.len() as f64 / n as f64;
            out.test_ids = (0..n)
                .map(|i| self.test_ids[(i as f64 * step) as usize])
                .collect();
        }
        out
    }
}

/// Stratified label-fraction sample; the unselected labeled nodes become the
/// test set.
pub fn sample_label_fraction(graph: &TagGraph, fraction: f64, seed: u64) -> Result<SplitSpec> {
    sample_label_fraction_with_test(graph, fraction, seed, None)
}

/// Samples `round(fraction * M)` labeled nodes from the labeled pool
/// (labeled nodes not in `designated_test`), stratified by class with
/// largest-remainder allocation and at least one node per class.
///
/// Without a designated test set, the pool's leftover nodes form the test
/// set; with one, leftovers are simply dropped from supervision.
pub fn sample_label_fraction_with_test(
    graph: &TagGraph,
    fraction: f64,
    seed: u64,
    designated_test: Option<&[usize]>,
) -> Result<SplitSpec> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "label fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut is_test = vec![false; graph.n_nodes()];
    if let Some(test) = designated_test {
        for &t in test {
            if t >= graph.n_nodes() {
                return Err(Error::IndexOutOfRange {
                    index: t,
                    len: graph.n_nodes(),
                });
            }
            is_test[t] = true;
        }
    }

    let n_classes = graph.n_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &test) in is_test.iter().enumerate() {
        if let (Some(c), false) = (graph.label(i), test) {
            by_class[c].push(i);
        }
    }
    if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "class {:?} has no labeled nodes in the sampling pool",
            graph.label_vocab()[c]
        )));
    }
    let total: usize = by_class.iter().map(Vec::len).sum();
    let target = ((fraction * total as f64).round() as usize).max(1);

    // largest remainder: floor each quota, hand the rest to the biggest
    // fractional parts (ties to the lower class index)
    let quotas: Vec<f64> = by_class
        .iter()
        .map(|v| target as f64 * v.len() as f64 / total as f64)
        .collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().take(target.saturating_sub(assigned)) {
        alloc[c] += 1;
    }
    for (c, a) in alloc.iter_mut().enumerate() {
        *a = (*a).clamp(1, by_class[c].len());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = Vec::with_capacity(target);
    let mut leftover = Vec::new();
    for (c, pool) in by_class.iter_mut().enumerate() {
        pool.shuffle(&mut rng);
        labeled.extend_from_slice(&pool[..alloc[c]]);
        leftover.extend_from_slice(&pool[alloc[c]..]);
    }

    let test = match designated_test {
        Some(t) => t.to_vec(),
        None => leftover,
    };
    SplitSpec::new(labeled.clone(), labeled, test, fraction, seed)
}
