//! Text-attributed graph storage.
//!
//! [`TagGraph`] holds CSR adjacency, per-node feature rows, node texts,
//! optional class labels and the ordered label vocabulary. It is immutable
//! once built; every constructor validates the invariants listed on the type.

mod bundle;
mod split;
mod synth;

pub use bundle::{load_bundle, load_split_file, read_matrix_f32, write_bundle, write_matrix_f32, write_split_file, LoadOptions};
pub use split::{sample_label_fraction, sample_label_fraction_with_test, SplitSpec};
pub use synth::{synth_sbm, SbmParams};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense row-major `f32` matrix, the on-disk feature representation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::shape(
                "FeatureMatrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Everything needed to assemble a [`TagGraph`] from an edge list.
#[derive(Debug, Clone)]
pub struct GraphParts {
    /// External node ids, in dense index order.
    pub node_ids: Vec<i64>,
    pub texts: Vec<String>,
    pub labels: Vec<Option<usize>>,
    pub label_vocab: Vec<String>,
    pub features: FeatureMatrix,
    /// Edges as dense index pairs.
    pub edges: Vec<(usize, usize)>,
    pub directed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagGraph {
    node_ids: Vec<i64>,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    features: FeatureMatrix,
    texts: Vec<String>,
    labels: Vec<Option<usize>>,
    label_vocab: Vec<String>,
    directed: bool,
}

impl TagGraph {
    /// Builds the CSR adjacency: self-loops dropped, duplicates removed,
    /// targets sorted ascending within each row, and both directions stored
    /// when the graph is undirected.
    pub fn from_parts(parts: GraphParts) -> Result<Self> {
        let GraphParts {
            node_ids,
            texts,
            labels,
            label_vocab,
            features,
            edges,
            directed,
        } = parts;
        let n = node_ids.len();
        if texts.len() != n || labels.len() != n {
            return Err(Error::shape(
                "TagGraph::from_parts",
                format!("{n} ids, {} texts, {} labels", texts.len(), labels.len()),
            ));
        }
        if features.rows() != n {
            return Err(Error::shape(
                "TagGraph::from_parts",
                format!("{} feature rows for {n} nodes", features.rows()),
            ));
        }
        if let Some(pos) = features.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite feature at row {}",
                pos / features.cols().max(1)
            )));
        }
        for (i, l) in labels.iter().enumerate() {
            if let Some(c) = *l {
                if c >= label_vocab.len() {
                    return Err(Error::InvalidArgument(format!(
                        "node {i} has class {c} but vocabulary has {} labels",
                        label_vocab.len()
                    )));
                }
            }
        }

        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in &edges {
            if u >= n {
                return Err(Error::IndexOutOfRange { index: u, len: n });
            }
            if v >= n {
                return Err(Error::IndexOutOfRange { index: v, len: n });
            }
            if u == v {
                continue;
            }
            adj[u].push(v);
            if !directed {
                adj[v].push(u);
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for row in &mut adj {
            row.sort_unstable();
            row.dedup();
            targets.extend_from_slice(row);
            offsets.push(targets.len());
        }

        Ok(Self {
            node_ids,
            offsets,
            targets,
            features,
            texts,
            labels,
            label_vocab,
            directed,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_classes(&self) -> usize {
        self.label_vocab.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn csr_offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn csr_targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn node_ids(&self) -> &[i64] {
        &self.node_ids
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn text(&self, node: usize) -> &str {
        &self.texts[node]
    }

    pub fn label(&self, node: usize) -> Option<usize> {
        self.labels[node]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn label_vocab(&self) -> &[String] {
        &self.label_vocab
    }

    pub fn labeled_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&i| self.labels[i].is_some()).collect()
    }

    /// Neighbors of `node` in CSR order. Undirected graphs store both edge
    /// directions, so this is the union of in- and out-neighbors for them.
    pub fn neighbors(&self, node: usize) -> Result<&[usize]> {
        if node >= self.n_nodes() {
            return Err(Error::IndexOutOfRange {
                index: node,
                len: self.n_nodes(),
            });
        }
        Ok(&self.targets[self.offsets[node]..self.offsets[node + 1]])
    }

    /// Neighbor lists for every node, the grouping used by mean aggregation.
    pub fn neighbor_groups(&self) -> Vec<Vec<usize>> {
        (0..self.n_nodes())
            .map(|i| self.targets[self.offsets[i]..self.offsets[i + 1]].to_vec())
            .collect()
    }

    /// Edge list in the form `write_bundle` emits: each undirected edge once
    /// with `u < v`, every stored edge for directed graphs.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for u in 0..self.n_nodes() {
            for &v in &self.targets[self.offsets[u]..self.offsets[u + 1]] {
                if self.directed || u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Maps external ids to dense indices.
    pub fn index_of(&self, id: i64) -> Option<usize> {
        // ids are usually 0..n in order; fall back to a scan otherwise
        if id >= 0 && (id as usize) < self.n_nodes() && self.node_ids[id as usize] == id {
            return Some(id as usize);
        }
        self.node_ids.iter().position(|&x| x == id)
    }

    /// Digest over ids, adjacency, features, texts and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_nodes() as u64).to_le_bytes());
        h.update([self.directed as u8]);
        for id in &self.node_ids {
            h.update(id.to_le_bytes());
        }
        for o in &self.offsets {
            h.update((*o as u64).to_le_bytes());
        }
        for t in &self.targets {
            h.update((*t as u64).to_le_bytes());
        }
        h.update((self.features.cols() as u64).to_le_bytes());
        for v in self.features.as_slice() {
            h.update(v.to_le_bytes());
        }
        for t in &self.texts {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        for l in &self.labels {
            h.update(l.map(|c| c as i64).unwrap_or(-1).to_le_bytes());
        }
        for v in &self.label_vocab {
            h.update((v.len() as u64).to_le_bytes());
            h.update(v.as_bytes());
        }
        hex::encode(h.finalize())
    }
}
