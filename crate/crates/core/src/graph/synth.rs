//! Stochastic block model fixture with class-correlated features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, GraphParts, TagGraph};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbmParams {
    pub n_nodes: usize,
    pub n_classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub dim: usize,
    /// Standard deviation of the per-coordinate Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SbmParams {
    fn default() -> Self {
        Self {
            n_nodes: 1000,
            n_classes: 5,
            p_in: 0.05,
            p_out: 0.005,
            dim: 16,
            noise: 0.6,
            seed: 0,
        }
    }
}

pub fn class_name(c: usize) -> String {
    format!("class_{c}")
}

/// Undirected SBM with balanced contiguous blocks (node `i` belongs to class
/// `i * C / n`). Feature rows are the class's basis vector plus noise; every
/// node is labeled.
pub fn synth_sbm(p: &SbmParams) -> Result<TagGraph> {
    if p.n_classes == 0 || p.n_classes > p.dim {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= n_classes <= dim, got {} classes in {} dims",
            p.n_classes, p.dim
        )));
    }
    if p.n_nodes < p.n_classes {
        return Err(Error::InvalidArgument("fewer nodes than classes".into()));
    }
    if !(0.0..=1.0).contains(&p.p_in) || !(0.0..=p.p_in).contains(&p.p_out) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= p_out <= p_in <= 1, got p_in={} p_out={}",
            p.p_in, p.p_out
        )));
    }
    if !(p.noise >= 0.0 && p.noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad noise scale {}", p.noise)));
    }

    let n = p.n_nodes;
    let class_of = |i: usize| i * p.n_classes / n;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let prob = if class_of(i) == class_of(j) { p.p_in } else { p.p_out };
            if rng.random::<f64>() < prob {
                edges.push((i, j));
            }
        }
    }

    let mut data = Vec::with_capacity(n * p.dim);
    for i in 0..n {
        let c = class_of(i);
        for k in 0..p.dim {
            let centroid = if k == c { 1.0 } else { 0.0 };
            let eps: f64 = rng.sample(StandardNormal);
            data.push((centroid + p.noise * eps) as f32);
        }
    }

    let label_vocab: Vec<String> = (0..p.n_classes).map(class_name).collect();
    let texts = (0..n)
        .map(|i| format!("Document {i} discusses topics related to {}.", label_vocab[class_of(i)]))
        .collect();

    TagGraph::from_parts(GraphParts {
        node_ids: (0..n as i64).collect(),
        texts,
        labels: (0..n).map(|i| Some(class_of(i))).collect(),
        label_vocab,
        features: FeatureMatrix::new(n, p.dim, data)?,
        edges,
        directed: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_gives_exact_centroids() {
        let g = synth_sbm(&SbmParams {
            n_nodes: 20,
            n_classes: 4,
            noise: 0.0,
            dim: 6,
            ..Default::default()
        })
        .unwrap();
        for i in 0..20 {
            let c = g.label(i).unwrap();
            let row = g.features().row(i);
            for (k, &v) in row.iter().enumerate() {
                assert_eq!(v, if k == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn degenerate_densities_make_cliques() {
        let g = synth_sbm(&SbmParams {
            n_nodes: 6,
            n_classes: 2,
            p_in: 1.0,
            p_out: 0.0,
            dim: 2,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(g.neighbors(0).unwrap(), &[1, 2]);
        assert_eq!(g.neighbors(4).unwrap(), &[3, 5]);
        assert_eq!(g.edge_list().len(), 6);
    }

    #[test]
    fn empirical_densities_match() {
        let p = SbmParams {
            seed: 42,
            ..Default::default()
        };
        let g = synth_sbm(&p).unwrap();
        let (mut within, mut cross) = (0usize, 0usize);
        for (u, v) in g.edge_list() {
            if g.label(u) == g.label(v) {
                within += 1;
            } else {
                cross += 1;
            }
        }
        let per_class = p.n_nodes / p.n_classes;
        let within_pairs = p.n_classes * per_class * (per_class - 1) / 2;
        let cross_pairs = p.n_nodes * (p.n_nodes - 1) / 2 - within_pairs;
        let d_in = within as f64 / within_pairs as f64;
        let d_out = cross as f64 / cross_pairs as f64;
        assert!((d_in - p.p_in).abs() <= 0.02, "{d_in}");
        assert!((d_out - p.p_out).abs() <= 0.02, "{d_out}");
    }

    #[test]
    fn deterministic_and_validated() {
        let p = SbmParams {
            n_nodes: 50,
            ..Default::default()
        };
        assert_eq!(synth_sbm(&p).unwrap(), synth_sbm(&p).unwrap());
        assert!(synth_sbm(&SbmParams { p_out: 0.2, p_in: 0.1, ..p }).is_err());
        assert!(synth_sbm(&SbmParams { n_classes: 17, ..p }).is_err());
    }
}
