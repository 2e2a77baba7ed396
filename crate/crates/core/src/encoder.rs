//! GraphSAGE encoder (mean aggregator) with a linear classification head.
//!
//! Layer rule, for `l = 1..L`:
//!
//! ```text
//! h_v^l = act( h_v^{l-1} W_self^l + mean_{u in N(v)} h_u^{l-1} W_neigh^l + b^l )
//! ```
//!
//! where `act` is ReLU on every layer but the last. Final rows are
//! L2-normalized so cosine similarity is a dot product. The head maps those
//! rows to class logits.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TagGraph;
use crate::nn::{dropout_mask, Bindings, ParamSet, Tape, Tensor2, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub input_dim: usize,
    pub n_classes: usize,
}

impl EncoderConfig {
    /// Defaults (3 layers, 256 hidden, dropout 0.5, 200 epochs) sized for `graph`.
    pub fn for_graph(graph: &TagGraph) -> Self {
        Self {
            n_layers: 3,
            hidden_dim: 256,
            dropout: 0.5,
            epochs: 200,
            input_dim: graph.feature_dim(),
            n_classes: graph.n_classes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument(
                "encoder needs at least one layer and one hidden unit".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn layer_dims(&self, l: usize) -> (usize, usize) {
        let input = if l == 0 { self.input_dim } else { self.hidden_dim };
        (input, self.hidden_dim)
    }
}

pub fn w_self_name(l: usize) -> String {
    format!("layer{l}.w_self")
}

pub fn w_neigh_name(l: usize) -> String {
    format!("layer{l}.w_neigh")
}

pub fn bias_name(l: usize) -> String {
    format!("layer{l}.bias")
}

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor2::from_vec(rows, cols, data).expect("sized by construction")
}

/// Glorot-uniform weights, zero biases; deterministic given `seed`.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for l in 0..config.n_layers {
        let (i, o) = config.layer_dims(l);
        params.insert(w_self_name(l), glorot(i, o, &mut rng));
        params.insert(w_neigh_name(l), glorot(i, o, &mut rng));
        params.insert(bias_name(l), Tensor2::zeros(1, o));
    }
    params.insert(HEAD_W, glorot(config.hidden_dim, config.n_classes, &mut rng));
    params.insert(HEAD_B, Tensor2::zeros(1, config.n_classes));
    Ok(params)
}

/// Graph data prepared once for repeated forward passes.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    features: Tensor2,
    groups: Arc<Vec<Vec<usize>>>,
}

impl EncoderInput {
    pub fn new(graph: &TagGraph) -> Self {
        let f = graph.features();
        let data = f.as_slice().iter().map(|&v| v as f64).collect();
        Self {
            features: Tensor2::from_vec(f.rows(), f.cols(), data).expect("feature matrix shape"),
            groups: Arc::new(graph.neighbor_groups()),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }
}

/// Records the encoder on `tape` and returns the normalized embedding rows.
/// Dropout runs between layers only when `dropout_rng` is given.
pub fn forward(
    tape: &mut Tape,
    input: &EncoderInput,
    bindings: &Bindings,
    config: &EncoderConfig,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    if input.features.cols() != config.input_dim {
        return Err(Error::shape(
            "encode",
            format!("features have {} columns, config expects {}", input.features.cols(), config.input_dim),
        ));
    }
    let mut h = tape.leaf(input.features.clone())?;
    for l in 0..config.n_layers {
        if l > 0 && config.dropout > 0.0 {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                let len = tape.value(h).data().len();
                h = tape.mask(h, dropout_mask(len, config.dropout, rng))?;
            }
        }
        let self_term = tape.matmul(h, bindings.get(&w_self_name(l))?)?;
        let agg = tape.mean_rows(h, input.groups.clone())?;
        let neigh_term = tape.matmul(agg, bindings.get(&w_neigh_name(l))?)?;
        let z = tape.add(self_term, neigh_term)?;
        let z = tape.add_bias(z, bindings.get(&bias_name(l))?)?;
        h = if l + 1 < config.n_layers { tape.relu(z)? } else { z };
    }
    tape.l2_normalize_rows(h)
}

/// Class logits for the given embedding rows.
pub fn head_logits(tape: &mut Tape, embeddings: Var, bindings: &Bindings) -> Result<Var> {
    tape.linear(embeddings, bindings.get(HEAD_W)?, bindings.get(HEAD_B)?)
}

/// Final-layer node representations, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    data: Tensor2,
    l2_normalized: bool,
}

impl EmbeddingTable {
    pub fn new(data: Tensor2, l2_normalized: bool) -> Self {
        Self { data, l2_normalized }
    }

    /// Wraps raw feature rows (unnormalized) as a table.
    pub fn from_features(graph: &TagGraph) -> Self {
        Self::new(EncoderInput::new(graph).features, false)
    }

    pub fn n_rows(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn matrix(&self) -> &Tensor2 {
        &self.data
    }

    pub fn is_l2_normalized(&self) -> bool {
        self.l2_normalized
    }

    /// Writes `<stem>.bin` and `<stem>.json` in the feature-matrix format.
    pub fn save(&self, bin: &Path, header: &Path) -> Result<()> {
        crate::graph::write_matrix_f32(bin, header, &self.data)
    }

    pub fn load(bin: &Path, header: &Path, l2_normalized: bool) -> Result<Self> {
        Ok(Self::new(crate::graph::read_matrix_f32(bin, header)?, l2_normalized))
    }
}

/// Runs the encoder over the whole graph.
pub fn encode_all(
    graph: &TagGraph,
    params: &ParamSet,
    config: &EncoderConfig,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<EmbeddingTable> {
    encode_input(&EncoderInput::new(graph), params, config, dropout_rng)
}

pub fn encode_input(
    input: &EncoderInput,
    params: &ParamSet,
    config: &EncoderConfig,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<EmbeddingTable> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape)?;
    let out = forward(&mut tape, input, &b, config, dropout_rng)?;
    Ok(EmbeddingTable::new(tape.value(out).clone(), true))
}

/// `embeddings * W_out + b_out`.
pub fn classify_logits(embeddings: &EmbeddingTable, params: &ParamSet) -> Result<Tensor2> {
    let w = params
        .get(HEAD_W)
        .ok_or_else(|| Error::InvalidArgument("parameter set has no classification head".into()))?;
    let mut logits = embeddings.data.matmul(w)?;
    if let Some(b) = params.get(HEAD_B) {
        if b.cols() != logits.cols() {
            return Err(Error::shape("classify_logits", "head bias width"));
        }
        for r in 0..logits.rows() {
            for (v, bias) in logits.row_mut(r).iter_mut().zip(b.data()) {
                *v += bias;
            }
        }
    }
    Ok(logits)
}

/// Row-wise argmax (first maximum wins).
pub fn argmax_rows(logits: &Tensor2) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{FeatureMatrix, GraphParts};

    fn graph_with(features: Vec<Vec<f32>>, edges: &[(usize, usize)]) -> TagGraph {
        let n = features.len();
        let d = features[0].len();
        TagGraph::from_parts(GraphParts {
            node_ids: (0..n as i64).collect(),
            texts: vec![String::new(); n],
            labels: vec![Some(0); n],
            label_vocab: vec!["A".into(), "B".into()],
            features: FeatureMatrix::new(n, d, features.concat()).unwrap(),
            edges: edges.to_vec(),
            directed: false,
        })
        .unwrap()
    }

    fn cfg(n_layers: usize, input_dim: usize, hidden_dim: usize, n_classes: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers,
            hidden_dim,
            dropout: 0.5,
            epochs: 1,
            input_dim,
            n_classes,
        }
    }

    #[test]
    fn init_is_deterministic_shaped_and_bounded() {
        let c = cfg(3, 128, 256, 7);
        let p = init_params(&c, 5).unwrap();
        assert_eq!(p, init_params(&c, 5).unwrap());
        assert_ne!(p, init_params(&c, 6).unwrap());
        assert_eq!(p.get("layer0.w_self").unwrap().shape(), (128, 256));
        assert_eq!(p.get("layer1.w_neigh").unwrap().shape(), (256, 256));
        assert_eq!(p.get("layer2.w_self").unwrap().shape(), (256, 256));
        assert_eq!(p.get(HEAD_W).unwrap().shape(), (256, 7));
        for (name, (i, o)) in [("layer0.w_self", (128, 256)), ("layer2.w_neigh", (256, 256)), (HEAD_W, (256, 7))] {
            let a = (6.0 / (i + o) as f64).sqrt();
            assert!(p.get(name).unwrap().data().iter().all(|v| v.abs() < a));
        }
        assert!(p.get("layer1.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_give_zero_embeddings() {
        let g = graph_with(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]], &[(0, 1)]);
        let c = cfg(2, 2, 4, 2);
        let mut p = init_params(&c, 0).unwrap();
        let names: Vec<String> = p.names().map(String::from).collect();
        for n in names {
            p.value_mut(&n).unwrap().iter_mut().for_each(|v| *v = 0.0);
        }
        let e = encode_all(&g, &p, &c, None).unwrap();
        assert!(e.matrix().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_node_identity_layer() {
        let g = graph_with(vec![vec![1.0, 0.0], vec![0.0, 1.0]], &[(0, 1)]);
        let c = cfg(1, 2, 2, 2);
        let mut p = init_params(&c, 0).unwrap();
        p.insert(w_self_name(0), Tensor2::identity(2));
        p.insert(w_neigh_name(0), Tensor2::identity(2));
        let e = encode_all(&g, &p, &c, None).unwrap();
        let s = 1.0 / 2f64.sqrt();
        for r in 0..2 {
            assert!((e.row(r)[0] - s).abs() < 1e-15 && (e.row(r)[1] - s).abs() < 1e-15);
        }
    }

    #[test]
    fn isolated_node_depends_only_on_itself() {
        let base = vec![vec![1.0, 0.5], vec![0.2, -1.0], vec![0.3, 0.3]];
        let c = cfg(2, 2, 3, 2);
        let p = init_params(&c, 9).unwrap();
        let e1 = encode_all(&graph_with(base.clone(), &[(0, 1)]), &p, &c, None).unwrap();
        let mut changed = base;
        changed[0] = vec![-4.0, 2.0];
        changed[1] = vec![7.0, 7.0];
        let e2 = encode_all(&graph_with(changed, &[(0, 1)]), &p, &c, None).unwrap();
        assert_eq!(e1.row(2), e2.row(2));
    }

    #[test]
    fn eval_mode_is_repeatable_and_train_mode_differs() {
        let g = graph_with(vec![vec![1.0, 0.5], vec![0.2, -1.0], vec![0.3, 0.3]], &[(0, 1), (1, 2)]);
        let c = cfg(3, 2, 8, 2);
        let p = init_params(&c, 1).unwrap();
        let a = encode_all(&g, &p, &c, None).unwrap();
        assert_eq!(a, encode_all(&g, &p, &c, None).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = encode_all(&g, &p, &c, Some(&mut rng)).unwrap();
        assert_ne!(a, t);
    }

    #[test]
    fn logits_cases() {
        let mut p = ParamSet::new();
        p.insert(HEAD_W, Tensor2::zeros(3, 4));
        let e = EmbeddingTable::new(Tensor2::identity(3), true);
        let l = classify_logits(&e, &p).unwrap();
        for r in 0..3 {
            let probs: Vec<f64> = {
                let z: f64 = l.row(r).iter().map(|v| v.exp()).sum();
                l.row(r).iter().map(|v| v.exp() / z).collect()
            };
            assert!(probs.iter().all(|&q| (q - 0.25).abs() < 1e-15));
        }
        p.insert(HEAD_W, Tensor2::identity(3));
        let l = classify_logits(&e, &p).unwrap();
        assert_eq!(argmax_rows(&l), vec![0, 1, 2]);
        assert!(classify_logits(&e, &ParamSet::new()).is_err());
    }

    #[test]
    fn logits_match_naive_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let emb: Vec<f64> = (0..80).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut p = ParamSet::new();
        p.insert(HEAD_W, Tensor2::from_vec(8, 5, w.clone()).unwrap());
        p.insert(HEAD_B, Tensor2::from_vec(1, 5, b.clone()).unwrap());
        let e = EmbeddingTable::new(Tensor2::from_vec(10, 8, emb.clone()).unwrap(), false);
        let l = classify_logits(&e, &p).unwrap();
        for i in 0..10 {
            for j in 0..5 {
                let mut s = b[j];
                for k in 0..8 {
                    s += emb[i * 8 + k] * w[k * 5 + j];
                }
                assert!((l.get(i, j) - s).abs() < 1e-12);
            }
        }
    }
}
