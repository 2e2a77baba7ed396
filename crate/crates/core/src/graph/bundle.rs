//! Bundle directory reader and writer.
//!
//! Layout:
//!
//! ```text
//! nodes.jsonl     {"id": int, "text": str, "label": str|null} per line
//! edges.tsv       "<id>\t<id>" per line
//! features.bin    f32 little-endian, row-major
//! features.json   {"rows": int, "cols": int, "dtype": "f32le", "layout": "row-major"}
//! labels.json     ["class", ...]
//! splits.json     optional {"labeled": [id], "test": [id]}
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, GraphParts, SplitSpec, TagGraph};
use crate::error::{Error, Result};
use crate::nn::Tensor2;

#[derive(Debug, Clone, Copy)]
#[derive(Default)]
pub struct LoadOptions {
    /// Keep edges one-directional instead of symmetrizing them.
    pub directed: bool,
}


#[derive(Debug, Serialize, Deserialize)]
struct NodeLine {
    id: i64,
    text: String,
    label: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct MatrixHeader {
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub layout: String,
}

impl MatrixHeader {
    pub(crate) fn f32le(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            dtype: "f32le".into(),
            layout: "row-major".into(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitsFile {
    labeled: Vec<i64>,
    test: Vec<i64>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(dir: impl AsRef<Path>, opts: LoadOptions) -> Result<TagGraph> {
    let dir = dir.as_ref();

    let vocab_path = dir.join("labels.json");
    let label_vocab: Vec<String> = serde_json::from_slice(&read_file(&vocab_path)?)
        .map_err(|e| Error::bundle(&vocab_path, None, e.to_string()))?;
    let vocab_index: HashMap<&str, usize> = label_vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    if vocab_index.len() != label_vocab.len() {
        return Err(Error::bundle(&vocab_path, None, "duplicate class label"));
    }

    let nodes_path = dir.join("nodes.jsonl");
    let file = fs::File::open(&nodes_path).map_err(|e| Error::io(&nodes_path, e))?;
    let mut node_ids = Vec::new();
    let mut texts = Vec::new();
    let mut labels = Vec::new();
    let mut id_index: HashMap<i64, usize> = HashMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&nodes_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let node: NodeLine = serde_json::from_str(&line)
            .map_err(|e| Error::bundle(&nodes_path, Some(lineno + 1), e.to_string()))?;
        let label = match node.label {
            None => None,
            Some(s) => match vocab_index.get(s.as_str()) {
                Some(&c) => Some(c),
                None => {
                    return Err(Error::bundle(
                        &nodes_path,
                        Some(lineno + 1),
                        format!("unknown label {s:?}"),
                    ))
                }
            },
        };
        if id_index.insert(node.id, node_ids.len()).is_some() {
            return Err(Error::bundle(
                &nodes_path,
                Some(lineno + 1),
                format!("duplicate node id {}", node.id),
            ));
        }
        node_ids.push(node.id);
        texts.push(node.text);
        labels.push(label);
    }

    let header_path = dir.join("features.json");
    let header = read_matrix_header(&header_path)?;
    if header.rows != node_ids.len() {
        return Err(Error::bundle(
            &header_path,
            None,
            format!(
                "declares rows={} but nodes.jsonl has {} nodes",
                header.rows,
                node_ids.len()
            ),
        ));
    }
    let bin_path = dir.join("features.bin");
    let features = read_f32_matrix(&bin_path, header.rows, header.cols)?;

    let edges_path = dir.join("edges.tsv");
    let file = fs::File::open(&edges_path).map_err(|e| Error::io(&edges_path, e))?;
    let mut edges = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&edges_path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::bundle(&edges_path, Some(lineno + 1), msg);
        let mut it = line.split_whitespace();
        let (a, b) = match (it.next(), it.next(), it.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => return Err(bad(format!("expected two ids, got {line:?}"))),
        };
        let resolve = |tok: &str| -> Result<usize> {
            let id: i64 = tok.parse().map_err(|_| bad(format!("bad node id {tok:?}")))?;
            id_index
                .get(&id)
                .copied()
                .ok_or_else(|| bad(format!("unknown node id {id}")))
        };
        edges.push((resolve(a)?, resolve(b)?));
    }

    TagGraph::from_parts(GraphParts {
        node_ids,
        texts,
        labels,
        label_vocab,
        features,
        edges,
        directed: opts.directed,
    })
}

fn read_matrix_header(path: &Path) -> Result<MatrixHeader> {
    let header: MatrixHeader = serde_json::from_slice(&read_file(path)?)
        .map_err(|e| Error::bundle(path, None, e.to_string()))?;
    if header.dtype != "f32le" || header.layout != "row-major" {
        return Err(Error::bundle(
            path,
            None,
            format!("unsupported dtype/layout {}/{}", header.dtype, header.layout),
        ));
    }
    Ok(header)
}

/// Writes a dense matrix as an f32le payload plus its JSON header.
pub fn write_matrix_f32(bin_path: &Path, header_path: &Path, m: &Tensor2) -> Result<()> {
    write_f32_matrix(bin_path, header_path, m.rows(), m.cols(), m.data().iter().map(|&v| v as f32))
}

pub fn read_matrix_f32(bin_path: &Path, header_path: &Path) -> Result<Tensor2> {
    let h = read_matrix_header(header_path)?;
    let m = read_f32_matrix(bin_path, h.rows, h.cols)?;
    Tensor2::from_vec(h.rows, h.cols, m.as_slice().iter().map(|&v| v as f64).collect())
}

pub(crate) fn read_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<FeatureMatrix> {
    let bytes = read_file(path)?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::bundle(
            path,
            None,
            format!("expected {expected} bytes for {rows}x{cols} f32, found {}", bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::bundle(
            path,
            Some(pos / cols.max(1)),
            format!("non-finite value in row {} col {}", pos / cols.max(1), pos % cols.max(1)),
        ));
    }
    FeatureMatrix::new(rows, cols, data)
}

pub(crate) fn write_f32_matrix(
    bin_path: &Path,
    header_path: &Path,
    rows: usize,
    cols: usize,
    values: impl IntoIterator<Item = f32>,
) -> Result<()> {
    let mut buf = Vec::with_capacity(rows * cols * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(bin_path, buf).map_err(|e| Error::io(bin_path, e))?;
    let header = serde_json::to_vec(&MatrixHeader::f32le(rows, cols))?;
    fs::write(header_path, header).map_err(|e| Error::io(header_path, e))
}

pub fn write_bundle(graph: &TagGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join("labels.json");
    fs::write(&path, serde_json::to_vec(graph.label_vocab())?).map_err(|e| Error::io(&path, e))?;

    let path = dir.join("nodes.jsonl");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for i in 0..graph.n_nodes() {
        let line = NodeLine {
            id: graph.node_ids()[i],
            text: graph.text(i).to_string(),
            label: graph.label(i).map(|c| graph.label_vocab()[c].clone()),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("edges.tsv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let ids = graph.node_ids();
    for (u, v) in graph.edge_list() {
        writeln!(w, "{}\t{}", ids[u], ids[v]).map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let f = graph.features();
    write_f32_matrix(
        &dir.join("features.bin"),
        &dir.join("features.json"),
        f.rows(),
        f.cols(),
        f.as_slice().iter().copied(),
    )
}

/// Writes `splits.json` (external ids) into `dir`.
pub fn write_split_file(dir: impl AsRef<Path>, graph: &TagGraph, split: &SplitSpec) -> Result<()> {
    let ids = graph.node_ids();
    let raw = SplitsFile {
        labeled: split.labeled_ids().iter().map(|&i| ids[i]).collect(),
        test: split.test_ids().iter().map(|&i| ids[i]).collect(),
    };
    let path = dir.as_ref().join("splits.json");
    fs::write(&path, serde_json::to_vec(&raw)?).map_err(|e| Error::io(&path, e))
}

/// Reads an optional `splits.json`. Returns `Ok(None)` when the file is absent.
pub fn load_split_file(dir: impl AsRef<Path>, graph: &TagGraph) -> Result<Option<SplitSpec>> {
    let path = dir.as_ref().join("splits.json");
    if !path.exists() {
        return Ok(None);
    }
    let raw: SplitsFile = serde_json::from_slice(&read_file(&path)?)
        .map_err(|e| Error::bundle(&path, None, e.to_string()))?;
    let map = |ids: &[i64]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| {
                graph
                    .index_of(id)
                    .ok_or_else(|| Error::bundle(&path, None, format!("unknown node id {id}")))
            })
            .collect()
    };
    let labeled = map(&raw.labeled)?;
    let test = map(&raw.test)?;
    for &i in &labeled {
        if graph.label(i).is_none() {
            return Err(Error::bundle(&path, None, format!("node {} is unlabeled", graph.node_ids()[i])));
        }
    }
    SplitSpec::new(labeled.clone(), labeled, test, 1.0, 0).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::toy_graph;

    fn write_raw(dir: &Path, nodes: &str, edges: &str, rows: usize, cols: usize, feats: &[f32]) {
        fs::write(dir.join("labels.json"), r#"["A","B"]"#).unwrap();
        fs::write(dir.join("nodes.jsonl"), nodes).unwrap();
        fs::write(dir.join("edges.tsv"), edges).unwrap();
        write_f32_matrix(
            &dir.join("features.bin"),
            &dir.join("features.json"),
            rows,
            cols,
            feats.iter().copied(),
        )
        .unwrap();
    }

    const THREE_NODES: &str = "{\"id\":0,\"text\":\"a\",\"label\":\"A\"}\n{\"id\":1,\"text\":\"b\",\"label\":null}\n{\"id\":2,\"text\":\"c\",\"label\":\"B\"}\n";

    #[test]
    fn loads_directed_three_node_bundle() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), THREE_NODES, "0\t1\n1\t2\n", 3, 1, &[1.0, 2.0, 3.0]);
        let g = load_bundle(dir.path(), LoadOptions { directed: true }).unwrap();
        assert_eq!(g.csr_offsets(), &[0, 1, 2, 2]);
        assert_eq!(g.label(1), None);
        assert_eq!(g.label(2), Some(1));
    }

    #[test]
    fn duplicate_edge_stored_once() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), THREE_NODES, "0\t1\n0\t1\n", 3, 1, &[1.0, 2.0, 3.0]);
        let g = load_bundle(dir.path(), LoadOptions { directed: true }).unwrap();
        assert_eq!(g.csr_targets(), &[1]);
    }

    #[test]
    fn row_count_mismatch_names_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let nodes: String = (0..4)
            .map(|i| format!("{{\"id\":{i},\"text\":\"t\",\"label\":\"A\"}}\n"))
            .collect();
        write_raw(dir.path(), &nodes, "", 5, 1, &[0.0; 5]);
        let err = load_bundle(dir.path(), LoadOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("features.json") && msg.contains("rows=5") && msg.contains("4 nodes"), "{msg}");
    }

    #[test]
    fn unknown_label_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let nodes = "{\"id\":0,\"text\":\"a\",\"label\":\"A\"}\n{\"id\":1,\"text\":\"b\",\"label\":\"Z\"}\n";
        write_raw(dir.path(), nodes, "", 2, 1, &[0.0; 2]);
        let msg = load_bundle(dir.path(), LoadOptions::default()).unwrap_err().to_string();
        assert!(msg.contains("nodes.jsonl:2") && msg.contains("\"Z\""), "{msg}");
    }

    #[test]
    fn non_finite_feature_names_row() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), THREE_NODES, "", 3, 1, &[0.0, f32::NAN, 0.0]);
        let msg = load_bundle(dir.path(), LoadOptions::default()).unwrap_err().to_string();
        assert!(msg.contains("features.bin") && msg.contains("row 1"), "{msg}");
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), THREE_NODES, "", 3, 1, &[0.0; 3]);
        fs::remove_file(dir.path().join("edges.tsv")).unwrap();
        let msg = load_bundle(dir.path(), LoadOptions::default()).unwrap_err().to_string();
        assert!(msg.contains("edges.tsv"), "{msg}");
    }

    #[test]
    fn unknown_edge_endpoint() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), THREE_NODES, "0\t1\n0\t9\n", 3, 1, &[0.0; 3]);
        let msg = load_bundle(dir.path(), LoadOptions::default()).unwrap_err().to_string();
        assert!(msg.contains("edges.tsv:2"), "{msg}");
    }

    #[test]
    fn write_then_load_is_identity() {
        let g = toy_graph(5, &[(0, 1), (1, 2), (4, 3)], false);
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&g, dir.path()).unwrap();
        let back = load_bundle(dir.path(), LoadOptions::default()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn split_file_maps_external_ids() {
        let dir = tempfile::tempdir().unwrap();
        let nodes = "{\"id\":10,\"text\":\"a\",\"label\":\"A\"}\n{\"id\":20,\"text\":\"b\",\"label\":\"B\"}\n{\"id\":30,\"text\":\"c\",\"label\":\"B\"}\n";
        write_raw(dir.path(), nodes, "10\t30\n", 3, 1, &[0.0; 3]);
        fs::write(dir.path().join("splits.json"), r#"{"labeled":[10,20],"test":[30]}"#).unwrap();
        let g = load_bundle(dir.path(), LoadOptions::default()).unwrap();
        assert_eq!(g.neighbors(0).unwrap(), &[2]);
        let split = load_split_file(dir.path(), &g).unwrap().unwrap();
        assert_eq!(split.labeled_ids(), &[0, 1]);
        assert_eq!(split.test_ids(), &[2]);
    }

    #[test]
    fn split_file_round_trip() {
        let g = toy_graph(6, &[(0, 1)], false);
        let dir = tempfile::tempdir().unwrap();
        let split = SplitSpec::new(vec![0, 3], vec![0, 3], vec![1, 4, 5], 1.0, 0).unwrap();
        write_split_file(dir.path(), &g, &split).unwrap();
        assert_eq!(load_split_file(dir.path(), &g).unwrap().unwrap(), split);
    }
}
