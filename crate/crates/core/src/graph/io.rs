//! Text formats for edges, sparse features and labels.
//!
//! * edges: `u<TAB>v` per line, undirected, `#` starts a comment
//! * features: header `nodes=<N> features=<D> binary={0|1}`, then
//!   `node<TAB>feature[<TAB>value]` triplets (value defaults to 1.0)
//! * labels: `node<TAB>class`
//!
//! Node ids are the external ids `0..N` declared by the features header. The
//! loaded graph is restricted to its largest connected component and
//! re-indexed densely in ascending id order.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::AttributedGraph;
use crate::error::{Error, Result};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Non-empty, comment-stripped lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: Option<&str>, what: &str) -> Result<T> {
    let field = field.ok_or_else(|| parse_err(path, line, format!("missing {what}")))?;
    field.parse().map_err(|_| parse_err(path, line, format!("invalid {what} {field:?}")))
}

struct FeatureHeader {
    nodes: usize,
    features: usize,
    binary: bool,
}

fn parse_header(path: &Path, line: usize, text: &str) -> Result<FeatureHeader> {
    let mut nodes = None;
    let mut features = None;
    let mut binary = None;
    for token in text.split_whitespace() {
        let (key, value) =
            token.split_once('=').ok_or_else(|| parse_err(path, line, format!("bad header token {token:?}")))?;
        match key {
            "nodes" => nodes = Some(parse_field::<usize>(path, line, Some(value), "node count")?),
            "features" => features = Some(parse_field::<usize>(path, line, Some(value), "feature count")?),
            "binary" => {
                binary = Some(match value {
                    "0" => false,
                    "1" => true,
                    _ => return Err(parse_err(path, line, "binary must be 0 or 1")),
                })
            }
            _ => return Err(parse_err(path, line, format!("unknown header key {key:?}"))),
        }
    }
    match (nodes, features, binary) {
        (Some(nodes), Some(features), Some(binary)) => Ok(FeatureHeader { nodes, features, binary }),
        _ => Err(parse_err(path, line, "header needs nodes=, features= and binary=")),
    }
}

/// Loads a dataset and restricts it to its largest connected component.
///
/// Nodes absent from the edge list are isolated and therefore dropped; every
/// node that survives must carry a label.
pub fn load_dataset(edges: &Path, features: &Path, labels: &Path) -> Result<AttributedGraph> {
    let feat_text = read(features)?;
    let mut lines = content_lines(&feat_text);
    let (hline, htext) = lines.next().ok_or_else(|| parse_err(features, 1, "missing header"))?;
    let header = parse_header(features, hline, htext)?;
    let n = header.nodes;
    if n == 0 {
        return Err(Error::InvalidGraph("empty graph".into()));
    }
    let mut x = Array2::zeros((n, header.features));
    for (line, text) in lines {
        let mut f = text.split_whitespace();
        let node: usize = parse_field(features, line, f.next(), "node")?;
        let col: usize = parse_field(features, line, f.next(), "feature")?;
        let value: f64 = match f.next() {
            Some(v) => parse_field(features, line, Some(v), "value")?,
            None => 1.0,
        };
        if node >= n {
            return Err(parse_err(features, line, format!("node {node} beyond nodes={n}")));
        }
        if col >= header.features {
            return Err(parse_err(features, line, format!("feature {col} beyond features={}", header.features)));
        }
        if header.binary && value != 0.0 && value != 1.0 {
            return Err(parse_err(features, line, format!("non-binary value {value}")));
        }
        if !value.is_finite() {
            return Err(parse_err(features, line, "non-finite value"));
        }
        x[[node, col]] = value;
    }

    let edge_text = read(edges)?;
    let mut adjacency = Array2::zeros((n, n));
    let mut edge_lines = 0usize;
    for (line, text) in content_lines(&edge_text) {
        let mut f = text.split_whitespace();
        let u: usize = parse_field(edges, line, f.next(), "source node")?;
        let v: usize = parse_field(edges, line, f.next(), "target node")?;
        if f.next().is_some() {
            return Err(parse_err(edges, line, "expected two columns"));
        }
        if u >= n || v >= n {
            return Err(parse_err(edges, line, format!("node {} beyond nodes={n}", u.max(v))));
        }
        if u != v {
            adjacency[[u, v]] = 1.0;
            adjacency[[v, u]] = 1.0;
            edge_lines += 1;
        }
    }
    if edge_lines == 0 {
        return Err(Error::InvalidGraph("edge list is empty".into()));
    }

    let label_text = read(labels)?;
    let mut label_of: Vec<Option<usize>> = vec![None; n];
    for (line, text) in content_lines(&label_text) {
        let mut f = text.split_whitespace();
        let node: usize = parse_field(labels, line, f.next(), "node")?;
        let class: usize = parse_field(labels, line, f.next(), "class")?;
        if node >= n {
            return Err(parse_err(labels, line, format!("node {node} beyond nodes={n}")));
        }
        label_of[node] = Some(class);
    }
    let num_classes = label_of.iter().flatten().max().map_or(0, |&c| c + 1);
    if num_classes == 0 {
        return Err(Error::InvalidGraph("no labels".into()));
    }

    // Connectivity does not depend on labels, so find the component first.
    let skeleton = AttributedGraph::new(adjacency, x, header.binary, vec![0; n], num_classes)?;
    let (_, kept) = skeleton.largest_connected_component();
    if let Some(&missing) = kept.iter().find(|&&u| label_of[u].is_none()) {
        return Err(Error::InvalidGraph(format!("node {missing} has no label")));
    }
    let labels: Vec<usize> = label_of.iter().map(|c| c.unwrap_or(0)).collect();
    let full = AttributedGraph { labels, ..skeleton };
    Ok(full.induced(&kept))
}

pub fn write_edges(graph: &AttributedGraph, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (u, v) in graph.edges() {
        writeln!(out, "{}\t{}", graph.ids[u], graph.ids[v]).unwrap();
    }
    write(path, &out)
}

/// Writes the three dataset files using the graph's external ids.
pub fn save_dataset(graph: &AttributedGraph, edges: &Path, features: &Path, labels: &Path) -> Result<()> {
    write_edges(graph, edges)?;
    let nodes = graph.ids.iter().max().map_or(0, |&m| m + 1);
    let mut out =
        format!("nodes={nodes} features={} binary={}\n", graph.num_features(), u8::from(graph.binary_features));
    for (u, row) in graph.features.rows().into_iter().enumerate() {
        for (f, &x) in row.iter().enumerate() {
            if x == 1.0 {
                writeln!(out, "{}\t{f}", graph.ids[u]).unwrap();
            } else if x != 0.0 {
                writeln!(out, "{}\t{f}\t{x}", graph.ids[u]).unwrap();
            }
        }
    }
    write(features, &out)?;
    let mut out = String::new();
    for (u, &c) in graph.labels.iter().enumerate() {
        writeln!(out, "{}\t{c}", graph.ids[u]).unwrap();
    }
    write(labels, &out)
}

/// Reads a split file (`node<TAB>{L|U}`, external ids).
pub fn read_split(graph: &AttributedGraph, path: &Path) -> Result<super::DataSplit> {
    let text = read(path)?;
    let mut labeled = BTreeSet::new();
    let mut unlabeled = BTreeSet::new();
    for (line, text) in content_lines(&text) {
        let mut f = text.split_whitespace();
        let id: u64 = parse_field(path, line, f.next(), "node")?;
        let u = graph.index_of_id(id).ok_or_else(|| parse_err(path, line, format!("node {id} not in graph")))?;
        match f.next() {
            Some("L") => labeled.insert(u),
            Some("U") => unlabeled.insert(u),
            _ => return Err(parse_err(path, line, "expected L or U")),
        };
    }
    super::DataSplit::from_sets(graph.num_nodes(), labeled.into_iter().collect(), unlabeled.into_iter().collect(), 0)
}

pub fn write_split(graph: &AttributedGraph, split: &super::DataSplit, path: &Path) -> Result<()> {
    let mut tags = vec!['U'; graph.num_nodes()];
    for &u in &split.labeled {
        tags[u] = 'L';
    }
    let mut out = String::new();
    for (u, t) in tags.iter().enumerate() {
        writeln!(out, "{}\t{t}", graph.ids[u]).unwrap();
    }
    write(path, &out)
}
