//! Prior knowledge graph: node/edge structure, assembly, and the text format.
//!
//! Node layout is fixed: one Global hub at index 0, then primary finding
//! nodes (with ground-truth labels), then text-mined auxiliary finding
//! nodes. The adjacency is symmetric and binary with no stored self-loops.

pub mod build;
pub mod mine;

pub use build::{build_graph_from_corpus, BuildStats};
pub use mine::{
    binarize, build_cooccurrence, lemmatize_tokens, match_concepts, select_auxiliary, Concept,
    ConceptCategory, ConceptMatch, CooccurrenceMatrix, Lemmatizer,
};

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Global,
    PrimaryFinding,
    AuxiliaryFinding,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeKind::Global => "Global",
            NodeKind::PrimaryFinding => "PrimaryFinding",
            NodeKind::AuxiliaryFinding => "AuxiliaryFinding",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for NodeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Global" => Ok(NodeKind::Global),
            "PrimaryFinding" => Ok(NodeKind::PrimaryFinding),
            "AuxiliaryFinding" => Ok(NodeKind::AuxiliaryFinding),
            other => Err(Error::format(format!("unknown node kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub name: String,
    pub kind: NodeKind,
}

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    nodes: Vec<GraphNode>,
    adj: Vec<u8>, // n*n, symmetric, zero diagonal
}

impl KnowledgeGraph {
    /// Build and validate: exactly one Global node at index 0, primary nodes
    /// before auxiliary nodes, unique names (case-insensitive).
    pub fn new(nodes: Vec<GraphNode>) -> Result<Self> {
        if nodes.is_empty() || nodes[0].kind != NodeKind::Global {
            return Err(Error::invalid("graph: node 0 must be the Global node"));
        }
        let mut seen_aux = false;
        let mut names = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if i > 0 && n.kind == NodeKind::Global {
                return Err(Error::invalid("graph: multiple Global nodes"));
            }
            match n.kind {
                NodeKind::AuxiliaryFinding => seen_aux = true,
                NodeKind::PrimaryFinding if seen_aux => {
                    return Err(Error::invalid(
                        "graph: primary nodes must precede auxiliary nodes",
                    ))
                }
                _ => {}
            }
            if let Some(prev) = names.insert(n.name.to_lowercase(), i) {
                return Err(Error::invalid(format!(
                    "graph: duplicate node name {:?} (indices {prev} and {i})",
                    n.name
                )));
            }
        }
        let n = nodes.len();
        Ok(KnowledgeGraph {
            nodes,
            adj: vec![0; n * n],
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_primary(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::PrimaryFinding)
            .count()
    }

    pub fn n_auxiliary(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::AuxiliaryFinding)
            .count()
    }

    /// All finding nodes (primary + auxiliary), i.e. everything but Global.
    pub fn n_findings(&self) -> usize {
        self.n_nodes() - 1
    }

    pub fn node(&self, i: usize) -> &GraphNode {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn primary_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::PrimaryFinding)
            .map(|n| n.name.clone())
            .collect()
    }

    pub fn index_by_name(&self, name: &str) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| n.name.eq_ignore_ascii_case(name))
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.nodes.len() + j] != 0
    }

    pub fn add_edge(&mut self, i: usize, j: usize) -> Result<()> {
        let n = self.nodes.len();
        if i >= n || j >= n {
            return Err(Error::invalid(format!("edge ({i},{j}) out of range")));
        }
        if i == j {
            return Err(Error::invalid(format!("self-loop on node {i}")));
        }
        self.adj[i * n + j] = 1;
        self.adj[j * n + i] = 1;
        Ok(())
    }

    pub fn n_edges(&self) -> usize {
        let n = self.nodes.len();
        let mut m = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                if self.adj[i * n + j] != 0 {
                    m += 1;
                }
            }
        }
        m
    }

    pub fn degree(&self, i: usize) -> usize {
        let n = self.nodes.len();
        (0..n).filter(|&j| self.adj[i * n + j] != 0).count()
    }

    /// Dense adjacency as a float tensor (symmetric, zero diagonal).
    pub fn adjacency(&self) -> Tensor {
        let n = self.nodes.len();
        Tensor::new(vec![n, n], self.adj.iter().map(|&v| v as f64).collect())
            .expect("adjacency is n*n by construction")
    }

    /// Serialize: `nodes N`, one `index<TAB>name<TAB>kind` line per node,
    /// `edges M`, one `i<TAB>j` line per edge with `i < j`, sorted. The
    /// writer is canonical, so write -> read -> write is byte-identical.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let n = self.nodes.len();
        writeln!(w, "nodes {n}")?;
        for (i, node) in self.nodes.iter().enumerate() {
            writeln!(w, "{i}\t{}\t{}", node.name, node.kind)?;
        }
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.adj[i * n + j] != 0 {
                    edges.push((i, j));
                }
            }
        }
        writeln!(w, "edges {}", edges.len())?;
        for (i, j) in edges {
            writeln!(w, "{i}\t{j}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = |l: Option<(usize, &str)>, word: &str| -> Result<(usize, usize)> {
            let (ln, s) = l.ok_or_else(|| Error::format("graph file: truncated"))?;
            let rest = s
                .strip_prefix(word)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or(Error::Parse {
                    line: ln + 1,
                    msg: format!("expected {word:?} header"),
                })?;
            let count = rest.trim().parse::<usize>().map_err(|_| Error::Parse {
                line: ln + 1,
                msg: format!("bad {word} count {rest:?}"),
            })?;
            Ok((ln, count))
        };
        let (_, n) = header(lines.next(), "nodes")?;
        let mut nodes = Vec::with_capacity(n);
        for k in 0..n {
            let (ln, s) = lines.next().ok_or(Error::format("graph file: truncated nodes"))?;
            let mut parts = s.split('\t');
            let idx: usize = parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or(Error::Parse {
                    line: ln + 1,
                    msg: "bad node index".into(),
                })?;
            if idx != k {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("node index {idx}, expected {k}"),
                });
            }
            let name = parts.next().ok_or(Error::Parse {
                line: ln + 1,
                msg: "missing node name".into(),
            })?;
            let kind: NodeKind = parts
                .next()
                .ok_or(Error::Parse {
                    line: ln + 1,
                    msg: "missing node kind".into(),
                })?
                .parse()?;
            nodes.push(GraphNode {
                name: name.to_string(),
                kind,
            });
        }
        let mut graph = KnowledgeGraph::new(nodes)?;
        let (_, m) = header(lines.next(), "edges")?;
        for _ in 0..m {
            let (ln, s) = lines.next().ok_or(Error::format("graph file: truncated edges"))?;
            let mut parts = s.split('\t');
            let parse = |p: Option<&str>| -> Result<usize> {
                p.and_then(|v| v.parse().ok()).ok_or(Error::Parse {
                    line: ln + 1,
                    msg: "bad edge line".into(),
                })
            };
            let i = parse(parts.next())?;
            let j = parse(parts.next())?;
            if i >= j {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("edge ({i},{j}) must satisfy i < j"),
                });
            }
            graph.add_edge(i, j)?;
        }
        Ok(graph)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Combine the manual sub-graph with mined auxiliary nodes and edges.
///
/// The manual graph must contain only the Global node and primary findings.
/// Auxiliary nodes are appended after the primary block; mined edges
/// (name pairs) are applied wherever both endpoints resolve to finding
/// nodes; manual edges are preserved and the Global hub is connected to
/// every finding node. A mined node that collides with a manual name is an
/// error: auxiliary selection should have excluded it.
pub fn merge_graph(
    manual: &KnowledgeGraph,
    mined_nodes: &[String],
    mined_edges: &[(String, String)],
) -> Result<KnowledgeGraph> {
    if manual.n_auxiliary() != 0 {
        return Err(Error::invalid(
            "merge_graph: manual graph already contains auxiliary nodes",
        ));
    }
    let mut nodes = manual.nodes.clone();
    for name in mined_nodes {
        if manual.index_by_name(name).is_some() {
            return Err(Error::invalid(format!(
                "merge_graph: mined node {name:?} collides with a manual node"
            )));
        }
        nodes.push(GraphNode {
            name: name.clone(),
            kind: NodeKind::AuxiliaryFinding,
        });
    }
    let mut graph = KnowledgeGraph::new(nodes)?;
    // manual edges
    let nm = manual.n_nodes();
    for i in 0..nm {
        for j in (i + 1)..nm {
            if manual.has_edge(i, j) {
                graph.add_edge(i, j)?;
            }
        }
    }
    // global hub
    for k in 1..graph.n_nodes() {
        graph.add_edge(0, k)?;
    }
    // mined edges, endpoints resolved by name
    for (a, b) in mined_edges {
        if let (Some(i), Some(j)) = (graph.index_by_name(a), graph.index_by_name(b)) {
            if i != j && i != 0 && j != 0 {
                graph.add_edge(i, j)?;
            }
        }
    }
    Ok(graph)
}

/// The default manual sub-graph: 20 curated finding names, each connected to
/// the Global hub, no inter-finding edges.
pub fn default_manual_graph() -> KnowledgeGraph {
    KnowledgeGraph::parse(include_str!("../../data/graph20.txt"))
        .expect("embedded manual graph is valid")
}

/// The default flat lexicon standing in for an ontology export.
pub fn default_lexicon() -> Vec<Concept> {
    mine::parse_lexicon(include_str!("../../data/lexicon.tsv"))
        .expect("embedded lexicon is valid")
}
