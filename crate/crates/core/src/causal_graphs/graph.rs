use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use super::GraphError;

/// Directed plus bidirected edges over a labelled node list.
///
/// Edges are stored by node index; bidirected pairs are normalized to
/// `(min, max)`. A DAG is a `MixedGraph` with no bidirected edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedGraph {
    nodes: Vec<String>,
    index: BTreeMap<String, usize>,
    pub(crate) directed: BTreeSet<(usize, usize)>,
    pub(crate) bidirected: BTreeSet<(usize, usize)>,
}

fn ordered(u: usize, v: usize) -> (usize, usize) {
    if u < v {
        (u, v)
    } else {
        (v, u)
    }
}

impl MixedGraph {
    pub fn new<S: AsRef<str>>(nodes: &[S]) -> Result<Self, GraphError> {
        let mut index = BTreeMap::new();
        let mut labels = Vec::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            let label = n.as_ref();
            if label.is_empty() || label.contains(',') || label.chars().any(char::is_whitespace) {
                return Err(GraphError::BadLabel(label.to_string()));
            }
            if index.insert(label.to_string(), i).is_some() {
                return Err(GraphError::DuplicateNode(label.to_string()));
            }
            labels.push(label.to_string());
        }
        Ok(Self {
            nodes: labels,
            index,
            directed: BTreeSet::new(),
            bidirected: BTreeSet::new(),
        })
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.nodes[i]
    }

    pub fn index_of(&self, label: &str) -> Result<usize, GraphError> {
        self.index
            .get(label)
            .copied()
            .ok_or_else(|| GraphError::UnknownNode(label.to_string()))
    }

    pub fn add_directed(&mut self, u: &str, v: &str) -> Result<(), GraphError> {
        let (a, b) = (self.index_of(u)?, self.index_of(v)?);
        self.insert_directed(a, b)
    }

    pub fn add_bidirected(&mut self, u: &str, v: &str) -> Result<(), GraphError> {
        let (a, b) = (self.index_of(u)?, self.index_of(v)?);
        self.insert_bidirected(a, b)
    }

    pub(crate) fn insert_directed(&mut self, a: usize, b: usize) -> Result<(), GraphError> {
        if a == b {
            return Err(GraphError::SelfLoop(self.nodes[a].clone()));
        }
        if self.bidirected.contains(&ordered(a, b)) {
            return Err(self.conflict(a, b));
        }
        self.directed.insert((a, b));
        Ok(())
    }

    pub(crate) fn insert_bidirected(&mut self, a: usize, b: usize) -> Result<(), GraphError> {
        if a == b {
            return Err(GraphError::SelfLoop(self.nodes[a].clone()));
        }
        if self.directed.contains(&(a, b)) || self.directed.contains(&(b, a)) {
            return Err(self.conflict(a, b));
        }
        self.bidirected.insert(ordered(a, b));
        Ok(())
    }

    fn conflict(&self, a: usize, b: usize) -> GraphError {
        GraphError::EdgeConflict(self.nodes[a].clone(), self.nodes[b].clone())
    }

    pub fn has_directed(&self, u: &str, v: &str) -> bool {
        match (self.index.get(u), self.index.get(v)) {
            (Some(&a), Some(&b)) => self.directed.contains(&(a, b)),
            _ => false,
        }
    }

    pub fn has_bidirected(&self, u: &str, v: &str) -> bool {
        match (self.index.get(u), self.index.get(v)) {
            (Some(&a), Some(&b)) => self.bidirected.contains(&ordered(a, b)),
            _ => false,
        }
    }

    pub(crate) fn adjacent_idx(&self, a: usize, b: usize) -> bool {
        self.directed.contains(&(a, b))
            || self.directed.contains(&(b, a))
            || self.bidirected.contains(&ordered(a, b))
    }

    pub fn adjacent(&self, u: &str, v: &str) -> bool {
        match (self.index.get(u), self.index.get(v)) {
            (Some(&a), Some(&b)) => self.adjacent_idx(a, b),
            _ => false,
        }
    }

    /// Directed edges as label pairs, in index order.
    pub fn directed_edges(&self) -> BTreeSet<(String, String)> {
        self.directed
            .iter()
            .map(|&(a, b)| (self.nodes[a].clone(), self.nodes[b].clone()))
            .collect()
    }

    /// Bidirected edges as label pairs, each with the lexicographically
    /// smaller label first.
    pub fn bidirected_edges(&self) -> BTreeSet<(String, String)> {
        self.bidirected
            .iter()
            .map(|&(a, b)| {
                let (x, y) = (&self.nodes[a], &self.nodes[b]);
                if x <= y {
                    (x.clone(), y.clone())
                } else {
                    (y.clone(), x.clone())
                }
            })
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.directed.len() + self.bidirected.len()
    }

    pub(crate) fn parent_lists(&self) -> Vec<Vec<usize>> {
        let mut pa = vec![Vec::new(); self.len()];
        for &(a, b) in &self.directed {
            pa[b].push(a);
        }
        pa
    }

    /// `anc[v][u]` is true iff `u` is a proper ancestor of `v` along directed edges.
    pub(crate) fn ancestor_matrix(&self) -> Vec<Vec<bool>> {
        let pa = self.parent_lists();
        let n = self.len();
        let mut anc = vec![vec![false; n]; n];
        for (v, row) in anc.iter_mut().enumerate() {
            let mut stack = pa[v].clone();
            while let Some(u) = stack.pop() {
                if !row[u] {
                    row[u] = true;
                    stack.extend(pa[u].iter().copied());
                }
            }
        }
        anc
    }

    /// Indices that are ancestors of some member of `set`, members included.
    pub(crate) fn ancestral_closure(&self, set: &[usize]) -> Vec<bool> {
        let pa = self.parent_lists();
        let mut mark = vec![false; self.len()];
        let mut stack: Vec<usize> = set.to_vec();
        while let Some(u) = stack.pop() {
            if !mark[u] {
                mark[u] = true;
                stack.extend(pa[u].iter().copied());
            }
        }
        mark
    }

    /// Proper ancestors of `v`.
    pub fn ancestors(&self, v: &str) -> Result<BTreeSet<String>, GraphError> {
        let i = self.index_of(v)?;
        let anc = self.ancestral_closure(&[i]);
        Ok(anc
            .iter()
            .enumerate()
            .filter(|&(j, &m)| m && j != i)
            .map(|(j, _)| self.nodes[j].clone())
            .collect())
    }

    pub fn is_ancestor(&self, u: &str, v: &str) -> Result<bool, GraphError> {
        Ok(self.ancestors(v)?.contains(u))
    }

    /// One directed edge lying on a directed cycle, if any.
    pub(crate) fn cycle_edge(&self) -> Option<(usize, usize)> {
        let anc = self.ancestor_matrix();
        self.directed.iter().copied().find(|&(a, b)| anc[a][b])
    }

    pub fn is_acyclic(&self) -> bool {
        self.cycle_edge().is_none()
    }

    /// Copy without `label` and all its incident edges; remaining indices shift down.
    pub fn without_node(&self, label: &str) -> Result<Self, GraphError> {
        let drop = self.index_of(label)?;
        let keep: Vec<&String> = self.nodes.iter().filter(|n| *n != label).collect();
        let mut out = MixedGraph::new(&keep)?;
        let shift = |i: usize| if i > drop { i - 1 } else { i };
        out.directed = self
            .directed
            .iter()
            .filter(|&&(a, b)| a != drop && b != drop)
            .map(|&(a, b)| (shift(a), shift(b)))
            .collect();
        out.bidirected = self
            .bidirected
            .iter()
            .filter(|&&(a, b)| a != drop && b != drop)
            .map(|&(a, b)| (shift(a), shift(b)))
            .collect();
        Ok(out)
    }

    /// `nodes: a,b,...` followed by one `u -> v` or `u <-> v` line per edge.
    pub fn to_text(&self) -> String {
        let mut out = format!("nodes: {}\n", self.nodes.join(","));
        for &(a, b) in &self.directed {
            let _ = writeln!(out, "{} -> {}", self.nodes[a], self.nodes[b]);
        }
        for &(a, b) in &self.bidirected {
            let _ = writeln!(out, "{} <-> {}", self.nodes[a], self.nodes[b]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, GraphError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (_, header) = lines.next().ok_or(GraphError::Parse {
            line: 1,
            msg: "empty document".into(),
        })?;
        let list = header.strip_prefix("nodes:").ok_or(GraphError::Parse {
            line: 1,
            msg: "expected `nodes:` header".into(),
        })?;
        let labels: Vec<&str> = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        let mut g = MixedGraph::new(&labels)?;
        for (line, l) in lines {
            let parse_err = |msg: String| GraphError::Parse { line, msg };
            if let Some((u, v)) = l.split_once("<->") {
                g.add_bidirected(u.trim(), v.trim())
                    .map_err(|e| parse_err(e.to_string()))?;
            } else if let Some((u, v)) = l.split_once("->") {
                g.add_directed(u.trim(), v.trim())
                    .map_err(|e| parse_err(e.to_string()))?;
            } else {
                return Err(parse_err(format!("unrecognized edge line {l:?}")));
            }
        }
        Ok(g)
    }
}
