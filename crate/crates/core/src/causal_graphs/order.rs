use std::collections::BTreeSet;

use super::graph::MixedGraph;
use super::GraphError;

/// Strict partial order over node labels, stored transitively closed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartialOrder {
    less: BTreeSet<(String, String)>,
}

impl PartialOrder {
    /// Closes `pairs` transitively; fails if the closure relates a label to itself.
    pub fn new<I, S>(pairs: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut less: BTreeSet<(String, String)> =
            pairs.into_iter().map(|(a, b)| (a.into(), b.into())).collect();
        loop {
            let mut added = Vec::new();
            for (a, b) in &less {
                for (c, d) in less.range((b.clone(), String::new())..) {
                    if c != b {
                        break;
                    }
                    if !less.contains(&(a.clone(), d.clone())) {
                        added.push((a.clone(), d.clone()));
                    }
                }
            }
            if added.is_empty() {
                break;
            }
            less.extend(added);
        }
        if let Some((a, _)) = less.iter().find(|(a, b)| a == b) {
            return Err(GraphError::NotAnOrder(a.clone()));
        }
        Ok(Self { less })
    }

    /// Every label of layer `i` precedes every label of each later layer.
    pub fn from_layers<S: AsRef<str>>(layers: &[Vec<S>]) -> Result<Self, GraphError> {
        let mut pairs = Vec::new();
        for (i, lower) in layers.iter().enumerate() {
            for upper in &layers[i + 1..] {
                for a in lower {
                    for b in upper {
                        pairs.push((a.as_ref().to_string(), b.as_ref().to_string()));
                    }
                }
            }
        }
        Self::new(pairs)
    }

    pub fn precedes(&self, a: &str, b: &str) -> bool {
        self.less.contains(&(a.to_string(), b.to_string()))
    }

    pub fn comparable(&self, a: &str, b: &str) -> bool {
        self.precedes(a, b) || self.precedes(b, a)
    }

    pub fn pairs(&self) -> &BTreeSet<(String, String)> {
        &self.less
    }
}

/// True iff, in every graph, each proper ancestor precedes its descendant and
/// the endpoints of each bidirected edge are incomparable.
pub fn order_compatible(order: &PartialOrder, mags: &[MixedGraph]) -> bool {
    mags.iter().all(|g| {
        let anc = g.ancestor_matrix();
        let ancestors_ok = (0..g.len()).all(|v| {
            (0..g.len()).all(|u| !anc[v][u] || order.precedes(g.label(u), g.label(v)))
        });
        let bidirected_ok = g
            .bidirected
            .iter()
            .all(|&(a, b)| !order.comparable(g.label(a), g.label(b)));
        ancestors_ok && bidirected_ok
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closure_and_strictness() {
        let o = PartialOrder::new([("a", "b"), ("b", "c")]).unwrap();
        assert!(o.precedes("a", "c"));
        assert!(!o.precedes("c", "a"));
        assert!(PartialOrder::new([("a", "b"), ("b", "a")]).is_err());
    }

    #[test]
    fn conditions_on_single_graphs() {
        let mut g = MixedGraph::new(&["u", "v"]).unwrap();
        g.add_directed("u", "v").unwrap();
        let o = PartialOrder::new([("u", "v")]).unwrap();
        assert!(order_compatible(&o, std::slice::from_ref(&g)));

        let mut b = MixedGraph::new(&["u", "v"]).unwrap();
        b.add_bidirected("u", "v").unwrap();
        assert!(!order_compatible(&o, &[b.clone()]));
        assert!(order_compatible(&PartialOrder::default(), &[b]));
    }
}
