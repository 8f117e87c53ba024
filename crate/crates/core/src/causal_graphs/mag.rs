use std::collections::BTreeSet;

use super::graph::MixedGraph;
use super::GraphError;

/// Largest graph `verify_mag` accepts; maximality falls back to subset
/// enumeration, which is exponential in the node count.
pub const MAX_VERIFY_NODES: usize = 20;

/// Marginalizes `latent` out of `dag`, producing a MAG over the remaining nodes.
///
/// 1. Every pair of children of the latent gets a bidirected edge.
/// 2. For `t -> u` in the DAG (with `t` observed) and a bidirected `u <-> v`
///    where `u` is an ancestor of `v`, add `t -> v`.
/// 3. A bidirected `u <-> v` with `u` an ancestor of `v` becomes `u -> v`.
pub fn dag_to_mag(dag: &MixedGraph, latent: &str) -> Result<MixedGraph, GraphError> {
    if !dag.bidirected.is_empty() {
        return Err(GraphError::NotADag("input has bidirected edges".into()));
    }
    if let Some((a, b)) = dag.cycle_edge() {
        return Err(GraphError::NotADag(format!(
            "directed cycle through {} -> {}",
            dag.label(a),
            dag.label(b)
        )));
    }
    let e = dag.index_of(latent)?;
    if let Some(&(p, _)) = dag.directed.iter().find(|&&(_, b)| b == e) {
        return Err(GraphError::LatentHasParents {
            latent: latent.to_string(),
            parent: dag.label(p).to_string(),
        });
    }

    let anc = dag.ancestor_matrix();
    let is_anc = |u: usize, v: usize| anc[v][u];
    let children: Vec<usize> = dag
        .directed
        .iter()
        .filter(|&&(a, _)| a == e)
        .map(|&(_, b)| b)
        .collect();

    let mut bidirected: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (i, &u) in children.iter().enumerate() {
        for &v in &children[i + 1..] {
            bidirected.insert((u.min(v), u.max(v)));
        }
    }

    let mut directed: BTreeSet<(usize, usize)> = dag
        .directed
        .iter()
        .copied()
        .filter(|&(a, b)| a != e && b != e)
        .collect();

    for &(x, y) in &bidirected {
        for (u, v) in [(x, y), (y, x)] {
            if !is_anc(u, v) {
                continue;
            }
            for &(t, uu) in &dag.directed {
                if uu == u && t != e {
                    directed.insert((t, v));
                }
            }
        }
    }

    let mut kept = BTreeSet::new();
    for &(x, y) in &bidirected {
        if is_anc(x, y) {
            directed.insert((x, y));
        } else if is_anc(y, x) {
            directed.insert((y, x));
        } else {
            kept.insert((x, y));
        }
    }

    let mut full = dag.clone();
    full.directed = directed;
    full.bidirected = kept;
    full.without_node(latent)
}

/// Edgewise union of graphs over one shared node list.
pub fn union_mags(mags: &[MixedGraph]) -> Result<MixedGraph, GraphError> {
    let first = mags.first().ok_or(GraphError::EmptyInput)?;
    let mut out = first.clone();
    for g in &mags[1..] {
        if g.nodes() != first.nodes() {
            return Err(GraphError::NodeMismatch);
        }
        out.directed.extend(g.directed.iter().copied());
        out.bidirected.extend(g.bidirected.iter().copied());
    }
    if let Some(&(a, b)) = out
        .bidirected
        .iter()
        .find(|&&(a, b)| out.directed.contains(&(a, b)) || out.directed.contains(&(b, a)))
    {
        return Err(GraphError::EdgeConflict(
            out.label(a).to_string(),
            out.label(b).to_string(),
        ));
    }
    Ok(out)
}

/// Edge endpoints seen from one side: does the edge carry an arrowhead there?
#[derive(Clone, Debug)]
struct Incidence {
    other: usize,
    head_here: bool,
    head_there: bool,
}

/// Adjacency lists with endpoint marks, built once per graph.
pub(crate) struct Skeleton {
    incident: Vec<Vec<Incidence>>,
    parents: Vec<Vec<usize>>,
}

impl Skeleton {
    pub(crate) fn new(g: &MixedGraph) -> Self {
        let mut incident = vec![Vec::new(); g.len()];
        for &(a, b) in &g.directed {
            incident[a].push(Incidence { other: b, head_here: false, head_there: true });
            incident[b].push(Incidence { other: a, head_here: true, head_there: false });
        }
        for &(a, b) in &g.bidirected {
            incident[a].push(Incidence { other: b, head_here: true, head_there: true });
            incident[b].push(Incidence { other: a, head_here: true, head_there: true });
        }
        Self { incident, parents: g.parent_lists() }
    }

    fn ancestral_closure(&self, z: &[bool]) -> Vec<bool> {
        let mut mark = vec![false; z.len()];
        let mut stack: Vec<usize> = (0..z.len()).filter(|&i| z[i]).collect();
        while let Some(u) = stack.pop() {
            if !mark[u] {
                mark[u] = true;
                stack.extend(self.parents[u].iter().copied());
            }
        }
        mark
    }

    /// Reachability over (node, entered-through-arrowhead) states. A walk may
    /// pass a collider iff it lies in An(Z) and a non-collider iff it is
    /// outside Z; such a walk exists iff an m-connecting path exists.
    pub(crate) fn connected(&self, x: &[bool], y: &[bool], z: &[bool]) -> bool {
        let n = x.len();
        let an_z = self.ancestral_closure(z);
        let mut seen = vec![[false; 2]; n];
        let mut stack = Vec::new();
        for s in (0..n).filter(|&i| x[i]) {
            for inc in &self.incident[s] {
                stack.push((inc.other, inc.head_there));
            }
        }
        while let Some((w, into)) = stack.pop() {
            if seen[w][usize::from(into)] {
                continue;
            }
            seen[w][usize::from(into)] = true;
            if y[w] {
                return true;
            }
            if x[w] {
                continue;
            }
            for inc in &self.incident[w] {
                let collider = into && inc.head_here;
                let passable = if collider { an_z[w] } else { !z[w] };
                if passable && !seen[inc.other][usize::from(inc.head_there)] {
                    stack.push((inc.other, inc.head_there));
                }
            }
        }
        false
    }
}

fn index_set(g: &MixedGraph, labels: &BTreeSet<String>) -> Result<Vec<bool>, GraphError> {
    let mut mask = vec![false; g.len()];
    for l in labels {
        mask[g.index_of(l)?] = true;
    }
    Ok(mask)
}

fn check_disjoint(
    x: &BTreeSet<String>,
    y: &BTreeSet<String>,
    z: &BTreeSet<String>,
) -> Result<(), GraphError> {
    for (a, b) in [(x, y), (x, z), (y, z)] {
        if let Some(common) = a.intersection(b).next() {
            return Err(GraphError::OverlappingSets(common.clone()));
        }
    }
    Ok(())
}

/// True iff every path between `x` and `y` is blocked given `z`: a collider
/// blocks unless it has a descendant (itself included) in `z`, a
/// non-collider blocks iff it is in `z`.
pub fn m_separated(
    g: &MixedGraph,
    x: &BTreeSet<String>,
    y: &BTreeSet<String>,
    z: &BTreeSet<String>,
) -> Result<bool, GraphError> {
    check_disjoint(x, y, z)?;
    let (xm, ym, zm) = (index_set(g, x)?, index_set(g, y)?, index_set(g, z)?);
    Ok(!Skeleton::new(g).connected(&xm, &ym, &zm))
}

/// Same criterion as [`m_separated`], evaluated by enumerating every simple
/// path. Exponential; kept as a cross-check for small graphs.
pub fn m_separated_by_paths(
    g: &MixedGraph,
    x: &BTreeSet<String>,
    y: &BTreeSet<String>,
    z: &BTreeSet<String>,
) -> Result<bool, GraphError> {
    check_disjoint(x, y, z)?;
    let (xm, ym, zm) = (index_set(g, x)?, index_set(g, y)?, index_set(g, z)?);
    let sk = Skeleton::new(g);
    let an_z = sk.ancestral_closure(&zm);

    // (node, head at node on the edge we arrived by)
    fn dfs(
        sk: &Skeleton,
        node: usize,
        into: bool,
        on_path: &mut Vec<bool>,
        ym: &[bool],
        zm: &[bool],
        an_z: &[bool],
    ) -> bool {
        if ym[node] {
            return true;
        }
        for inc in &sk.incident[node] {
            if on_path[inc.other] {
                continue;
            }
            let collider = into && inc.head_here;
            let open = if collider { an_z[node] } else { !zm[node] };
            if !open {
                continue;
            }
            on_path[inc.other] = true;
            let found = dfs(sk, inc.other, inc.head_there, on_path, ym, zm, an_z);
            on_path[inc.other] = false;
            if found {
                return true;
            }
        }
        false
    }

    for s in (0..g.len()).filter(|&i| xm[i]) {
        let mut on_path = vec![false; g.len()];
        on_path[s] = true;
        for inc in &sk.incident[s] {
            if on_path[inc.other] {
                continue;
            }
            on_path[inc.other] = true;
            if dfs(&sk, inc.other, inc.head_there, &mut on_path, &ym, &zm, &an_z) {
                return Ok(false);
            }
            on_path[inc.other] = false;
        }
    }
    Ok(true)
}

/// Outcome of [`verify_mag`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MagReport {
    pub ancestral: bool,
    pub maximal: bool,
    /// First violating pair: an ancestral violation if there is one, else
    /// a non-adjacent pair with no separating set.
    pub witness: Option<(String, String)>,
}

impl MagReport {
    pub fn is_mag(&self) -> bool {
        self.ancestral && self.maximal
    }
}

/// Checks the ancestral property (no directed cycle, no `u <-> v` with `u`
/// an ancestor of `v`) and maximality (every non-adjacent pair is
/// m-separated by some subset of the other nodes).
pub fn verify_mag(g: &MixedGraph) -> Result<MagReport, GraphError> {
    let n = g.len();
    if n > MAX_VERIFY_NODES {
        return Err(GraphError::TooLarge { nodes: n, limit: MAX_VERIFY_NODES });
    }
    let pair = |a: usize, b: usize| (g.label(a).to_string(), g.label(b).to_string());

    let anc = g.ancestor_matrix();
    let mut ancestral_witness = g.cycle_edge().map(|(a, b)| pair(a, b));
    if ancestral_witness.is_none() {
        ancestral_witness = g
            .bidirected
            .iter()
            .find(|&&(a, b)| anc[a][b] || anc[b][a])
            .map(|&(a, b)| if anc[b][a] { pair(a, b) } else { pair(b, a) });
    }

    let sk = Skeleton::new(g);
    let mut maximal_witness = None;
    'pairs: for u in 0..n {
        for v in u + 1..n {
            if g.adjacent_idx(u, v) || separable(&sk, g, u, v) {
                continue;
            }
            maximal_witness = Some(pair(u, v));
            break 'pairs;
        }
    }

    Ok(MagReport {
        ancestral: ancestral_witness.is_none(),
        maximal: maximal_witness.is_none(),
        witness: ancestral_witness.or(maximal_witness),
    })
}

/// Tries An({u,v}) \ {u,v} first, then every subset of the remaining nodes.
fn separable(sk: &Skeleton, g: &MixedGraph, u: usize, v: usize) -> bool {
    let n = g.len();
    let mut x = vec![false; n];
    let mut y = vec![false; n];
    x[u] = true;
    y[v] = true;

    let mut z = g.ancestral_closure(&[u, v]);
    z[u] = false;
    z[v] = false;
    if !sk.connected(&x, &y, &z) {
        return true;
    }

    let rest: Vec<usize> = (0..n).filter(|&i| i != u && i != v).collect();
    for bits in 0u64..(1u64 << rest.len()) {
        for (k, &i) in rest.iter().enumerate() {
            z[i] = bits >> k & 1 == 1;
        }
        if !sk.connected(&x, &y, &z) {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(labels: &[&str]) -> BTreeSet<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    fn graph(nodes: &[&str], directed: &[(&str, &str)], bi: &[(&str, &str)]) -> MixedGraph {
        let mut g = MixedGraph::new(nodes).unwrap();
        for (u, v) in directed {
            g.add_directed(u, v).unwrap();
        }
        for (u, v) in bi {
            g.add_bidirected(u, v).unwrap();
        }
        g
    }

    #[test]
    fn chain_and_collider() {
        let chain = graph(&["u", "m", "v"], &[("u", "m"), ("m", "v")], &[]);
        assert!(m_separated(&chain, &set(&["u"]), &set(&["v"]), &set(&["m"])).unwrap());
        assert!(!m_separated(&chain, &set(&["u"]), &set(&["v"]), &set(&[])).unwrap());

        let collider = graph(&["u", "m", "v"], &[("u", "m"), ("v", "m")], &[]);
        assert!(m_separated(&collider, &set(&["u"]), &set(&["v"]), &set(&[])).unwrap());
        assert!(!m_separated(&collider, &set(&["u"]), &set(&["v"]), &set(&["m"])).unwrap());
    }

    #[test]
    fn collider_opened_by_descendant() {
        let g = graph(&["u", "m", "v", "d"], &[("u", "m"), ("v", "m"), ("m", "d")], &[]);
        assert!(!m_separated(&g, &set(&["u"]), &set(&["v"]), &set(&["d"])).unwrap());
        assert!(!m_separated_by_paths(&g, &set(&["u"]), &set(&["v"]), &set(&["d"])).unwrap());
    }

    #[test]
    fn bidirected_edges_form_colliders() {
        let g = graph(&["u", "m", "v"], &[], &[("u", "m"), ("m", "v")]);
        assert!(m_separated(&g, &set(&["u"]), &set(&["v"]), &set(&[])).unwrap());
        assert!(!m_separated(&g, &set(&["u"]), &set(&["v"]), &set(&["m"])).unwrap());
    }

    #[test]
    fn overlapping_sets_fail() {
        let g = graph(&["u", "v"], &[], &[]);
        assert!(m_separated(&g, &set(&["u"]), &set(&["u"]), &set(&[])).is_err());
    }

    #[test]
    fn latent_without_children_is_just_removed() {
        let g = graph(&["e", "x", "y"], &[("x", "y")], &[]);
        let m = dag_to_mag(&g, "e").unwrap();
        assert_eq!(m.nodes(), ["x", "y"]);
        assert!(m.bidirected_edges().is_empty());
        assert!(m.has_directed("x", "y"));
    }

    #[test]
    fn latent_with_parent_is_rejected() {
        let g = graph(&["e", "x"], &[("x", "e")], &[]);
        assert!(matches!(dag_to_mag(&g, "e"), Err(GraphError::LatentHasParents { .. })));
    }

    #[test]
    fn confounded_chain_turns_into_directed_edge() {
        // e -> x, e -> y, x -> y: x is an ancestor of y, so x <-> y becomes x -> y.
        let g = graph(&["e", "t", "x", "y"], &[("e", "x"), ("e", "y"), ("x", "y"), ("t", "x")], &[]);
        let m = dag_to_mag(&g, "e").unwrap();
        assert!(m.bidirected_edges().is_empty());
        assert!(m.has_directed("x", "y"));
        assert!(m.has_directed("t", "y"));
    }

    #[test]
    fn almost_directed_cycle_is_not_ancestral() {
        let mut g = graph(&["u", "m", "v"], &[("u", "m"), ("m", "v")], &[]);
        g.add_bidirected("u", "v").unwrap();
        let r = verify_mag(&g).unwrap();
        assert!(!r.ancestral);
        assert_eq!(r.witness, Some(("u".into(), "v".into())));
    }

    #[test]
    fn inducing_path_breaks_maximality() {
        // a <-> b <-> c <-> d where b is an ancestor of d and c of a.
        let g = graph(
            &["a", "b", "c", "d"],
            &[("b", "d"), ("c", "a")],
            &[("a", "b"), ("b", "c"), ("c", "d")],
        );
        let r = verify_mag(&g).unwrap();
        assert!(r.ancestral);
        assert!(!r.maximal);
        assert_eq!(r.witness, Some(("a".into(), "d".into())));
    }

    #[test]
    fn empty_graph_is_a_mag() {
        let g = MixedGraph::new::<&str>(&[]).unwrap();
        assert!(verify_mag(&g).unwrap().is_mag());
    }
}
