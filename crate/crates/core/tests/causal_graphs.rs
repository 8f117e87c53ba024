use std::collections::BTreeSet;

use corep_lab::causal_graphs::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(labels: &[&str]) -> BTreeSet<String> {
    labels.iter().map(|s| s.to_string()).collect()
}

fn pairs(list: &[(&str, &str)]) -> BTreeSet<(String, String)> {
    list.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

fn bi_pairs(list: &[(&str, &str)]) -> BTreeSet<(String, String)> {
    list.iter()
        .map(|&(a, b)| if a <= b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) })
        .collect()
}

const FIRST_DIRECTED: &[(&str, &str)] = &[
    ("a", "s'"),
    ("a", "h1'"),
    ("s", "s'"),
    ("s", "h2'"),
    ("h1", "h2'"),
    ("h2", "h2'"),
    ("a'", "r'"),
    ("s'", "r'"),
    ("h1'", "r'"),
];

const SECOND_DIRECTED: &[(&str, &str)] = &[
    ("a", "s'"),
    ("a", "h1'"),
    ("s", "s'"),
    ("s", "h1'"),
    ("h1", "h1'"),
    ("h1", "h2'"),
    ("h2", "h2'"),
    ("a'", "r'"),
    ("s'", "r'"),
    ("h2'", "r'"),
];

const CONFOUNDED: &[(&str, &str)] = &[("s", "h1"), ("h1", "h2"), ("s", "h2")];

#[test]
fn worked_example_dags_have_the_expected_edges() {
    let dags = worked_example_family().dags().unwrap();
    for (dag, expected) in dags.iter().zip([FIRST_DIRECTED, SECOND_DIRECTED]) {
        let mut all = pairs(expected);
        all.extend(pairs(&[("e", "s"), ("e", "h1"), ("e", "h2")]));
        assert_eq!(dag.directed_edges(), all);
        assert!(dag.bidirected_edges().is_empty());
    }
}

#[test]
fn worked_example_mags_and_union() {
    let family = worked_example_family();
    let mags: Vec<_> = family
        .dags()
        .unwrap()
        .iter()
        .map(|d| dag_to_mag(d, LATENT).unwrap())
        .collect();
    for (mag, expected) in mags.iter().zip([FIRST_DIRECTED, SECOND_DIRECTED]) {
        assert!(!mag.nodes().iter().any(|n| n == LATENT));
        assert_eq!(mag.directed_edges(), pairs(expected));
        assert_eq!(mag.bidirected_edges(), bi_pairs(CONFOUNDED));
    }
    let union = union_mags(&mags).unwrap();
    let mut expected = pairs(SECOND_DIRECTED);
    expected.extend(pairs(&[("s", "h2'"), ("h1'", "r'")]));
    assert_eq!(union.directed_edges(), expected);
    assert_eq!(union.bidirected_edges(), bi_pairs(CONFOUNDED));
    assert!(verify_mag(&union).unwrap().is_mag());
    assert!(order_compatible(&family.layered_order(), &mags));
}

#[test]
fn action_and_state_are_separated_in_first_mag() {
    let dag = worked_example_family().dag(0).unwrap();
    let mag = dag_to_mag(&dag, LATENT).unwrap();
    assert!(m_separated(&mag, &set(&["a"]), &set(&["s"]), &set(&[])).unwrap());
    assert!(m_separated_by_paths(&mag, &set(&["a"]), &set(&["s"]), &set(&[])).unwrap());
}

#[test]
fn text_format_parses_hand_written_graph() {
    let g = MixedGraph::from_text("nodes: a,s,h1\n# comment\na -> s\ns <-> h1\n").unwrap();
    assert!(g.has_directed("a", "s"));
    assert!(g.has_bidirected("h1", "s"));
    assert!(MixedGraph::from_text("nodes: a\nb -> a\n").is_err());
    assert!(MixedGraph::from_text("a -> b\n").is_err());
}

/// Rules applied by scanning every ordered triple over a dense adjacency matrix.
fn brute_force_mag(dag: &MixedGraph, latent: &str) -> (BTreeSet<(String, String)>, BTreeSet<(String, String)>) {
    let labels = dag.nodes().to_vec();
    let n = labels.len();
    let e = labels.iter().position(|l| l == latent).unwrap();
    let mut adj = vec![vec![false; n]; n];
    for (u, v) in dag.directed_edges() {
        let i = labels.iter().position(|l| *l == u).unwrap();
        let j = labels.iter().position(|l| *l == v).unwrap();
        adj[i][j] = true;
    }
    // reach[u][v]: u is a proper ancestor of v
    let mut reach = adj.clone();
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    let mut bi = vec![vec![false; n]; n];
    for u in 0..n {
        for v in 0..n {
            if u != v && adj[e][u] && adj[e][v] {
                bi[u][v] = true;
            }
        }
    }
    let mut d = adj.clone();
    for t in 0..n {
        for u in 0..n {
            for v in 0..n {
                if t != e && adj[t][u] && bi[u][v] && reach[u][v] {
                    d[t][v] = true;
                }
            }
        }
    }
    for u in 0..n {
        for v in 0..n {
            if bi[u][v] && reach[u][v] {
                bi[u][v] = false;
                bi[v][u] = false;
                d[u][v] = true;
            }
        }
    }
    let mut directed = BTreeSet::new();
    let mut bidirected = BTreeSet::new();
    for u in 0..n {
        for v in 0..n {
            if u == e || v == e {
                continue;
            }
            if d[u][v] {
                directed.insert((labels[u].clone(), labels[v].clone()));
            }
            if bi[u][v] && labels[u] < labels[v] {
                bidirected.insert((labels[u].clone(), labels[v].clone()));
            }
        }
    }
    (directed, bidirected)
}

fn random_dag(rng: &mut ChaCha8Rng, n: usize, p: f64) -> MixedGraph {
    let labels: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
    let mut g = MixedGraph::new(&labels).unwrap();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                g.add_directed(&labels[i], &labels[j]).unwrap();
            }
        }
    }
    g
}

#[test]
fn construction_matches_brute_force_on_random_dags() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..300 {
        let dag = random_dag(&mut rng, 8, 0.35);
        // latent is the first node, so it has no parents by construction
        let latent = "v0";
        let mag = dag_to_mag(&dag, latent).unwrap();
        let (d, b) = brute_force_mag(&dag, latent);
        assert_eq!(mag.directed_edges(), d, "trial {trial}");
        assert_eq!(mag.bidirected_edges(), b, "trial {trial}");
        for (u, v) in mag.bidirected_edges() {
            assert!(!mag.has_directed(&u, &v) && !mag.has_directed(&v, &u));
        }
    }
}

#[test]
fn cyclic_input_is_rejected() {
    let g = MixedGraph::from_text("nodes: e,x,y\nx -> y\ny -> x\n").unwrap();
    assert!(matches!(dag_to_mag(&g, "e"), Err(GraphError::NotADag(_))));
}

#[test]
fn union_requires_matching_nodes() {
    let a = MixedGraph::new(&["x", "y"]).unwrap();
    let b = MixedGraph::new(&["x", "z"]).unwrap();
    assert_eq!(union_mags(&[a, b]), Err(GraphError::NodeMismatch));
}

#[test]
fn edge_probability_one_gives_identical_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (_, dags) = sample_subenv_family(&mut rng, 2, 2, 3, 1.0).unwrap();
    let mags: Vec<_> = dags.iter().map(|d| dag_to_mag(d, LATENT).unwrap()).collect();
    let union = union_mags(&mags).unwrap();
    for m in &mags {
        assert_eq!(&union, m);
    }
}

#[test]
fn edge_probability_zero_gives_confounded_clique() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (family, dags) = sample_subenv_family(&mut rng, 2, 1, 2, 0.0).unwrap();
    let mag = dag_to_mag(&dags[0], LATENT).unwrap();
    assert!(mag.directed_edges().is_empty());
    let block: Vec<String> = family.s_labels().into_iter().chain(family.h_labels()).collect();
    assert_eq!(mag.bidirected_edges().len(), block.len() * (block.len() - 1) / 2);
}

#[test]
fn verify_limit_is_enforced() {
    let labels: Vec<String> = (0..=MAX_VERIFY_NODES).map(|i| format!("n{i}")).collect();
    let g = MixedGraph::new(&labels).unwrap();
    assert!(matches!(verify_mag(&g), Err(GraphError::TooLarge { .. })));
}

fn arb_mixed_graph() -> impl Strategy<Value = MixedGraph> {
    (3usize..8, any::<u64>()).prop_map(|(n, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
        let mut g = MixedGraph::new(&labels).unwrap();
        for i in 0..n {
            for j in i + 1..n {
                match rng.random_range(0..5) {
                    0 => g.add_directed(&labels[i], &labels[j]).unwrap(),
                    1 => g.add_bidirected(&labels[i], &labels[j]).unwrap(),
                    _ => {}
                }
            }
        }
        g
    })
}

fn arb_query(n: usize, seed: u64) -> (BTreeSet<String>, BTreeSet<String>, BTreeSet<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = BTreeSet::new();
    let mut y = BTreeSet::new();
    let mut z = BTreeSet::new();
    x.insert("v0".to_string());
    y.insert(format!("v{}", n - 1));
    for i in 1..n - 1 {
        match rng.random_range(0..4) {
            0 => {
                x.insert(format!("v{i}"));
            }
            1 => {
                y.insert(format!("v{i}"));
            }
            2 => {
                z.insert(format!("v{i}"));
            }
            _ => {}
        }
    }
    (x, y, z)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn separation_is_symmetric_and_matches_path_enumeration(g in arb_mixed_graph(), seed in any::<u64>()) {
        let (x, y, z) = arb_query(g.len(), seed);
        let fast = m_separated(&g, &x, &y, &z).unwrap();
        prop_assert_eq!(fast, m_separated(&g, &y, &x, &z).unwrap());
        prop_assert_eq!(fast, m_separated_by_paths(&g, &x, &y, &z).unwrap());
    }

    #[test]
    fn union_is_idempotent_commutative_associative(seed in any::<u64>(), p in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, dags) = sample_subenv_family(&mut rng, 2, 2, 3, p).unwrap();
        let m: Vec<_> = dags.iter().map(|d| dag_to_mag(d, LATENT).unwrap()).collect();
        let u = |gs: &[MixedGraph]| union_mags(gs).unwrap();
        prop_assert_eq!(u(&[m[0].clone(), m[0].clone()]), m[0].clone());
        prop_assert_eq!(u(&[m[0].clone(), m[1].clone()]), u(&[m[1].clone(), m[0].clone()]));
        let left = u(&[u(&[m[0].clone(), m[1].clone()]), m[2].clone()]);
        let right = u(&[m[0].clone(), u(&[m[1].clone(), m[2].clone()])]);
        prop_assert_eq!(&left, &right);
        prop_assert_eq!(left, u(&m));
    }

    #[test]
    fn sampled_unions_are_mags(seed in any::<u64>(), d_s in 1usize..4, d_h in 1usize..4, k in 1usize..5, p in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (family, dags) = sample_subenv_family(&mut rng, d_s, d_h, k, p).unwrap();
        let mags: Vec<_> = dags.iter().map(|d| dag_to_mag(d, LATENT).unwrap()).collect();
        for m in &mags {
            prop_assert!(!m.nodes().iter().any(|n| n == LATENT));
        }
        prop_assert!(verify_mag(&union_mags(&mags).unwrap()).unwrap().is_mag());
        prop_assert!(order_compatible(&family.layered_order(), &mags));
    }
}
