use rand::Rng;

use super::graph::MixedGraph;
use super::order::PartialOrder;
use super::GraphError;

/// Label of the latent environment node.
pub const LATENT: &str = "e";

/// Binary structure masks of one stationary sub-environment. Matrices are
/// indexed `[target][source]`, so `c_ss[i][j]` is the edge `s_j -> s_i'`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvMasks {
    pub c_ss: Vec<Vec<bool>>,
    pub c_as: Vec<bool>,
    pub c_hh: Vec<Vec<bool>>,
    pub c_sh: Vec<Vec<bool>>,
    pub c_ah: Vec<bool>,
    pub c_sr: Vec<bool>,
    pub c_hr: Vec<bool>,
    pub c_ar: bool,
}

impl EnvMasks {
    pub fn full(d_s: usize, d_h: usize, value: bool) -> Self {
        Self {
            c_ss: vec![vec![value; d_s]; d_s],
            c_as: vec![value; d_s],
            c_hh: vec![vec![value; d_h]; d_h],
            c_sh: vec![vec![value; d_s]; d_h],
            c_ah: vec![value; d_h],
            c_sr: vec![value; d_s],
            c_hr: vec![value; d_h],
            c_ar: value,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, d_s: usize, d_h: usize, p: f64) -> Self {
        let mut bit = || rng.random_bool(p);
        let matrix = |rows: usize, cols: usize, bit: &mut dyn FnMut() -> bool| {
            (0..rows).map(|_| (0..cols).map(|_| bit()).collect()).collect::<Vec<Vec<bool>>>()
        };
        let c_ss = matrix(d_s, d_s, &mut bit);
        let c_as = (0..d_s).map(|_| bit()).collect();
        let c_hh = matrix(d_h, d_h, &mut bit);
        let c_sh = matrix(d_h, d_s, &mut bit);
        let c_ah = (0..d_h).map(|_| bit()).collect();
        let c_sr = (0..d_s).map(|_| bit()).collect();
        let c_hr = (0..d_h).map(|_| bit()).collect();
        let c_ar = bit();
        Self { c_ss, c_as, c_hh, c_sh, c_ah, c_sr, c_hr, c_ar }
    }

    fn check_shapes(&self, d_s: usize, d_h: usize) -> Result<(), GraphError> {
        let matrix_ok = |m: &Vec<Vec<bool>>, r: usize, c: usize| m.len() == r && m.iter().all(|row| row.len() == c);
        let ok = matrix_ok(&self.c_ss, d_s, d_s)
            && self.c_as.len() == d_s
            && matrix_ok(&self.c_hh, d_h, d_h)
            && matrix_ok(&self.c_sh, d_h, d_s)
            && self.c_ah.len() == d_h
            && self.c_sr.len() == d_s
            && self.c_hr.len() == d_h;
        if ok {
            Ok(())
        } else {
            Err(GraphError::MaskShape { d_s, d_h })
        }
    }
}

/// Sub-environments sharing one node set: the latent `e`, actions `a`, `a'`,
/// state and hidden blocks at the current and next step, and reward `r'`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubEnvFamily {
    d_s: usize,
    d_h: usize,
    masks: Vec<EnvMasks>,
}

fn block(prefix: &str, d: usize, prime: &str) -> Vec<String> {
    if d == 1 {
        vec![format!("{prefix}{prime}")]
    } else {
        (1..=d).map(|i| format!("{prefix}{i}{prime}")).collect()
    }
}

impl SubEnvFamily {
    pub fn new(d_s: usize, d_h: usize, masks: Vec<EnvMasks>) -> Result<Self, GraphError> {
        if d_s == 0 || d_h == 0 || masks.is_empty() {
            return Err(GraphError::MaskShape { d_s, d_h });
        }
        for m in &masks {
            m.check_shapes(d_s, d_h)?;
        }
        Ok(Self { d_s, d_h, masks })
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn k(&self) -> usize {
        self.masks.len()
    }

    pub fn masks(&self) -> &[EnvMasks] {
        &self.masks
    }

    pub fn s_labels(&self) -> Vec<String> {
        block("s", self.d_s, "")
    }

    pub fn h_labels(&self) -> Vec<String> {
        block("h", self.d_h, "")
    }

    pub fn s_next_labels(&self) -> Vec<String> {
        block("s", self.d_s, "'")
    }

    pub fn h_next_labels(&self) -> Vec<String> {
        block("h", self.d_h, "'")
    }

    /// `e, a, s.., h.., a', s'.., h'.., r'`.
    pub fn node_labels(&self) -> Vec<String> {
        let mut v = vec![LATENT.to_string(), "a".to_string()];
        v.extend(self.s_labels());
        v.extend(self.h_labels());
        v.push("a'".to_string());
        v.extend(self.s_next_labels());
        v.extend(self.h_next_labels());
        v.push("r'".to_string());
        v
    }

    /// Causal DAG of environment `k`.
    pub fn dag(&self, k: usize) -> Result<MixedGraph, GraphError> {
        let m = self.masks.get(k).ok_or(GraphError::EmptyInput)?;
        let mut g = MixedGraph::new(&self.node_labels())?;
        let (s, h) = (self.s_labels(), self.h_labels());
        let (s2, h2) = (self.s_next_labels(), self.h_next_labels());
        for x in s.iter().chain(&h) {
            g.add_directed(LATENT, x)?;
        }
        for (i, target) in s2.iter().enumerate() {
            for (j, src) in s.iter().enumerate() {
                if m.c_ss[i][j] {
                    g.add_directed(src, target)?;
                }
            }
            if m.c_as[i] {
                g.add_directed("a", target)?;
            }
        }
        for (i, target) in h2.iter().enumerate() {
            for (j, src) in h.iter().enumerate() {
                if m.c_hh[i][j] {
                    g.add_directed(src, target)?;
                }
            }
            for (j, src) in s.iter().enumerate() {
                if m.c_sh[i][j] {
                    g.add_directed(src, target)?;
                }
            }
            if m.c_ah[i] {
                g.add_directed("a", target)?;
            }
        }
        for (i, src) in s2.iter().enumerate() {
            if m.c_sr[i] {
                g.add_directed(src, "r'")?;
            }
        }
        for (i, src) in h2.iter().enumerate() {
            if m.c_hr[i] {
                g.add_directed(src, "r'")?;
            }
        }
        if m.c_ar {
            g.add_directed("a'", "r'")?;
        }
        Ok(g)
    }

    pub fn dags(&self) -> Result<Vec<MixedGraph>, GraphError> {
        (0..self.k()).map(|k| self.dag(k)).collect()
    }

    /// Current-step variables precede next-step variables, which precede `r'`.
    pub fn layered_order(&self) -> PartialOrder {
        let mut now = vec!["a".to_string()];
        now.extend(self.s_labels());
        now.extend(self.h_labels());
        let mut next = vec!["a'".to_string()];
        next.extend(self.s_next_labels());
        next.extend(self.h_next_labels());
        PartialOrder::from_layers(&[now, next, vec!["r'".to_string()]])
            .expect("layered relation is acyclic")
    }
}

/// Draws `k` environments whose mask entries are independent Bernoulli(`p`).
pub fn sample_subenv_family<R: Rng + ?Sized>(
    rng: &mut R,
    d_s: usize,
    d_h: usize,
    k: usize,
    p: f64,
) -> Result<(SubEnvFamily, Vec<MixedGraph>), GraphError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(GraphError::BadProbability(p));
    }
    if k == 0 {
        return Err(GraphError::EmptyInput);
    }
    let masks = (0..k).map(|_| EnvMasks::sample(rng, d_s, d_h, p)).collect();
    let family = SubEnvFamily::new(d_s, d_h, masks)?;
    let dags = family.dags()?;
    Ok((family, dags))
}

/// Two environments with `d_s = 1`, `d_h = 2` whose mechanisms differ only in
/// the hidden block: the standard worked example of this module.
pub fn worked_example_family() -> SubEnvFamily {
    let (t, f) = (true, false);
    let shared = |c_hh: [[bool; 2]; 2], c_sh: [bool; 2], c_hr: [bool; 2]| EnvMasks {
        c_ss: vec![vec![t]],
        c_as: vec![t],
        c_hh: c_hh.iter().map(|r| r.to_vec()).collect(),
        c_sh: c_sh.iter().map(|&b| vec![b]).collect(),
        c_ah: vec![t, f],
        c_sr: vec![t],
        c_hr: c_hr.to_vec(),
        c_ar: t,
    };
    let first = shared([[f, f], [t, t]], [f, t], [t, f]);
    let second = shared([[t, f], [t, t]], [t, f], [f, t]);
    SubEnvFamily::new(1, 2, vec![first, second]).expect("fixed shapes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn labels_follow_block_sizes() {
        let f = SubEnvFamily::new(1, 2, vec![EnvMasks::full(1, 2, false)]).unwrap();
        assert_eq!(
            f.node_labels(),
            ["e", "a", "s", "h1", "h2", "a'", "s'", "h1'", "h2'", "r'"]
        );
    }

    #[test]
    fn zero_probability_leaves_only_latent_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, dags) = sample_subenv_family(&mut rng, 2, 3, 2, 0.0).unwrap();
        for d in dags {
            assert_eq!(d.edge_count(), 5);
            assert!(d.is_acyclic());
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_subenv_family(&mut rng, 1, 1, 1, 1.5).is_err());
        assert!(SubEnvFamily::new(2, 1, vec![EnvMasks::full(1, 1, true)]).is_err());
    }
}
