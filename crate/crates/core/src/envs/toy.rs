/// One step of the two-coordinate example whose non-stationarity is carried
/// by a hidden variable.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCausalStep {
    pub s_next: Vec<f64>,
    pub h: Vec<f64>,
    pub h_next: Vec<f64>,
    /// Shared value of the state and hidden masks: `n(t+1)` times the identity.
    pub mask: Vec<Vec<f64>>,
}

/// `s'_i = s_i + a + (s_i + a) n(t)`, `h_i = (s_i + a) n(t)`,
/// `h'_i = (s_i + h_i + 2a) n(t+1)`.
pub fn toy_causal_step(s: &[f64], a: f64, t: usize, n: impl Fn(usize) -> f64) -> ToyCausalStep {
    let nt = n(t);
    let nt1 = n(t + 1);
    let h: Vec<f64> = s.iter().map(|si| (si + a) * nt).collect();
    let s_next = s.iter().zip(&h).map(|(si, hi)| si + hi + a).collect();
    let h_next = s.iter().zip(&h).map(|(si, hi)| (si + hi + 2.0 * a) * nt1).collect();
    let d = s.len();
    let mask = (0..d)
        .map(|i| (0..d).map(|j| if i == j { nt1 } else { 0.0 }).collect())
        .collect();
    ToyCausalStep { s_next, h, h_next, mask }
}
