use std::fmt::Write as _;

pub const METRICS_HEADER: &str = "iter,env_steps,return_mean,return_std,L_policy,L_guide,L_MAG,L_sparsity,\
L_VAE_recon,L_VAE_kl,L_total,core_frozen,delta_alpha,mu_delta,sigma_delta,seconds";

/// One row per update phase. `None` fields are written as empty cells.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub env_steps: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub l_policy: f64,
    pub l_guide: Option<f64>,
    pub l_mag: Option<f64>,
    pub l_sparsity: Option<f64>,
    pub l_vae_recon: Option<f64>,
    pub l_vae_kl: Option<f64>,
    pub l_total: f64,
    pub core_frozen: Option<bool>,
    pub delta_alpha: Option<f64>,
    pub mu_delta: Option<f64>,
    pub sigma_delta: Option<f64>,
    pub seconds: f64,
}

fn cell(out: &mut String, v: Option<f64>) {
    if let Some(x) = v {
        let _ = write!(out, "{x}");
    }
    out.push(',');
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},", self.iter, self.env_steps);
        for v in [
            Some(self.return_mean),
            Some(self.return_std),
            Some(self.l_policy),
            self.l_guide,
            self.l_mag,
            self.l_sparsity,
            self.l_vae_recon,
            self.l_vae_kl,
            Some(self.l_total),
        ] {
            cell(&mut s, v);
        }
        if let Some(f) = self.core_frozen {
            s.push(if f { '1' } else { '0' });
        }
        s.push(',');
        for v in [self.delta_alpha, self.mu_delta, self.sigma_delta] {
            cell(&mut s, v);
        }
        let _ = write!(s, "{}", self.seconds);
        s
    }
}
