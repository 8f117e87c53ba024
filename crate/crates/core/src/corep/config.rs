use super::CorepError;

/// Which parts of the representation stack are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branches {
    /// Core and general attention branches.
    Dual,
    /// Core branch only, always trainable.
    Single,
    /// No graph stage: the encoder reads the raw state.
    Direct,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorepConfig {
    pub nodes: usize,
    pub node_dim: usize,
    pub graph_dim: usize,
    pub latent_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Neighbour threshold on the weighted adjacency; `None` uses `1 / (2 (N - 1))`.
    pub tau: Option<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub featurizer_hidden: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub leaky_slope: f64,
    pub branches: Branches,
    /// Sample `h` by reparameterization; otherwise `h = mu`.
    pub sample_latent: bool,
    pub use_vae_loss: bool,
    pub use_guide: bool,
    pub use_mag: bool,
    pub use_sparsity: bool,
    /// Also hold the shared featurizer while the core branch is frozen.
    pub freeze_featurizer: bool,
}

impl Default for CorepConfig {
    fn default() -> Self {
        Self {
            nodes: 4,
            node_dim: 8,
            graph_dim: 8,
            latent_dim: 4,
            layers: 2,
            heads: 1,
            tau: None,
            lambda1: 0.1,
            lambda2: 1e-3,
            featurizer_hidden: 64,
            encoder_hidden: 128,
            decoder_hidden: 64,
            leaky_slope: 0.2,
            branches: Branches::Dual,
            sample_latent: true,
            use_vae_loss: true,
            use_guide: true,
            use_mag: true,
            use_sparsity: true,
            freeze_featurizer: false,
        }
    }
}

impl CorepConfig {
    pub fn tau(&self) -> f64 {
        self.tau
            .unwrap_or_else(|| 1.0 / (2.0 * (self.nodes.max(2) - 1) as f64))
    }

    /// Width of the flattened encoder input.
    pub fn encoder_input(&self, state_dim: usize) -> usize {
        match self.branches {
            Branches::Dual => self.nodes * 2 * self.graph_dim,
            Branches::Single => self.nodes * self.graph_dim,
            Branches::Direct => state_dim,
        }
    }

    pub fn validate(&self) -> Result<(), CorepError> {
        let bad = |msg: String| Err(CorepError::Config(msg));
        for (name, v) in [
            ("nodes", self.nodes),
            ("node_dim", self.node_dim),
            ("graph_dim", self.graph_dim),
            ("latent_dim", self.latent_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("featurizer_hidden", self.featurizer_hidden),
            ("encoder_hidden", self.encoder_hidden),
            ("decoder_hidden", self.decoder_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.branches != Branches::Direct && self.nodes < 2 {
            return Err(CorepError::TooFewNodes(self.nodes));
        }
        let tau = self.tau();
        if !(0.0..1.0).contains(&tau) {
            return bad(format!("tau must lie in [0, 1), got {tau}"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be >= 0".into());
        }
        Ok(())
    }
}
