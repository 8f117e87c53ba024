use std::rc::Rc;

use rand::Rng;

use super::config::{Branches, CorepConfig};
use super::CorepError;
use crate::numerics::init::glorot_uniform;
use crate::numerics::{Bindings, ParamGroup, Tape, Tensor, Var};

pub(crate) fn linear(t: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, CorepError> {
    let rows = t.value(x).shape()[0];
    let y = t.matmul(x, w)?;
    let bias = t.expand_leading(b, rows)?;
    Ok(t.add(y, bias)?)
}

fn dense(group: &mut ParamGroup, rng: &mut (impl Rng + ?Sized), w: &str, b: &str, fan_in: usize, fan_out: usize) {
    group.set(w, glorot_uniform(rng, fan_in, fan_out), true);
    group.set(b, Tensor::zeros(&[1, fan_out]), true);
}

/// Shared featurizer `d_s -> hidden -> N * d_f` with a ReLU hidden layer.
pub fn init_featurizer(cfg: &CorepConfig, state_dim: usize, rng: &mut (impl Rng + ?Sized)) -> ParamGroup {
    let mut g = ParamGroup::new();
    dense(&mut g, rng, "w1", "b1", state_dim, cfg.featurizer_hidden);
    dense(&mut g, rng, "w2", "b2", cfg.featurizer_hidden, cfg.nodes * cfg.node_dim);
    g
}

pub(crate) fn layer_w(n: usize) -> String {
    format!("layer{n}.w")
}

pub(crate) fn att_names(n: usize, k: usize) -> (String, String) {
    (format!("layer{n}.head{k}.att_src"), format!("layer{n}.head{k}.att_dst"))
}

/// One attention branch: per layer a projection and per head a split
/// attention vector `l = [att_src; att_dst]`.
pub fn init_branch(cfg: &CorepConfig, rng: &mut (impl Rng + ?Sized)) -> ParamGroup {
    let mut g = ParamGroup::new();
    for n in 0..cfg.layers {
        let fan_in = if n == 0 { cfg.node_dim } else { cfg.graph_dim };
        g.set(&layer_w(n), glorot_uniform(rng, fan_in, cfg.graph_dim), true);
        for k in 0..cfg.heads {
            let (src, dst) = att_names(n, k);
            g.set(&src, glorot_uniform(rng, cfg.graph_dim, 1), true);
            g.set(&dst, glorot_uniform(rng, cfg.graph_dim, 1), true);
        }
    }
    g
}

pub fn init_encoder(cfg: &CorepConfig, state_dim: usize, rng: &mut (impl Rng + ?Sized)) -> ParamGroup {
    let mut g = ParamGroup::new();
    let input = cfg.encoder_input(state_dim);
    dense(&mut g, rng, "w1", "b1", input, cfg.encoder_hidden);
    dense(&mut g, rng, "w_mu", "b_mu", cfg.encoder_hidden, cfg.latent_dim);
    dense(&mut g, rng, "w_log_std", "b_log_std", cfg.encoder_hidden, cfg.latent_dim);
    g
}

pub fn init_decoder(cfg: &CorepConfig, state_dim: usize, rng: &mut (impl Rng + ?Sized)) -> ParamGroup {
    let mut g = ParamGroup::new();
    dense(&mut g, rng, "w1", "b1", cfg.latent_dim, cfg.decoder_hidden);
    dense(&mut g, rng, "w2", "b2", cfg.decoder_hidden, state_dim);
    g
}

/// Parameter groups of the attention stage plus the freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct DualGatParams {
    pub featurizer: ParamGroup,
    pub core: ParamGroup,
    pub general: ParamGroup,
    pub core_frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    pub encoder: ParamGroup,
    pub decoder: ParamGroup,
}

/// Full representation stack. Groups that the configuration does not use
/// are empty.
#[derive(Clone, Debug, PartialEq)]
pub struct CorepModel {
    pub cfg: CorepConfig,
    pub state_dim: usize,
    pub gat: DualGatParams,
    pub vae: VaeParams,
}

impl CorepModel {
    pub fn init(cfg: CorepConfig, state_dim: usize, rng: &mut (impl Rng + ?Sized)) -> Result<Self, CorepError> {
        cfg.validate()?;
        let (featurizer, core, general) = match cfg.branches {
            Branches::Direct => (ParamGroup::new(), ParamGroup::new(), ParamGroup::new()),
            Branches::Single => (init_featurizer(&cfg, state_dim, rng), init_branch(&cfg, rng), ParamGroup::new()),
            Branches::Dual => (
                init_featurizer(&cfg, state_dim, rng),
                init_branch(&cfg, rng),
                init_branch(&cfg, rng),
            ),
        };
        let encoder = init_encoder(&cfg, state_dim, rng);
        let decoder = init_decoder(&cfg, state_dim, rng);
        Ok(Self {
            cfg,
            state_dim,
            gat: DualGatParams { featurizer, core, general, core_frozen: false },
            vae: VaeParams { encoder, decoder },
        })
    }

    /// Named groups in a fixed order, for optimizers and checkpoints.
    pub fn groups(&self) -> [(&'static str, &ParamGroup); 5] {
        [
            ("featurizer", &self.gat.featurizer),
            ("core", &self.gat.core),
            ("general", &self.gat.general),
            ("encoder", &self.vae.encoder),
            ("decoder", &self.vae.decoder),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut ParamGroup); 5] {
        [
            ("featurizer", &mut self.gat.featurizer),
            ("core", &mut self.gat.core),
            ("general", &mut self.gat.general),
            ("encoder", &mut self.vae.encoder),
            ("decoder", &mut self.vae.decoder),
        ]
    }

    /// Binds every group. The core group, and the featurizer when
    /// `cfg.freeze_featurizer` is set, become constant when `core_trainable`
    /// is false, so no gradient reaches them.
    pub fn bind(&self, t: &mut Tape, core_trainable: bool) -> ModelBindings {
        ModelBindings {
            featurizer: if core_trainable || !self.cfg.freeze_featurizer {
                Bindings::bind(t, &self.gat.featurizer)
            } else {
                Bindings::bind_frozen(t, &self.gat.featurizer)
            },
            core: if core_trainable {
                Bindings::bind(t, &self.gat.core)
            } else {
                Bindings::bind_frozen(t, &self.gat.core)
            },
            general: Bindings::bind(t, &self.gat.general),
            encoder: Bindings::bind(t, &self.vae.encoder),
            decoder: Bindings::bind(t, &self.vae.decoder),
        }
    }

    /// Binds every group as constants (inference only).
    pub fn bind_constant(&self, t: &mut Tape) -> ModelBindings {
        ModelBindings {
            featurizer: Bindings::bind_frozen(t, &self.gat.featurizer),
            core: Bindings::bind_frozen(t, &self.gat.core),
            general: Bindings::bind_frozen(t, &self.gat.general),
            encoder: Bindings::bind_frozen(t, &self.vae.encoder),
            decoder: Bindings::bind_frozen(t, &self.vae.decoder),
        }
    }

    /// Head-averaged final-layer attention of each branch at one state.
    pub fn adjacencies(&self, s: &[f64]) -> Result<(Tensor, Option<Tensor>), CorepError> {
        if s.len() != self.state_dim {
            return Err(CorepError::StateDim { expected: self.state_dim, got: s.len() });
        }
        let mut t = Tape::new();
        let b = self.bind_constant(&mut t);
        let sv = t.constant(Tensor::matrix(1, s.len(), s.to_vec())?);
        let out = super::forward::dual_forward(&mut t, sv, &b, &self.cfg)?;
        let n = self.cfg.nodes;
        let take = |t: &Tape, v: Var| t.value(v).clone().reshape(vec![n, n]);
        let core = take(&t, out.a_core.ok_or(CorepError::Config("model has no graph stage".into()))?)?;
        let general = match out.a_general {
            Some(v) => Some(take(&t, v)?),
            None => None,
        };
        Ok((core, general))
    }
}

pub struct ModelBindings {
    pub featurizer: Bindings,
    pub core: Bindings,
    pub general: Bindings,
    pub encoder: Bindings,
    pub decoder: Bindings,
}

/// Row-major `[B, N, N]` mask of off-diagonal positions.
pub(crate) fn off_diagonal_mask(batch: usize, n: usize) -> Rc<[bool]> {
    (0..batch * n * n).map(|k| (k / n) % n != k % n).collect()
}
