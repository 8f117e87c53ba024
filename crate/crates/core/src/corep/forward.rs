use std::rc::Rc;

use super::config::{Branches, CorepConfig};
use super::model::{att_names, layer_w, linear, off_diagonal_mask, ModelBindings};
use super::CorepError;
use crate::numerics::{Bindings, Tape, Tensor, Var};

/// `[B, d_s] -> [B, N, d_f]` through the shared ReLU featurizer.
pub fn state_to_nodes(t: &mut Tape, s: Var, feat: &Bindings, cfg: &CorepConfig) -> Result<Var, CorepError> {
    let batch = t.value(s).shape()[0];
    let h = linear(t, s, feat.var("w1")?, feat.var("b1")?)?;
    let h = t.relu(h)?;
    let x = linear(t, h, feat.var("w2")?, feat.var("b2")?)?;
    Ok(t.reshape(x, &[batch, cfg.nodes, cfg.node_dim])?)
}

/// Row softmax of `X X^T` over off-diagonal entries; the diagonal is exactly 0.
pub fn weighted_adjacency(t: &mut Tape, x: Var) -> Result<Var, CorepError> {
    let shape = t.value(x).shape().to_vec();
    let [batch, n, _] = shape[..] else {
        return Err(CorepError::Config(format!("node features must be [B, N, d_f], got {shape:?}")));
    };
    if n < 2 {
        return Err(CorepError::TooFewNodes(n));
    }
    let xt = t.transpose(x)?;
    let gram = t.batch_matmul(x, xt)?;
    Ok(t.masked_row_softmax(gram, off_diagonal_mask(batch, n))?)
}

/// Value-level adjacency for a single `[N, d_f]` feature matrix.
pub fn adjacency_of(x: &Tensor) -> Result<Tensor, CorepError> {
    let &[n, d] = x.shape() else {
        return Err(CorepError::Config(format!("expected [N, d_f], got {:?}", x.shape())));
    };
    let mut t = Tape::new();
    let xv = t.constant(x.clone().reshape(vec![1, n, d])?);
    let a = weighted_adjacency(&mut t, xv)?;
    Ok(t.value(a).clone().reshape(vec![n, n])?)
}

/// `A[i, j] >= tau` for `j != i`. Every row must keep at least one neighbour.
pub fn neighbor_mask(a: &Tensor, tau: f64) -> Result<Rc<[bool]>, CorepError> {
    let n = *a.shape().last().unwrap_or(&0);
    let rows = if n == 0 { 0 } else { a.numel() / n };
    let mut mask = Vec::with_capacity(a.numel());
    for r in 0..rows {
        let i = r % n;
        let row = &a.data()[r * n..(r + 1) * n];
        let start = mask.len();
        mask.extend(row.iter().enumerate().map(|(j, &v)| j != i && v >= tau));
        if !mask[start..].iter().any(|&m| m) {
            return Err(CorepError::EmptyNeighborhood { row: i, tau });
        }
    }
    Ok(mask.into())
}

/// One masked attention layer. `att` holds `(att_src, att_dst)` per head.
/// Returns the head-averaged ELU output `[B, N, d_g]` and the head-averaged
/// attention matrix `[B, N, N]`.
pub fn gat_layer(
    t: &mut Tape,
    h_in: Var,
    w: Var,
    att: &[(Var, Var)],
    mask: &Rc<[bool]>,
    slope: f64,
) -> Result<(Var, Var), CorepError> {
    let shape = t.value(h_in).shape().to_vec();
    let [batch, n, d_in] = shape[..] else {
        return Err(CorepError::Config(format!("layer input must be [B, N, d], got {shape:?}")));
    };
    let d_g = t.value(w).shape()[1];
    let flat = t.reshape(h_in, &[batch * n, d_in])?;
    let p_flat = t.matmul(flat, w)?;
    let p = t.reshape(p_flat, &[batch, n, d_g])?;

    let mut outs = Vec::with_capacity(att.len());
    let mut alphas = Vec::with_capacity(att.len());
    for &(src, dst) in att {
        let e_src = t.matmul(p_flat, src)?;
        let e_src = t.reshape(e_src, &[batch, n, 1])?;
        let e_src = t.tile_last(e_src, n)?;
        let e_dst = t.matmul(p_flat, dst)?;
        let e_dst = t.reshape(e_dst, &[batch, n, 1])?;
        let e_dst = t.tile_last(e_dst, n)?;
        let e_dst = t.transpose(e_dst)?;
        let logits = t.add(e_src, e_dst)?;
        let logits = t.leaky_relu(logits, slope)?;
        let alpha = t.masked_row_softmax(logits, mask.clone())?;
        let agg = t.batch_matmul(alpha, p)?;
        outs.push(t.elu(agg)?);
        alphas.push(alpha);
    }
    Ok((average(t, &outs)?, average(t, &alphas)?))
}

fn average(t: &mut Tape, vars: &[Var]) -> Result<Var, CorepError> {
    if vars.len() == 1 {
        return Ok(vars[0]);
    }
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = t.add(acc, v)?;
    }
    Ok(t.scale(acc, 1.0 / vars.len() as f64)?)
}

/// Stacks `cfg.layers` attention layers of one branch.
pub fn branch_forward(
    t: &mut Tape,
    x: Var,
    mask: &Rc<[bool]>,
    branch: &Bindings,
    cfg: &CorepConfig,
) -> Result<(Var, Var), CorepError> {
    let mut h = x;
    let mut alpha = None;
    for n in 0..cfg.layers {
        let w = branch.var(&layer_w(n))?;
        let att = (0..cfg.heads)
            .map(|k| {
                let (s, d) = att_names(n, k);
                Ok((branch.var(&s)?, branch.var(&d)?))
            })
            .collect::<Result<Vec<_>, CorepError>>()?;
        let (out, a) = gat_layer(t, h, w, &att, mask, cfg.leaky_slope)?;
        h = out;
        alpha = Some(a);
    }
    Ok((h, alpha.expect("layers >= 1")))
}

pub struct DualOutput {
    pub x: Option<Var>,
    pub a_x: Option<Var>,
    pub g_core: Option<Var>,
    pub g_general: Option<Var>,
    pub a_core: Option<Var>,
    pub a_general: Option<Var>,
    /// Flattened encoder input `[B, width]`: the concatenated branch outputs
    /// in row-major order, or the raw state without a graph stage.
    pub encoder_input: Var,
}

/// Featurizer, adjacency and both branches on a `[B, d_s]` batch.
pub fn dual_forward(t: &mut Tape, s: Var, b: &ModelBindings, cfg: &CorepConfig) -> Result<DualOutput, CorepError> {
    if cfg.branches == Branches::Direct {
        return Ok(DualOutput {
            x: None,
            a_x: None,
            g_core: None,
            g_general: None,
            a_core: None,
            a_general: None,
            encoder_input: s,
        });
    }
    let batch = t.value(s).shape()[0];
    let x = state_to_nodes(t, s, &b.featurizer, cfg)?;
    let a_x = weighted_adjacency(t, x)?;
    let mask = neighbor_mask(t.value(a_x), cfg.tau())?;
    let (g_core, a_core) = branch_forward(t, x, &mask, &b.core, cfg)?;
    let (g_general, a_general, g) = if cfg.branches == Branches::Dual {
        let (gg, ag) = branch_forward(t, x, &mask, &b.general, cfg)?;
        let g = t.concat_last(&[g_core, gg])?;
        (Some(gg), Some(ag), g)
    } else {
        (None, None, g_core)
    };
    let width = t.value(g).numel() / batch;
    let encoder_input = t.reshape(g, &[batch, width])?;
    Ok(DualOutput {
        x: Some(x),
        a_x: Some(a_x),
        g_core: Some(g_core),
        g_general,
        a_core: Some(a_core),
        a_general,
        encoder_input,
    })
}

pub struct VaeOutput {
    pub mu: Var,
    pub log_std: Var,
    pub h: Var,
    pub s_hat: Var,
    /// Mean squared reconstruction error over batch and coordinates.
    pub recon: Var,
    /// Batch mean of the closed-form KL to a standard normal.
    pub kl: Var,
}

pub const LOG_STD_LIMIT: f64 = 10.0;

/// Encoder heads, reparameterized latent (or the mean when `sample` is
/// false), decoder and both VAE cost terms.
pub fn vae_heads(
    t: &mut Tape,
    input: Var,
    s: Var,
    noise: Var,
    b: &ModelBindings,
    sample: bool,
) -> Result<VaeOutput, CorepError> {
    let batch = t.value(input).shape()[0];
    let hid = linear(t, input, b.encoder.var("w1")?, b.encoder.var("b1")?)?;
    let hid = t.relu(hid)?;
    let mu = linear(t, hid, b.encoder.var("w_mu")?, b.encoder.var("b_mu")?)?;
    let ls = linear(t, hid, b.encoder.var("w_log_std")?, b.encoder.var("b_log_std")?)?;
    let log_std = t.clamp(ls, -LOG_STD_LIMIT, LOG_STD_LIMIT)?;
    let h = if sample { t.reparameterize(mu, log_std, noise)? } else { mu };

    let d = linear(t, h, b.decoder.var("w1")?, b.decoder.var("b1")?)?;
    let d = t.relu(d)?;
    let s_hat = linear(t, d, b.decoder.var("w2")?, b.decoder.var("b2")?)?;
    let diff = t.sub(s, s_hat)?;
    let sq = t.square(diff)?;
    let recon = t.mean(sq)?;

    let kl = kl_standard_normal(t, mu, log_std)?;
    let kl = t.scale(kl, 1.0 / batch as f64)?;
    if !t.value(kl).all_finite() {
        return Err(CorepError::NonFinite("L_VAE_kl"));
    }
    Ok(VaeOutput { mu, log_std, h, s_hat, recon, kl })
}

/// `0.5 * sum(mu^2 + sigma^2 - 1 - 2 log sigma)` summed over all entries.
pub fn kl_standard_normal(t: &mut Tape, mu: Var, log_std: Var) -> Result<Var, CorepError> {
    let mu2 = t.square(mu)?;
    let two_ls = t.scale(log_std, 2.0)?;
    let var = t.exp(two_ls)?;
    let a = t.add(mu2, var)?;
    let a = t.sub(a, two_ls)?;
    let a = t.shift(a, -1.0)?;
    let s = t.sum(a)?;
    Ok(t.scale(s, 0.5)?)
}

/// Loss weights and switches for the regularizers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub guide: bool,
    pub mag: bool,
    pub sparsity: bool,
    pub vae: bool,
}

impl LossWeights {
    pub fn from_config(cfg: &CorepConfig) -> Self {
        Self {
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            guide: cfg.use_guide && cfg.branches == Branches::Dual,
            mag: cfg.use_mag,
            sparsity: cfg.use_sparsity,
            vae: cfg.use_vae_loss,
        }
    }
}

pub struct LossTerms {
    pub guide: Option<Var>,
    pub mag: Option<Var>,
    pub sparsity: Option<Var>,
    pub total: Var,
}

fn batched_frobenius(t: &mut Tape, m: Var) -> Result<Var, CorepError> {
    let shape = t.value(m).shape().to_vec();
    let batch = shape[0];
    let flat = t.reshape(m, &[batch, shape[1..].iter().product()])?;
    let norms = t.norm_last(flat)?;
    Ok(t.mean(norms)?)
}

/// Batch means of `||A_core - A_general||_F`, `||A - A^T||_F` summed over
/// branches and the entrywise L1 of both matrices, combined with the
/// policy loss and VAE costs into the weighted total.
pub fn losses(
    t: &mut Tape,
    a_core: Option<Var>,
    a_general: Option<Var>,
    vae_parts: Option<(Var, Var)>,
    l_policy: Var,
    w: &LossWeights,
) -> Result<LossTerms, CorepError> {
    let adjs: Vec<Var> = a_core.into_iter().chain(a_general).collect();
    let batch = adjs.first().map(|&a| t.value(a).shape()[0] as f64).unwrap_or(1.0);

    let guide = match (a_core, a_general) {
        (Some(c), Some(g)) if w.guide => {
            let d = t.sub(c, g)?;
            Some(batched_frobenius(t, d)?)
        }
        _ => None,
    };
    let mut mag = None;
    let mut sparsity = None;
    if !adjs.is_empty() && w.mag {
        let mut acc = None;
        for &a in &adjs {
            let at = t.transpose(a)?;
            let d = t.sub(a, at)?;
            let n = batched_frobenius(t, d)?;
            acc = Some(match acc {
                None => n,
                Some(prev) => t.add(prev, n)?,
            });
        }
        mag = acc;
    }
    if !adjs.is_empty() && w.sparsity {
        let mut acc = None;
        for &a in &adjs {
            let l = t.l1(a)?;
            let l = t.scale(l, 1.0 / batch)?;
            acc = Some(match acc {
                None => l,
                Some(prev) => t.add(prev, l)?,
            });
        }
        sparsity = acc;
    }

    let mut regular: Vec<Var> = mag.into_iter().chain(sparsity).collect();
    if let (true, Some((recon, kl))) = (w.vae, vae_parts) {
        regular.push(recon);
        regular.push(kl);
    }
    let mut total = l_policy;
    if let Some(g) = guide {
        let g = t.scale(g, w.lambda1)?;
        total = t.add(total, g)?;
    }
    for r in regular {
        let r = t.scale(r, w.lambda2)?;
        total = t.add(total, r)?;
    }
    Ok(LossTerms { guide, mag, sparsity, total })
}
