//! Clipped-surrogate PPO with a diagonal Gaussian actor and a separate
//! critic, both one-hidden-layer tanh MLPs over the policy input `(s, h)`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::numerics::init::glorot_uniform;
use crate::numerics::{Adam, Bindings, NumericsError, ParamGroup, Tape, Tensor, Var};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_TWO_PI_E: f64 = 1.418_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub log_std_init: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub normalize_advantages: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            log_std_init: -0.5,
            gamma: 0.97,
            gae_lambda: 0.95,
            clip: 0.1,
            epochs: 16,
            minibatch: 100,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 7e-4,
            normalize_advantages: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub actor: ParamGroup,
    pub critic: ParamGroup,
}

impl PolicyParams {
    pub fn init(input_dim: usize, action_dim: usize, cfg: &PolicyConfig, rng: &mut (impl Rng + ?Sized)) -> Self {
        let mut actor = ParamGroup::new();
        actor.set("w1", glorot_uniform(rng, input_dim, cfg.hidden), true);
        actor.set("b1", Tensor::zeros(&[1, cfg.hidden]), true);
        let mut w2 = glorot_uniform(rng, cfg.hidden, action_dim);
        w2.data_mut().iter_mut().for_each(|v| *v *= 0.01);
        actor.set("w2", w2, true);
        actor.set("b2", Tensor::zeros(&[1, action_dim]), true);
        actor.set("log_std", Tensor::full(&[1, action_dim], cfg.log_std_init), true);

        let mut critic = ParamGroup::new();
        critic.set("w1", glorot_uniform(rng, input_dim, cfg.hidden), true);
        critic.set("b1", Tensor::zeros(&[1, cfg.hidden]), true);
        critic.set("w2", glorot_uniform(rng, cfg.hidden, 1), true);
        critic.set("b2", Tensor::zeros(&[1, 1]), true);
        Self { actor, critic }
    }

    pub fn input_dim(&self) -> usize {
        self.actor.get("w1").map(|w| w.shape()[0]).unwrap_or(0)
    }

    pub fn action_dim(&self) -> usize {
        self.actor.get("b2").map(|b| b.shape()[1]).unwrap_or(0)
    }
}

fn linear(t: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
    let rows = t.value(x).shape()[0];
    let y = t.matmul(x, w)?;
    let bias = t.expand_leading(b, rows)?;
    t.add(y, bias)
}

pub struct PolicyHeads {
    pub mean: Var,
    /// Clamped log-std, `[1, A]`.
    pub log_std: Var,
    pub value: Var,
}

/// Actor mean, clamped log-std and critic value for a `[B, d_in]` input.
pub fn policy_forward(t: &mut Tape, input: Var, actor: &Bindings, critic: &Bindings) -> Result<PolicyHeads, NumericsError> {
    let h = linear(t, input, actor.var("w1")?, actor.var("b1")?)?;
    let h = t.tanh(h)?;
    let mean = linear(t, h, actor.var("w2")?, actor.var("b2")?)?;
    let log_std = t.clamp(actor.var("log_std")?, LOG_STD_MIN, LOG_STD_MAX)?;
    let c = linear(t, input, critic.var("w1")?, critic.var("b1")?)?;
    let c = t.tanh(c)?;
    let value = linear(t, c, critic.var("w2")?, critic.var("b2")?)?;
    Ok(PolicyHeads { mean, log_std, value })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Action {
    /// Unclipped Gaussian sample; its log-density is `log_prob`.
    pub raw: Vec<f64>,
    /// `raw` clipped to `[-bound, bound]`, what the environment receives.
    pub clipped: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
}

/// Samples an action for one state and latent.
pub fn act<R: Rng + ?Sized>(
    s: &[f64],
    h: &[f64],
    params: &PolicyParams,
    bound: f64,
    rng: &mut R,
) -> Result<Action, NumericsError> {
    let mut input = s.to_vec();
    input.extend_from_slice(h);
    if input.len() != params.input_dim() {
        return Err(NumericsError::ShapeMismatch {
            op: "act",
            lhs: vec![1, input.len()],
            rhs: vec![params.input_dim(), params.action_dim()],
        });
    }
    let mut t = Tape::new();
    let actor = Bindings::bind_frozen(&mut t, &params.actor);
    let critic = Bindings::bind_frozen(&mut t, &params.critic);
    let x = t.constant(Tensor::matrix(1, input.len(), input)?);
    let heads = policy_forward(&mut t, x, &actor, &critic)?;
    let mean = t.value(heads.mean).data().to_vec();
    let log_std = t.value(heads.log_std).data().to_vec();
    let raw: Vec<f64> = mean
        .iter()
        .zip(&log_std)
        .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let a = t.constant(Tensor::matrix(1, raw.len(), raw.clone())?);
    let log_prob = t.gaussian_log_density(a, heads.mean, heads.log_std)?;
    Ok(Action {
        clipped: raw.iter().map(|v| v.clamp(-bound, bound)).collect(),
        log_prob: t.value(log_prob).data()[0],
        value: t.value(heads.value).data()[0],
        raw,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Advantages {
    pub adv: Vec<f64>,
    pub returns: Vec<f64>,
    /// One-step TD residuals `r + gamma V' (1 - done) - V`.
    pub deltas: Vec<f64>,
}

/// GAE over a contiguous sequence. `bootstrap` is `V` of the state after
/// the last step and is ignored if that step is terminal.
pub fn advantages(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Advantages {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut deltas = vec![0.0; n];
    let mut running = 0.0;
    for i in (0..n).rev() {
        let next_v = if i + 1 < n { values[i + 1] } else { bootstrap };
        let live = if dones[i] { 0.0 } else { 1.0 };
        deltas[i] = rewards[i] + gamma * next_v * live - values[i];
        running = deltas[i] + gamma * lambda * live * running;
        adv[i] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Advantages { adv, returns, deltas }
}

/// Shifts and scales to zero mean and unit (population) std.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    values.iter().map(|v| (v - mean) / (std + 1e-8)).collect()
}

/// Fixed per-sample quantities of one PPO batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoBatch {
    pub actions: Tensor,
    pub old_log_probs: Tensor,
    pub advantages: Tensor,
    pub returns: Tensor,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.actions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` of every field.
    pub fn select(&self, idx: &[usize]) -> PpoBatch {
        PpoBatch {
            actions: select_rows(&self.actions, idx),
            old_log_probs: select_rows(&self.old_log_probs, idx),
            advantages: select_rows(&self.advantages, idx),
            returns: select_rows(&self.returns, idx),
        }
    }
}

pub fn select_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let w = x.shape()[1..].iter().product::<usize>();
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("row selection")
}

pub struct PpoTerms {
    pub loss: Var,
    pub surrogate: Var,
    pub value_loss: Var,
    pub entropy: Var,
}

/// `-mean(min(rho A, clip(rho) A)) + c_v mean((V - R)^2) - c_e H`.
pub fn ppo_loss(
    t: &mut Tape,
    input: Var,
    batch: &PpoBatch,
    actor: &Bindings,
    critic: &Bindings,
    cfg: &PolicyConfig,
) -> Result<PpoTerms, NumericsError> {
    let rows = t.value(input).shape()[0];
    let heads = policy_forward(t, input, actor, critic)?;
    let log_std = t.expand_leading(heads.log_std, rows)?;
    let a = t.constant(batch.actions.clone());
    let logp = t.gaussian_log_density(a, heads.mean, log_std)?;
    let old = t.constant(batch.old_log_probs.clone());
    let diff = t.sub(logp, old)?;
    let ratio = t.exp(diff)?;
    let adv = t.constant(batch.advantages.clone());
    let s1 = t.mul(ratio, adv)?;
    let clipped = t.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
    let s2 = t.mul(clipped, adv)?;
    let surr = t.minimum(s1, s2)?;
    let surr = t.mean(surr)?;
    let surrogate = t.neg(surr)?;

    let ret = t.constant(batch.returns.clone());
    let err = t.sub(heads.value, ret)?;
    let sq = t.square(err)?;
    let value_loss = t.mean(sq)?;

    let dims = t.value(heads.log_std).numel() as f64;
    let ent = t.sum(heads.log_std)?;
    let entropy = t.shift(ent, dims * HALF_LN_TWO_PI_E)?;

    let v = t.scale(value_loss, cfg.value_coef)?;
    let e = t.scale(entropy, cfg.entropy_coef)?;
    let loss = t.add(surrogate, v)?;
    let loss = t.sub(loss, e)?;
    Ok(PpoTerms { loss, surrogate, value_loss, entropy })
}

/// Policy-only PPO: `epochs` passes of shuffled minibatches over fixed
/// inputs. Returns the mean minibatch loss of the last epoch.
pub fn ppo_update<R: Rng + ?Sized>(
    params: &mut PolicyParams,
    actor_opt: &mut Adam,
    critic_opt: &mut Adam,
    inputs: &Tensor,
    batch: &PpoBatch,
    cfg: &PolicyConfig,
    rng: &mut R,
) -> Result<f64, NumericsError> {
    let n = batch.len();
    if n == 0 {
        return Err(NumericsError::Invalid { op: "ppo_update", msg: "empty batch".into() });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mb = cfg.minibatch.clamp(1, n);
    let mut last = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(mb) {
            let mut t = Tape::new();
            let actor = Bindings::bind(&mut t, &params.actor);
            let critic = Bindings::bind(&mut t, &params.critic);
            let x = t.constant(select_rows(inputs, chunk));
            let terms = ppo_loss(&mut t, x, &batch.select(chunk), &actor, &critic, cfg)?;
            total += t.value(terms.loss).data()[0];
            count += 1;
            let grads = t.backward(terms.loss)?;
            let collect = |b: &Bindings| -> Result<ParamGroup, NumericsError> {
                let mut g = ParamGroup::new();
                for (name, var) in b.iter() {
                    g.set(name, grads.get_or_zeros(var), true);
                }
                Ok(g)
            };
            actor_opt.step(&mut params.actor, &collect(&actor)?)?;
            critic_opt.step(&mut params.critic, &collect(&critic)?)?;
        }
        last = total / count as f64;
    }
    Ok(last)
}
