use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::checkpoint::{self, RngState};
use super::config::RunConfig;
use super::metrics::{MetricsRow, METRICS_HEADER};
use super::{in_component, numerics_in, HarnessError};
use crate::corep::{dual_forward, losses, vae_heads, CorepModel, LossWeights, ModelBindings};
use crate::envs::{self, EnvConfig, EnvState};
use crate::numerics::{clip_global_norm, Adam, Bindings, Gradients, ParamGroup, Tape, Tensor};
use crate::policy::{act, advantages, normalize, ppo_loss, select_rows, PolicyParams, PpoBatch};
use crate::td_detect::TdBuffer;

const STREAM_ENV: u64 = 0;
const STREAM_POLICY: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// How the core-branch freeze flag is chosen before each update phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Follow the TD detector.
    Auto,
    /// Always frozen.
    Frozen,
    /// Never frozen.
    Open,
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Auto => "auto",
            GateMode::Frozen => "frozen",
            GateMode::Open => "open",
        })
    }
}

impl FromStr for GateMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(GateMode::Auto),
            "frozen" => Ok(GateMode::Frozen),
            "open" => Ok(GateMode::Open),
            _ => Err(HarnessError::Config(format!("unknown gate mode {s:?}"))),
        }
    }
}

/// Per-step data gathered during collection.
#[derive(Default)]
struct Rollout {
    states: Vec<f64>,
    noise: Vec<f64>,
    actions: Vec<f64>,
    log_probs: Vec<f64>,
    values: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    episode_returns: Vec<f64>,
}

#[derive(Default)]
struct LossSums {
    count: usize,
    policy: f64,
    guide: Option<f64>,
    mag: Option<f64>,
    sparsity: Option<f64>,
    recon: Option<f64>,
    kl: Option<f64>,
    total: f64,
}

fn accumulate(slot: &mut Option<f64>, v: Option<f64>) {
    if let Some(x) = v {
        *slot = Some(slot.unwrap_or(0.0) + x);
    }
}

impl LossSums {
    fn mean(o: Option<f64>, n: f64) -> Option<f64> {
        o.map(|v| v / n)
    }
}

pub struct Trainer {
    cfg: RunConfig,
    model: Option<CorepModel>,
    policy: PolicyParams,
    opts: BTreeMap<String, Adam>,
    td: TdBuffer,
    env_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    iter: usize,
    env_steps: usize,
    episode: usize,
    gate: GateMode,
    started: Instant,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let mut init_rng = stream(cfg.seed, STREAM_INIT);
        let d_s = cfg.env.base.state_dim();
        let model = match cfg.variant.apply(&cfg.corep) {
            Some(c) => Some(CorepModel::init(c, d_s, &mut init_rng).map_err(in_component("representation"))?),
            None => None,
        };
        let policy = PolicyParams::init(d_s + cfg.corep.latent_dim, cfg.env.base.action_dim(), &cfg.policy, &mut init_rng);
        let mut opts = BTreeMap::new();
        if let Some(m) = &model {
            for (name, _) in m.groups() {
                opts.insert(name.to_string(), Adam::new(cfg.lr_mlp));
            }
        }
        opts.insert("actor".into(), Adam::new(cfg.policy.lr));
        opts.insert("critic".into(), Adam::new(cfg.policy.lr));
        let td = TdBuffer::new(cfg.detector_capacity).map_err(|e| HarnessError::Config(e.to_string()))?;
        let gate = if cfg.variant.gated() { GateMode::Auto } else { GateMode::Open };
        Ok(Self {
            env_rng: stream(cfg.seed, STREAM_ENV),
            policy_rng: stream(cfg.seed, STREAM_POLICY),
            noise_rng: stream(cfg.seed, STREAM_NOISE),
            cfg,
            model,
            policy,
            opts,
            td,
            iter: 0,
            env_steps: 0,
            episode: 0,
            gate,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> Option<&CorepModel> {
        self.model.as_ref()
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.policy
    }

    pub fn td_buffer(&self) -> &TdBuffer {
        &self.td
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn gate_mode(&self) -> GateMode {
        self.gate
    }

    pub fn set_gate_mode(&mut self, mode: GateMode) {
        self.gate = mode;
    }

    /// Freeze flag applied in the most recent update phase.
    pub fn core_frozen(&self) -> bool {
        self.model.as_ref().is_some_and(|m| m.gat.core_frozen)
    }

    pub fn set_total_steps(&mut self, steps: usize) {
        self.cfg.total_steps = steps;
    }

    pub fn is_done(&self) -> bool {
        self.env_steps >= self.cfg.total_steps
    }

    fn has_core(&self) -> bool {
        self.model.as_ref().is_some_and(|m| !m.gat.core.is_empty())
    }

    /// Latent for one state from the current parameters, without gradients.
    fn encode(&self, s: &[f64], noise: &[f64]) -> Result<Vec<f64>, HarnessError> {
        let Some(model) = &self.model else {
            return Ok(vec![0.0; self.cfg.corep.latent_dim]);
        };
        let mut t = Tape::new();
        let b = model.bind_constant(&mut t);
        let sv = t.constant(Tensor::matrix(1, s.len(), s.to_vec()).map_err(numerics_in("representation"))?);
        let nv = t.constant(Tensor::matrix(1, noise.len(), noise.to_vec()).map_err(numerics_in("representation"))?);
        let out = dual_forward(&mut t, sv, &b, &model.cfg).map_err(in_component("representation"))?;
        let vae = vae_heads(&mut t, out.encoder_input, sv, nv, &b, model.cfg.sample_latent)
            .map_err(in_component("L_VAE"))?;
        Ok(t.value(vae.h).data().to_vec())
    }

    fn collect(&mut self) -> Result<Rollout, HarnessError> {
        let env_cfg: EnvConfig = self.cfg.env_config();
        let d_h = self.cfg.corep.latent_dim;
        let bound = self.cfg.env.base.action_bound();
        let mut r = Rollout::default();
        for _ in 0..self.cfg.episodes_per_batch {
            let mut state: EnvState = envs::reset(&env_cfg, &mut self.env_rng, self.episode);
            let mut ret = 0.0;
            loop {
                let noise: Vec<f64> = if self.model.is_some() {
                    (0..d_h).map(|_| StandardNormal.sample(&mut self.noise_rng)).collect()
                } else {
                    vec![0.0; d_h]
                };
                let h = self.encode(&state.s, &noise)?;
                let a = act(&state.s, &h, &self.policy, bound, &mut self.policy_rng)
                    .map_err(numerics_in("policy"))?;
                let o = envs::step(&state, &a.clipped, &env_cfg, &mut self.env_rng)?;
                if o.failed {
                    return Err(HarnessError::numerical("environment", "non-finite state"));
                }
                r.states.extend_from_slice(&state.s);
                r.noise.extend_from_slice(&noise);
                r.actions.extend_from_slice(&a.raw);
                r.log_probs.push(a.log_prob);
                r.values.push(a.value);
                r.rewards.push(o.reward);
                r.dones.push(o.done);
                ret += o.reward;
                self.env_steps += 1;
                state = o.next;
                if o.done {
                    break;
                }
            }
            r.episode_returns.push(ret);
            self.episode += 1;
        }
        Ok(r)
    }

    /// Collects one batch of episodes and runs one update phase.
    pub fn run_iteration(&mut self) -> Result<MetricsRow, HarnessError> {
        let roll = self.collect()?;
        let n = roll.rewards.len();
        let d_s = self.cfg.env.base.state_dim();
        let d_h = self.cfg.corep.latent_dim;
        let d_a = self.cfg.env.base.action_dim();
        let pc = self.cfg.policy.clone();

        // Episodes end at a done flag, so GAE never bootstraps across them.
        let est = advantages(&roll.rewards, &roll.values, &roll.dones, 0.0, pc.gamma, pc.gae_lambda);
        let adv = if pc.normalize_advantages { normalize(&est.adv) } else { est.adv.clone() };
        let col = |v: Vec<f64>| Tensor::matrix(n, 1, v).map_err(numerics_in("policy"));
        let batch = PpoBatch {
            actions: Tensor::matrix(n, d_a, roll.actions.clone()).map_err(numerics_in("policy"))?,
            old_log_probs: col(roll.log_probs.clone())?,
            advantages: col(adv)?,
            returns: col(est.returns.clone())?,
        };
        let states = Tensor::matrix(n, d_s, roll.states.clone()).map_err(numerics_in("policy"))?;
        let noise = Tensor::matrix(n, d_h, roll.noise.clone()).map_err(numerics_in("policy"))?;

        let reading = self.td.gate(self.cfg.detector_alpha, self.cfg.detector_eta);
        let frozen = self.has_core()
            && match self.gate {
                GateMode::Auto => !reading.update,
                GateMode::Frozen => true,
                GateMode::Open => false,
            };
        if let Some(m) = &mut self.model {
            m.gat.core_frozen = frozen;
        }

        let mut sums = LossSums::default();
        let mut order: Vec<usize> = (0..n).collect();
        let mb = pc.minibatch.clamp(1, n.max(1));
        for _ in 0..pc.epochs {
            order.shuffle(&mut self.policy_rng);
            for chunk in order.chunks(mb) {
                self.minibatch_step(&states, &noise, &batch, chunk, frozen, &mut sums)?;
            }
        }

        for d in &est.deltas {
            self.td.push(*d).map_err(|e| HarnessError::numerical("TD error", e))?;
        }
        self.iter += 1;

        let k = sums.count.max(1) as f64;
        let returns = &roll.episode_returns;
        let rm = returns.iter().sum::<f64>() / returns.len() as f64;
        let rs = (returns.iter().map(|r| (r - rm).powi(2)).sum::<f64>() / returns.len() as f64).sqrt();
        let finite = |v: f64| v.is_finite().then_some(v);
        Ok(MetricsRow {
            iter: self.iter,
            env_steps: self.env_steps,
            return_mean: rm,
            return_std: rs,
            l_policy: sums.policy / k,
            l_guide: LossSums::mean(sums.guide, k),
            l_mag: LossSums::mean(sums.mag, k),
            l_sparsity: LossSums::mean(sums.sparsity, k),
            l_vae_recon: LossSums::mean(sums.recon, k),
            l_vae_kl: LossSums::mean(sums.kl, k),
            l_total: sums.total / k,
            core_frozen: self.has_core().then_some(frozen),
            delta_alpha: finite(reading.recent),
            mu_delta: finite(reading.mu),
            sigma_delta: finite(reading.sigma),
            seconds: if self.cfg.wall_clock { self.started.elapsed().as_secs_f64() } else { 0.0 },
        })
    }

    fn minibatch_step(
        &mut self,
        states: &Tensor,
        noise: &Tensor,
        batch: &PpoBatch,
        idx: &[usize],
        frozen: bool,
        sums: &mut LossSums,
    ) -> Result<(), HarnessError> {
        let rows = idx.len();
        let mut t = Tape::new();
        let s = t.constant(select_rows(states, idx));
        let actor = Bindings::bind(&mut t, &self.policy.actor);
        let critic = Bindings::bind(&mut t, &self.policy.critic);
        let sub = batch.select(idx);

        let mut repr: Option<(ModelBindings, crate::corep::DualOutput, crate::corep::VaeOutput)> = None;
        let input = if let Some(model) = &self.model {
            let b = model.bind(&mut t, !frozen);
            let out = dual_forward(&mut t, s, &b, &model.cfg).map_err(in_component("representation"))?;
            let nz = t.constant(select_rows(noise, idx));
            let vae = vae_heads(&mut t, out.encoder_input, s, nz, &b, model.cfg.sample_latent)
                .map_err(in_component("L_VAE"))?;
            let input = t.concat_last(&[s, vae.h]).map_err(numerics_in("representation"))?;
            repr = Some((b, out, vae));
            input
        } else {
            let z = t.constant(Tensor::zeros(&[rows, self.cfg.corep.latent_dim]));
            t.concat_last(&[s, z]).map_err(numerics_in("policy input"))?
        };

        let terms = ppo_loss(&mut t, input, &sub, &actor, &critic, &self.cfg.policy).map_err(numerics_in("L_policy"))?;
        let value = |t: &Tape, v| t.value(v).data()[0];
        sums.count += 1;
        sums.policy += value(&t, terms.loss);

        let total = match (&self.model, &repr) {
            (Some(model), Some((_, out, vae))) => {
                let w = LossWeights::from_config(&model.cfg);
                let lt = losses(&mut t, out.a_core, out.a_general, Some((vae.recon, vae.kl)), terms.loss, &w)
                    .map_err(in_component("regularizers"))?;
                accumulate(&mut sums.guide, lt.guide.map(|v| value(&t, v)));
                accumulate(&mut sums.mag, lt.mag.map(|v| value(&t, v)));
                accumulate(&mut sums.sparsity, lt.sparsity.map(|v| value(&t, v)));
                if w.vae {
                    accumulate(&mut sums.recon, Some(value(&t, vae.recon)));
                    accumulate(&mut sums.kl, Some(value(&t, vae.kl)));
                }
                lt.total
            }
            _ => terms.loss,
        };
        let total_value = value(&t, total);
        if !total_value.is_finite() {
            return Err(HarnessError::numerical("L_total", "non-finite loss"));
        }
        sums.total += total_value;

        let grads = t.backward(total).map_err(numerics_in("gradient"))?;
        let mut named: BTreeMap<&'static str, ParamGroup> = BTreeMap::new();
        named.insert("actor", collect(&grads, &actor));
        named.insert("critic", collect(&grads, &critic));
        if let Some((b, _, _)) = &repr {
            if !(frozen && self.cfg.corep.freeze_featurizer) {
                named.insert("featurizer", collect(&grads, &b.featurizer));
            }
            if !frozen {
                named.insert("core", collect(&grads, &b.core));
            }
            named.insert("general", collect(&grads, &b.general));
            named.insert("encoder", collect(&grads, &b.encoder));
            named.insert("decoder", collect(&grads, &b.decoder));
        }
        {
            let mut refs: Vec<&mut ParamGroup> = named.values_mut().collect();
            let norm = clip_global_norm(&mut refs, self.cfg.grad_clip);
            if !norm.is_finite() {
                return Err(HarnessError::numerical("gradient", "non-finite gradient norm"));
            }
        }

        let err = numerics_in("optimizer");
        for (name, g) in &named {
            let opt = self.opts.get_mut(*name).expect("optimizer per group");
            match *name {
                "actor" => opt.step(&mut self.policy.actor, g).map_err(&err)?,
                "critic" => opt.step(&mut self.policy.critic, g).map_err(&err)?,
                _ => {
                    let model = self.model.as_mut().expect("representation groups imply a model");
                    for (gname, params) in model.groups_mut() {
                        if gname == *name && !params.is_empty() {
                            opt.step(params, g).map_err(&err)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Serializes the complete run state.
    pub fn checkpoint(&self) -> String {
        let mut meta = vec![
            ("iter".to_string(), self.iter.to_string()),
            ("env_steps".to_string(), self.env_steps.to_string()),
            ("episode".to_string(), self.episode.to_string()),
            ("gate".to_string(), self.gate.to_string()),
            ("core_frozen".to_string(), self.core_frozen().to_string()),
        ];
        for (name, r) in [("env", &self.env_rng), ("policy", &self.policy_rng), ("noise", &self.noise_rng)] {
            meta.push((format!("rng.{name}"), RngState::of(r).to_string()));
        }
        let mut groups: Vec<(String, ParamGroup)> = Vec::new();
        if let Some(m) = &self.model {
            for (name, g) in m.groups() {
                groups.push((format!("params.{name}"), g.clone()));
            }
        }
        groups.push(("params.actor".into(), self.policy.actor.clone()));
        groups.push(("params.critic".into(), self.policy.critic.clone()));
        for (name, opt) in &self.opts {
            groups.push((format!("adam.{name}"), opt.state()));
        }
        checkpoint::Checkpoint { hash: self.cfg.hash(), meta, config: self.cfg.to_text(), groups, td: self.td.snapshot() }
            .to_text()
    }

    /// Restores a run. `overrides` may only change keys outside the config
    /// hash, such as `total_steps`.
    pub fn from_checkpoint<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self, HarnessError> {
        let ck = checkpoint::Checkpoint::parse(text)?;
        let mut cfg = RunConfig::from_text(&ck.config)?;
        if cfg.hash() != ck.hash {
            return Err(HarnessError::Checkpoint("config hash does not match the stored config".into()));
        }
        cfg.apply_overrides(overrides)?;
        if cfg.hash() != ck.hash {
            return Err(HarnessError::Config("overrides change the run definition of a checkpoint".into()));
        }
        let mut tr = Trainer::new(cfg)?;
        let meta = |k: &str| ck.meta_value(k);
        let num = |k: &str| -> Result<usize, HarnessError> {
            meta(k)?.parse().map_err(|_| HarnessError::Checkpoint(format!("bad value for {k}")))
        };
        tr.iter = num("iter")?;
        tr.env_steps = num("env_steps")?;
        tr.episode = num("episode")?;
        tr.gate = meta("gate")?.parse()?;
        let frozen: bool = meta("core_frozen")?
            .parse()
            .map_err(|_| HarnessError::Checkpoint("bad value for core_frozen".into()))?;
        tr.env_rng = meta("rng.env")?.parse::<RngState>()?.build();
        tr.policy_rng = meta("rng.policy")?.parse::<RngState>()?.build();
        tr.noise_rng = meta("rng.noise")?.parse::<RngState>()?.build();

        let take = |name: &str| -> Result<ParamGroup, HarnessError> { ck.group(name).cloned() };
        if let Some(m) = &mut tr.model {
            for (name, g) in m.groups_mut() {
                *g = take(&format!("params.{name}"))?;
            }
            m.gat.core_frozen = frozen;
        }
        tr.policy.actor = take("params.actor")?;
        tr.policy.critic = take("params.critic")?;
        for (name, opt) in tr.opts.iter_mut() {
            opt.load_state(&take(&format!("adam.{name}"))?)
                .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        }
        tr.td = TdBuffer::restore(&ck.td).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        Ok(tr)
    }
}

fn collect(grads: &Gradients, b: &Bindings) -> ParamGroup {
    let mut g = ParamGroup::new();
    for (name, var) in b.iter() {
        g.set(name, grads.get_or_zeros(var), true);
    }
    g
}

/// Runs to `total_steps`, writing the metrics CSV to `out` and, when
/// `checkpoint_every > 0`, checkpoints into `checkpoint_dir`.
pub fn train<W: Write>(
    trainer: &mut Trainer,
    mut out: W,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<MetricsRow>, HarnessError> {
    writeln!(out, "{METRICS_HEADER}")?;
    let mut rows = Vec::new();
    let every = trainer.cfg.checkpoint_every;
    while !trainer.is_done() {
        let row = trainer.run_iteration()?;
        writeln!(out, "{}", row.to_csv())?;
        rows.push(row);
        if let (true, Some(dir)) = (every > 0 && trainer.iter % every == 0, checkpoint_dir) {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(format!("checkpoint_{:06}.txt", trainer.iter)), trainer.checkpoint())?;
        }
    }
    out.flush()?;
    Ok(rows)
}
