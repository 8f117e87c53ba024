use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::corep::{Branches, CorepConfig};
use crate::envs::{BaseEnv, EnvConfig, Mode};
use crate::policy::PolicyConfig;
use crate::td_detect::{DEFAULT_ALPHA, DEFAULT_CAPACITY, DEFAULT_ETA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoCorep,
    NoVae,
    NoGuide,
    NoSparsity,
    NoMag,
    SingleGat,
    PpoOnly,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoCorep,
        Variant::NoVae,
        Variant::NoGuide,
        Variant::NoSparsity,
        Variant::NoMag,
        Variant::SingleGat,
        Variant::PpoOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCorep => "no-corep",
            Variant::NoVae => "no-vae",
            Variant::NoGuide => "no-guide",
            Variant::NoSparsity => "no-sparsity",
            Variant::NoMag => "no-mag",
            Variant::SingleGat => "single-gat",
            Variant::PpoOnly => "ppo-only",
        }
    }

    /// Representation settings for this variant, or `None` when the policy
    /// sees a zero latent.
    pub fn apply(self, base: &CorepConfig) -> Option<CorepConfig> {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoCorep => c.branches = Branches::Direct,
            Variant::NoVae => {
                c.sample_latent = false;
                c.use_vae_loss = false;
            }
            Variant::NoGuide => c.use_guide = false,
            Variant::NoSparsity => c.use_sparsity = false,
            Variant::NoMag => c.use_mag = false,
            Variant::SingleGat => c.branches = Branches::Single,
            Variant::PpoOnly => return None,
        }
        Some(c)
    }

    /// Whether the TD gate can freeze the core branch.
    pub fn gated(self) -> bool {
        matches!(self, Variant::Full | Variant::NoVae | Variant::NoSparsity | Variant::NoMag)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown variant {s:?}")))
    }
}

/// Everything one training run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub corep: CorepConfig,
    pub policy: PolicyConfig,
    pub lr_mlp: f64,
    pub detector_capacity: usize,
    pub detector_alpha: f64,
    pub detector_eta: f64,
    pub grad_clip: f64,
    pub episodes_per_batch: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub variant: Variant,
    pub checkpoint_every: usize,
    pub wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            corep: CorepConfig::default(),
            policy: PolicyConfig::default(),
            lr_mlp: 1e-3,
            detector_capacity: DEFAULT_CAPACITY,
            detector_alpha: DEFAULT_ALPHA,
            detector_eta: DEFAULT_ETA,
            grad_clip: 0.5,
            episodes_per_batch: 4,
            total_steps: 100_000,
            seed: 0,
            variant: Variant::Full,
            checkpoint_every: 0,
            wall_clock: true,
        }
    }
}

/// Keys that change what a run computes; the config hash covers exactly these.
const RUN_LENGTH_KEYS: [&str; 3] = ["total_steps", "checkpoint_every", "wall_clock"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| HarnessError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(HarnessError::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let v = value.trim();
        match key {
            "env.base" => self.env.base = v.parse::<BaseEnv>().map_err(|e| HarnessError::Config(e.to_string()))?,
            "env.mode" => self.env.mode = v.parse::<Mode>().map_err(|e| HarnessError::Config(e.to_string()))?,
            "env.degree" => self.env.degree = parse(key, v)?,
            "env.horizon" => self.env.horizon = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "episodes_per_batch" => self.episodes_per_batch = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "wall_clock" => self.wall_clock = parse_bool(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "lr.mlp" => self.lr_mlp = parse(key, v)?,
            "lr.policy" => self.policy.lr = parse(key, v)?,
            "corep.nodes" => self.corep.nodes = parse(key, v)?,
            "corep.node_dim" => self.corep.node_dim = parse(key, v)?,
            "corep.graph_dim" => self.corep.graph_dim = parse(key, v)?,
            "corep.latent_dim" => self.corep.latent_dim = parse(key, v)?,
            "corep.layers" => self.corep.layers = parse(key, v)?,
            "corep.heads" => self.corep.heads = parse(key, v)?,
            "corep.tau" => self.corep.tau = if v == "auto" { None } else { Some(parse(key, v)?) },
            "corep.featurizer_hidden" => self.corep.featurizer_hidden = parse(key, v)?,
            "corep.encoder_hidden" => self.corep.encoder_hidden = parse(key, v)?,
            "corep.decoder_hidden" => self.corep.decoder_hidden = parse(key, v)?,
            "corep.leaky_slope" => self.corep.leaky_slope = parse(key, v)?,
            "corep.freeze_featurizer" => self.corep.freeze_featurizer = parse_bool(key, v)?,
            "lambda1" => self.corep.lambda1 = parse(key, v)?,
            "lambda2" => self.corep.lambda2 = parse(key, v)?,
            "policy.hidden" => self.policy.hidden = parse(key, v)?,
            "policy.log_std_init" => self.policy.log_std_init = parse(key, v)?,
            "ppo.gamma" => self.policy.gamma = parse(key, v)?,
            "ppo.gae_lambda" => self.policy.gae_lambda = parse(key, v)?,
            "ppo.clip" => self.policy.clip = parse(key, v)?,
            "ppo.epochs" => self.policy.epochs = parse(key, v)?,
            "ppo.minibatch" => self.policy.minibatch = parse(key, v)?,
            "ppo.value_coef" => self.policy.value_coef = parse(key, v)?,
            "ppo.entropy_coef" => self.policy.entropy_coef = parse(key, v)?,
            "ppo.normalize_advantages" => self.policy.normalize_advantages = parse_bool(key, v)?,
            "detector.capacity" => self.detector_capacity = parse(key, v)?,
            "detector.alpha" => self.detector_alpha = parse(key, v)?,
            "detector.eta" => self.detector_eta = parse(key, v)?,
            other => return Err(HarnessError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = |x: f64| format!("{x:?}");
        vec![
            ("env.base", self.env.base.to_string()),
            ("env.mode", self.env.mode.to_string()),
            ("env.degree", f(self.env.degree)),
            ("env.horizon", self.env.horizon.to_string()),
            ("seed", self.seed.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("variant", self.variant.to_string()),
            ("episodes_per_batch", self.episodes_per_batch.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("wall_clock", self.wall_clock.to_string()),
            ("grad_clip", f(self.grad_clip)),
            ("lr.mlp", f(self.lr_mlp)),
            ("lr.policy", f(self.policy.lr)),
            ("corep.nodes", self.corep.nodes.to_string()),
            ("corep.node_dim", self.corep.node_dim.to_string()),
            ("corep.graph_dim", self.corep.graph_dim.to_string()),
            ("corep.latent_dim", self.corep.latent_dim.to_string()),
            ("corep.layers", self.corep.layers.to_string()),
            ("corep.heads", self.corep.heads.to_string()),
            ("corep.tau", self.corep.tau.map_or("auto".to_string(), f)),
            ("corep.featurizer_hidden", self.corep.featurizer_hidden.to_string()),
            ("corep.encoder_hidden", self.corep.encoder_hidden.to_string()),
            ("corep.decoder_hidden", self.corep.decoder_hidden.to_string()),
            ("corep.leaky_slope", f(self.corep.leaky_slope)),
            ("corep.freeze_featurizer", self.corep.freeze_featurizer.to_string()),
            ("lambda1", f(self.corep.lambda1)),
            ("lambda2", f(self.corep.lambda2)),
            ("policy.hidden", self.policy.hidden.to_string()),
            ("policy.log_std_init", f(self.policy.log_std_init)),
            ("ppo.gamma", f(self.policy.gamma)),
            ("ppo.gae_lambda", f(self.policy.gae_lambda)),
            ("ppo.clip", f(self.policy.clip)),
            ("ppo.epochs", self.policy.epochs.to_string()),
            ("ppo.minibatch", self.policy.minibatch.to_string()),
            ("ppo.value_coef", f(self.policy.value_coef)),
            ("ppo.entropy_coef", f(self.policy.entropy_coef)),
            ("ppo.normalize_advantages", self.policy.normalize_advantages.to_string()),
            ("detector.capacity", self.detector_capacity.to_string()),
            ("detector.alpha", f(self.detector_alpha)),
            ("detector.eta", f(self.detector_eta)),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| HarnessError::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), HarnessError> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.env.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.corep.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(c) = self.variant.apply(&self.corep) {
            c.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        let p = &self.policy;
        if p.hidden == 0 || p.epochs == 0 || p.minibatch == 0 {
            return bad("policy.hidden, ppo.epochs and ppo.minibatch must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&p.gamma) || !(0.0..=1.0).contains(&p.gae_lambda) {
            return bad("ppo.gamma and ppo.gae_lambda must lie in [0, 1]".into());
        }
        if !(p.clip > 0.0) {
            return bad("ppo.clip must be > 0".into());
        }
        if !(p.lr > 0.0 && self.lr_mlp > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if self.detector_capacity == 0 {
            return bad("detector.capacity must be >= 1".into());
        }
        if !(self.detector_alpha > 0.0 && self.detector_alpha <= 1.0) {
            return bad("detector.alpha must lie in (0, 1]".into());
        }
        if !(self.detector_eta >= 0.0) {
            return bad("detector.eta must be >= 0".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0".into());
        }
        if self.episodes_per_batch == 0 {
            return bad("episodes_per_batch must be >= 1".into());
        }
        Ok(())
    }

    /// SHA-256 over every key except run length and output settings.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !RUN_LENGTH_KEYS.contains(&k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig { seed: self.seed, ..self.env.clone() }
    }
}
