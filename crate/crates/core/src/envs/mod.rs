//! Small continuous-control tasks whose dynamics are scaled by a random
//! time- and episode-dependent factor:
//!
//! `s' = f(s, a) + f(s, a) * degree * [c1 cos(c2 t) + c3 sin(c4 i)]`
//!
//! with `c1, c2` redrawn every step and `c3, c4` every episode, all from
//! Normal(0.5, 0.5). The within-episode mode keeps only the cosine term, the
//! across-episode mode only the sine term. Every draw is taken in every mode,
//! so runs that differ only in mode or degree see the same random stream.

mod base;
mod toy;
mod trajectory;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use base::BaseEnv;
pub use toy::{toy_causal_step, ToyCausalStep};
pub use trajectory::{write_trajectory_csv, TransitionRecord};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("unknown base environment {0:?} (expected point-reacher, pendulum or toy-causal)")]
    UnknownBase(String),
    #[error("unknown non-stationarity mode {0:?} (expected W+A-EP, W-EP, A-EP or stationary)")]
    UnknownMode(String),
    #[error("non-stationarity degree must be finite and >= 0, got {0}")]
    BadDegree(f64),
    #[error("horizon must be >= 1")]
    BadHorizon,
    #[error("action has {got} entries, expected {expected}")]
    ActionShape { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Stationary,
    WithinAndAcross,
    Within,
    Across,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Stationary => "stationary",
            Mode::WithinAndAcross => "W+A-EP",
            Mode::Within => "W-EP",
            Mode::Across => "A-EP",
        })
    }
}

impl FromStr for Mode {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stationary" => Ok(Mode::Stationary),
            "W+A-EP" => Ok(Mode::WithinAndAcross),
            "W-EP" => Ok(Mode::Within),
            "A-EP" => Ok(Mode::Across),
            other => Err(EnvError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub base: BaseEnv,
    pub mode: Mode,
    pub degree: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            base: BaseEnv::PointReacher,
            mode: Mode::WithinAndAcross,
            degree: 1.0,
            horizon: 100,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.degree.is_finite() && self.degree >= 0.0) {
            return Err(EnvError::BadDegree(self.degree));
        }
        if self.horizon == 0 {
            return Err(EnvError::BadHorizon);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub s: Vec<f64>,
    pub t: usize,
    pub episode: usize,
    pub c3: f64,
    pub c4: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
    /// The next state was non-finite; the episode ends here.
    pub failed: bool,
}

fn coefficient_law() -> Normal<f64> {
    Normal::new(0.5, 0.5).expect("valid normal")
}

/// Starts episode `episode`: draws the base initial state, then `c3`, `c4`.
pub fn reset<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R, episode: usize) -> EnvState {
    let s = cfg.base.initial_state(rng);
    let law = coefficient_law();
    let c3 = law.sample(rng);
    let c4 = law.sample(rng);
    EnvState { s, t: 0, episode, c3, c4 }
}

/// Scale factor applied on top of `f(s, a)` at this step.
pub fn perturbation(mode: Mode, degree: f64, c1: f64, c2: f64, state: &EnvState) -> f64 {
    let within = c1 * (c2 * state.t as f64).cos();
    let across = state.c3 * (state.c4 * state.episode as f64).sin();
    let bracket = match mode {
        Mode::Stationary => return 0.0,
        Mode::WithinAndAcross => within + across,
        Mode::Within => within,
        Mode::Across => across,
    };
    degree * bracket
}

/// Advances one step. Actions outside the box are clipped; `c1`, `c2` are
/// drawn on every call.
pub fn step<R: Rng + ?Sized>(
    state: &EnvState,
    action: &[f64],
    cfg: &EnvConfig,
    rng: &mut R,
) -> Result<StepOutcome, EnvError> {
    if action.len() != cfg.base.action_dim() {
        return Err(EnvError::ActionShape { expected: cfg.base.action_dim(), got: action.len() });
    }
    let law = coefficient_law();
    let c1 = law.sample(rng);
    let c2 = law.sample(rng);
    let a = cfg.base.clip_action(action);
    let f = cfg.base.dynamics(&state.s, &a);
    let p = perturbation(cfg.mode, cfg.degree, c1, c2, state);
    let mut s: Vec<f64> = if p == 0.0 { f } else { f.iter().map(|v| v + v * p).collect() };
    let failed = !s.iter().all(|v| v.is_finite());
    let reward = if failed {
        cfg.base.reward_floor()
    } else {
        cfg.base.project(&mut s);
        cfg.base.reward(&s, &a)
    };
    let t = state.t + 1;
    Ok(StepOutcome {
        next: EnvState { s, t, episode: state.episode, c3: state.c3, c4: state.c4 },
        reward,
        done: failed || t >= cfg.horizon,
        failed,
    })
}

/// Runs `episodes` full episodes with `policy` choosing actions, using an
/// rng stream owned by the caller.
pub fn rollout<R, P>(
    cfg: &EnvConfig,
    rng: &mut R,
    episodes: usize,
    mut policy: P,
) -> Result<Vec<TransitionRecord>, EnvError>
where
    R: Rng + ?Sized,
    P: FnMut(&EnvState) -> Vec<f64>,
{
    cfg.validate()?;
    let mut out = Vec::with_capacity(episodes * cfg.horizon);
    for episode in 0..episodes {
        let mut state = reset(cfg, rng, episode);
        loop {
            let a = policy(&state);
            let o = step(&state, &a, cfg, rng)?;
            out.push(TransitionRecord {
                episode,
                step: state.t,
                s: state.s.clone(),
                a: cfg.base.clip_action(&a),
                reward: o.reward,
                done: o.done,
            });
            state = o.next;
            if o.done {
                break;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn modes_parse() {
        for m in [Mode::Stationary, Mode::WithinAndAcross, Mode::Within, Mode::Across] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
    }

    #[test]
    fn zero_degree_is_unperturbed() {
        let cfg = EnvConfig { degree: 0.0, ..EnvConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s0 = reset(&cfg, &mut rng, 0);
        let o = step(&s0, &[0.3, -0.2], &cfg, &mut rng).unwrap();
        assert_eq!(o.next.s, BaseEnv::PointReacher.dynamics(&s0.s, &[0.3, -0.2]));
    }

    #[test]
    fn horizon_ends_episode() {
        let cfg = EnvConfig { horizon: 2, ..EnvConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let recs = rollout(&cfg, &mut rng, 3, |_| vec![0.0, 0.0]).unwrap();
        assert_eq!(recs.len(), 6);
        assert!(recs.iter().filter(|r| r.done).count() == 3);
    }

    #[test]
    fn invalid_config() {
        assert!(EnvConfig { degree: -1.0, ..EnvConfig::default() }.validate().is_err());
        assert!(EnvConfig { horizon: 0, ..EnvConfig::default() }.validate().is_err());
    }
}
