use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::EnvError;

pub const DT: f64 = 0.05;
pub const PENDULUM_GRAVITY: f64 = 10.0;
pub const PENDULUM_MAX_SPEED: f64 = 8.0;
pub const PENDULUM_MAX_TORQUE: f64 = 2.0;
pub const REACHER_MAX_SPEED: f64 = 2.0;
pub const TOY_STATE_LIMIT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseEnv {
    /// Planar double integrator chasing a fixed goal. State: position,
    /// velocity, goal (2 each). Action: acceleration in [-1, 1]^2.
    PointReacher,
    /// Torque-limited swing-up. State: cos, sin, angular velocity.
    Pendulum,
    /// `f(s, a) = s + a` on two coordinates with a scalar action.
    ToyCausal,
}

impl BaseEnv {
    pub fn state_dim(self) -> usize {
        match self {
            BaseEnv::PointReacher => 6,
            BaseEnv::Pendulum => 3,
            BaseEnv::ToyCausal => 2,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            BaseEnv::PointReacher => 2,
            BaseEnv::Pendulum | BaseEnv::ToyCausal => 1,
        }
    }

    pub fn action_bound(self) -> f64 {
        match self {
            BaseEnv::PointReacher | BaseEnv::ToyCausal => 1.0,
            BaseEnv::Pendulum => PENDULUM_MAX_TORQUE,
        }
    }

    pub fn clip_action(self, a: &[f64]) -> Vec<f64> {
        let b = self.action_bound();
        a.iter().map(|v| v.clamp(-b, b)).collect()
    }

    pub(crate) fn initial_state<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<f64> {
        match self {
            BaseEnv::PointReacher => {
                let mut u = || rng.random_range(-1.0..=1.0);
                let (px, py) = (u(), u());
                let (gx, gy) = (u(), u());
                vec![px, py, 0.0, 0.0, gx, gy]
            }
            BaseEnv::Pendulum => {
                let th: f64 = rng.random_range(-PI..=PI);
                let thdot: f64 = rng.random_range(-1.0..=1.0);
                vec![th.cos(), th.sin(), thdot]
            }
            BaseEnv::ToyCausal => (0..2).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        }
    }

    /// Unperturbed next state.
    pub fn dynamics(self, s: &[f64], a: &[f64]) -> Vec<f64> {
        match self {
            BaseEnv::PointReacher => {
                let vx = s[2] + a[0] * DT;
                let vy = s[3] + a[1] * DT;
                vec![s[0] + vx * DT, s[1] + vy * DT, vx, vy, s[4], s[5]]
            }
            BaseEnv::Pendulum => {
                let th = s[1].atan2(s[0]);
                let thdot = s[2]
                    + (1.5 * PENDULUM_GRAVITY * th.sin() + 3.0 * a[0]) * DT;
                let thdot = thdot.clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
                let th = th + thdot * DT;
                vec![th.cos(), th.sin(), thdot]
            }
            BaseEnv::ToyCausal => s.iter().map(|v| v + a[0]).collect(),
        }
    }

    /// Clamps a (possibly perturbed) state into the environment's box.
    pub fn project(self, s: &mut [f64]) {
        match self {
            BaseEnv::PointReacher => {
                for i in [0, 1, 4, 5] {
                    s[i] = s[i].clamp(-1.0, 1.0);
                }
                for i in [2, 3] {
                    s[i] = s[i].clamp(-REACHER_MAX_SPEED, REACHER_MAX_SPEED);
                }
            }
            BaseEnv::Pendulum => {
                s[2] = s[2].clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
            }
            BaseEnv::ToyCausal => {
                for v in s.iter_mut() {
                    *v = v.clamp(-TOY_STATE_LIMIT, TOY_STATE_LIMIT);
                }
            }
        }
    }

    /// Reward for arriving in `next` after applying `a`.
    pub fn reward(self, next: &[f64], a: &[f64]) -> f64 {
        match self {
            BaseEnv::PointReacher => -((next[0] - next[4]).powi(2) + (next[1] - next[5]).powi(2)).sqrt(),
            BaseEnv::Pendulum => {
                let th = next[1].atan2(next[0]);
                let u = a[0] / PENDULUM_MAX_TORQUE;
                -(th * th + 0.1 * next[2] * next[2] + 0.001 * u * u)
            }
            BaseEnv::ToyCausal => -next.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    /// Smallest possible reward.
    pub fn reward_floor(self) -> f64 {
        match self {
            BaseEnv::PointReacher => -2.0 * 2f64.sqrt(),
            BaseEnv::Pendulum => -(PI * PI + 0.1 * PENDULUM_MAX_SPEED.powi(2) + 0.001),
            BaseEnv::ToyCausal => -TOY_STATE_LIMIT * 2f64.sqrt(),
        }
    }
}

impl fmt::Display for BaseEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseEnv::PointReacher => "point-reacher",
            BaseEnv::Pendulum => "pendulum",
            BaseEnv::ToyCausal => "toy-causal",
        })
    }
}

impl FromStr for BaseEnv {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point-reacher" => Ok(BaseEnv::PointReacher),
            "pendulum" => Ok(BaseEnv::Pendulum),
            "toy-causal" => Ok(BaseEnv::ToyCausal),
            other => Err(EnvError::UnknownBase(other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reacher_integrates_velocity_first() {
        let s = [0.0, 0.0, 1.0, 0.0, 0.5, 0.5];
        let f = BaseEnv::PointReacher.dynamics(&s, &[1.0, -1.0]);
        assert!((f[2] - 1.05).abs() < 1e-15);
        assert!((f[0] - 1.05 * DT).abs() < 1e-15);
        assert!((f[3] + 0.05).abs() < 1e-15);
        assert_eq!(&f[4..], &[0.5, 0.5]);
    }

    #[test]
    fn pendulum_at_rest_upright_stays() {
        let f = BaseEnv::Pendulum.dynamics(&[1.0, 0.0, 0.0], &[0.0]);
        assert_eq!(f, vec![1.0, 0.0, 0.0]);
        assert_eq!(BaseEnv::Pendulum.reward(&f, &[0.0]), 0.0);
    }

    #[test]
    fn ids_round_trip() {
        for b in [BaseEnv::PointReacher, BaseEnv::Pendulum, BaseEnv::ToyCausal] {
            assert_eq!(b.to_string().parse::<BaseEnv>().unwrap(), b);
        }
        assert!("cartpole".parse::<BaseEnv>().is_err());
    }
}
