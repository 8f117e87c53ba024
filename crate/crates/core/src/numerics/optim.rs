use std::collections::BTreeMap;

use super::error::{NumericsError, Result};
use super::params::ParamGroup;
use super::tensor::Tensor;

/// Adam over one [`ParamGroup`]; only trainable entries are updated.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamGroup, grads: &ParamGroup) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, entry) in params.iter_mut() {
            if !entry.trainable {
                continue;
            }
            let Ok(g) = grads.get(name) else { continue };
            if g.shape() != entry.tensor.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "Adam::step",
                    lhs: entry.tensor.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let n = g.numel();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            for (((p, &gi), mi), vi) in entry
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment buffers and step count as a [`ParamGroup`] for checkpoints.
    pub fn state(&self) -> ParamGroup {
        let mut g = ParamGroup::new();
        g.set("steps", Tensor::scalar(self.steps as f64), false);
        for (name, m) in &self.first {
            g.set(&format!("m.{name}"), Tensor::vector(m.clone()), false);
        }
        for (name, v) in &self.second {
            g.set(&format!("v.{name}"), Tensor::vector(v.clone()), false);
        }
        g
    }

    pub fn load_state(&mut self, state: &ParamGroup) -> Result<()> {
        let steps = state.get("steps")?.item().unwrap_or(0.0);
        self.steps = steps as u64;
        self.first.clear();
        self.second.clear();
        for (name, entry) in state.iter() {
            if let Some(p) = name.strip_prefix("m.") {
                self.first.insert(p.to_string(), entry.tensor.data().to_vec());
            } else if let Some(p) = name.strip_prefix("v.") {
                self.second.insert(p.to_string(), entry.tensor.data().to_vec());
            }
        }
        Ok(())
    }
}

/// Scales every gradient so that the joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm(groups: &mut [&mut ParamGroup], max_norm: f64) -> f64 {
    let total: f64 = groups
        .iter()
        .flat_map(|g| g.iter().map(|(_, e)| e.tensor.data().iter().map(|v| v * v).sum::<f64>()))
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for g in groups.iter_mut() {
            for (_, e) in g.iter_mut() {
                e.tensor.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = ParamGroup::new();
        p.insert("x", Tensor::vector(vec![3.0, -2.0]), true).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let x = p.get("x").unwrap().data().to_vec();
            let mut g = ParamGroup::new();
            g.insert("x", Tensor::vector(x.iter().map(|v| 2.0 * v).collect()), true)
                .unwrap();
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_entries_are_untouched() {
        let mut p = ParamGroup::new();
        p.insert("x", Tensor::scalar(1.0), false).unwrap();
        let mut g = ParamGroup::new();
        g.insert("x", Tensor::scalar(1.0), true).unwrap();
        Adam::new(0.1).step(&mut p, &g).unwrap();
        assert_eq!(p.get("x").unwrap().item(), Some(1.0));
    }

    #[test]
    fn state_round_trip() {
        let mut p = ParamGroup::new();
        p.insert("x", Tensor::scalar(1.0), true).unwrap();
        let mut g = ParamGroup::new();
        g.insert("x", Tensor::scalar(0.3), true).unwrap();
        let mut a = Adam::new(0.01);
        a.step(&mut p, &g).unwrap();
        let mut b = Adam::new(0.01);
        b.load_state(&a.state()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clipping_bounds_the_joint_norm() {
        let mut a = ParamGroup::new();
        a.insert("x", Tensor::vector(vec![3.0]), true).unwrap();
        let mut b = ParamGroup::new();
        b.insert("y", Tensor::vector(vec![4.0]), true).unwrap();
        let norm = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(norm, 5.0);
        assert!((a.get("x").unwrap().data()[0] - 0.6).abs() < 1e-12);
    }
}
