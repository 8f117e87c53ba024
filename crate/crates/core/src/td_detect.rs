//! Ring buffer of TD-error magnitudes and the confidence-interval gate that
//! decides when the core attention branch may learn.

use std::collections::VecDeque;

pub const DEFAULT_CAPACITY: usize = 2000;
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_ETA: f64 = 1.96;
pub const SIGMA_FLOOR: f64 = 1e-8;
/// Fraction of capacity that must be filled before the gate can close.
pub const WARMUP_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TdError {
    #[error("TD error must be finite, got {0}")]
    NonFinite(f64),
    #[error("buffer capacity must be >= 1")]
    ZeroCapacity,
    #[error("{got} values exceed capacity {capacity}")]
    Overfull { capacity: usize, got: usize },
}

/// Fixed-capacity FIFO of `|delta|` with running mean and population std.
#[derive(Clone, Debug)]
pub struct TdBuffer {
    capacity: usize,
    values: VecDeque<f64>,
    shift: f64,
    sum: f64,
    sum_sq: f64,
    since_recompute: usize,
}

impl TdBuffer {
    pub fn new(capacity: usize) -> Result<Self, TdError> {
        if capacity == 0 {
            return Err(TdError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            values: VecDeque::with_capacity(capacity),
            shift: 0.0,
            sum: 0.0,
            sum_sq: 0.0,
            since_recompute: 0,
        })
    }

    /// Rebuilds a buffer from stored contents, oldest first.
    pub fn from_values(capacity: usize, values: &[f64]) -> Result<Self, TdError> {
        if values.len() > capacity {
            return Err(TdError::Overfull { capacity, got: values.len() });
        }
        let mut b = Self::new(capacity)?;
        for &v in values {
            b.push(v)?;
        }
        b.recompute();
        Ok(b)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Stored magnitudes, oldest first.
    pub fn values(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.values.iter().copied()
    }

    pub fn push(&mut self, delta: f64) -> Result<(), TdError> {
        if !delta.is_finite() {
            return Err(TdError::NonFinite(delta));
        }
        let x = delta.abs();
        if self.values.is_empty() {
            self.shift = x;
        }
        if self.values.len() == self.capacity {
            let old = self.values.pop_front().expect("full buffer");
            let d = old - self.shift;
            self.sum -= d;
            self.sum_sq -= d * d;
        }
        let d = x - self.shift;
        self.sum += d;
        self.sum_sq += d * d;
        self.values.push_back(x);
        self.since_recompute += 1;
        if self.since_recompute >= self.capacity {
            self.recompute();
        }
        Ok(())
    }

    /// Re-centres the running sums on the current mean.
    fn recompute(&mut self) {
        self.since_recompute = 0;
        if self.values.is_empty() {
            self.shift = 0.0;
            self.sum = 0.0;
            self.sum_sq = 0.0;
            return;
        }
        let n = self.values.len() as f64;
        self.shift = self.values.iter().sum::<f64>() / n;
        self.sum = self.values.iter().map(|v| v - self.shift).sum();
        self.sum_sq = self.values.iter().map(|v| (v - self.shift).powi(2)).sum();
    }

    pub fn mean(&self) -> Option<f64> {
        if self.values.is_empty() {
            return None;
        }
        Some(self.shift + self.sum / self.values.len() as f64)
    }

    /// Population standard deviation.
    pub fn std(&self) -> Option<f64> {
        if self.values.is_empty() {
            return None;
        }
        let n = self.values.len() as f64;
        let m = self.sum / n;
        Some((self.sum_sq / n - m * m).max(0.0).sqrt())
    }

    /// Mean of the newest `ceil(alpha * len)` values.
    pub fn recent_mean(&self, alpha: f64) -> Option<f64> {
        if self.values.is_empty() || !(alpha > 0.0 && alpha <= 1.0) {
            return None;
        }
        let k = recent_count(alpha, self.values.len());
        let sum: f64 = self.values.iter().rev().take(k).sum();
        Some(sum / k as f64)
    }

    /// True when the core branch should update: during warm-up, or when the
    /// recent mean leaves `(mu - eta*sigma, mu + eta*sigma)` with `sigma`
    /// floored at [`SIGMA_FLOOR`].
    pub fn should_update_core(&self, alpha: f64, eta: f64) -> bool {
        self.gate(alpha, eta).update
    }

    /// Gate decision with the statistics that produced it.
    pub fn gate(&self, alpha: f64, eta: f64) -> GateReading {
        let warm = (WARMUP_FRACTION * self.capacity as f64 - 1e-9).ceil().max(1.0) as usize;
        let (Some(mu), Some(sigma), Some(recent)) = (self.mean(), self.std(), self.recent_mean(alpha)) else {
            return GateReading { update: true, recent: f64::NAN, mu: f64::NAN, sigma: f64::NAN };
        };
        let half = eta * sigma.max(SIGMA_FLOOR);
        let inside = recent > mu - half && recent < mu + half;
        GateReading { update: self.len() < warm || !inside, recent, mu, sigma }
    }
}

/// Exact internal state, including the running sums, so that a restored
/// buffer behaves bit-identically to the original.
#[derive(Clone, Debug, PartialEq)]
pub struct TdSnapshot {
    pub capacity: usize,
    pub values: Vec<f64>,
    pub shift: f64,
    pub sum: f64,
    pub sum_sq: f64,
    pub since_recompute: usize,
}

impl TdBuffer {
    pub fn snapshot(&self) -> TdSnapshot {
        TdSnapshot {
            capacity: self.capacity,
            values: self.values.iter().copied().collect(),
            shift: self.shift,
            sum: self.sum,
            sum_sq: self.sum_sq,
            since_recompute: self.since_recompute,
        }
    }

    pub fn restore(snap: &TdSnapshot) -> Result<Self, TdError> {
        if snap.capacity == 0 {
            return Err(TdError::ZeroCapacity);
        }
        if snap.values.len() > snap.capacity {
            return Err(TdError::Overfull { capacity: snap.capacity, got: snap.values.len() });
        }
        if let Some(&bad) = snap.values.iter().find(|v| !v.is_finite()) {
            return Err(TdError::NonFinite(bad));
        }
        Ok(Self {
            capacity: snap.capacity,
            values: snap.values.iter().copied().collect(),
            shift: snap.shift,
            sum: snap.sum,
            sum_sq: snap.sum_sq,
            since_recompute: snap.since_recompute,
        })
    }
}

/// `ceil(alpha * len)`, tolerant of representation error, at least 1.
pub fn recent_count(alpha: f64, len: usize) -> usize {
    ((alpha * len as f64 - 1e-9).ceil().max(1.0) as usize).min(len)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateReading {
    pub update: bool,
    pub recent: f64,
    pub mu: f64,
    pub sigma: f64,
}
