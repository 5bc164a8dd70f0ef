use serde::{Deserialize, Serialize};
use std::ops::AddAssign;

/// Relative prices of the counted operations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub euler: f64,
    pub fft: f64,
    pub resampling: f64,
    pub dense: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { euler: 1.0, fft: 1.0, resampling: 1.0, dense: 1.0 }
    }
}

/// Machine-independent operation counts.
///
/// `fft_work` accumulates `n log2 n` for every transform of length `n`;
/// `dense_ops` counts multiply-adds of the causal full-path map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub euler_steps: u64,
    pub fft_work: f64,
    pub resampling_ops: u64,
    pub dense_ops: u64,
}

impl CostLedger {
    pub fn record_euler(&mut self, steps: usize) {
        self.euler_steps += steps as u64;
    }

    pub fn record_fft(&mut self, len: usize) {
        if len > 1 {
            let n = len as f64;
            self.fft_work += n * n.log2();
        }
    }

    pub fn record_resampling(&mut self, draws: usize) {
        self.resampling_ops += draws as u64;
    }

    pub fn record_dense(&mut self, ops: u64) {
        self.dense_ops += ops;
    }

    pub fn total(&self, w: &CostWeights) -> f64 {
        w.euler * self.euler_steps as f64
            + w.fft * self.fft_work
            + w.resampling * self.resampling_ops as f64
            + w.dense * self.dense_ops as f64
    }
}

impl AddAssign for CostLedger {
    fn add_assign(&mut self, rhs: Self) {
        self.euler_steps += rhs.euler_steps;
        self.fft_work += rhs.fft_work;
        self.resampling_ops += rhs.resampling_ops;
        self.dense_ops += rhs.dense_ops;
    }
}

impl std::iter::Sum for CostLedger {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        let mut acc = CostLedger::default();
        for c in iter {
            acc += c;
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_are_weighted_sums() {
        let mut c = CostLedger::default();
        c.record_euler(10);
        c.record_fft(8);
        c.record_resampling(4);
        c.record_dense(2);
        assert_eq!(c.fft_work, 24.0);
        assert_eq!(c.total(&CostWeights::default()), 40.0);
        let w = CostWeights { euler: 2.0, fft: 0.0, resampling: 1.0, dense: 0.5 };
        assert_eq!(c.total(&w), 25.0);
    }

    #[test]
    fn ledgers_add() {
        let mut a = CostLedger { euler_steps: 1, fft_work: 2.0, resampling_ops: 3, dense_ops: 4 };
        a += a;
        assert_eq!(a, CostLedger { euler_steps: 2, fft_work: 4.0, resampling_ops: 6, dense_ops: 8 });
    }
}
