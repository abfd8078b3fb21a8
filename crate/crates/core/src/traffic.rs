//! Packet arrivals, queue evolution, transmit power and the per-epoch cost.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct QueueState(pub u32);

impl QueueState {
    pub fn len(self) -> u32 {
        self.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkBudget {
    /// Channel bandwidth w, Hz.
    pub bandwidth_hz: f64,
    /// Noise power spectral density, W/Hz.
    pub noise_psd: f64,
    /// Aggregate inter-group interference, W.
    pub interference_w: f64,
    /// Packet size, bits.
    pub packet_bits: f64,
    /// Epoch duration, s.
    pub epoch_s: f64,
}

impl Default for LinkBudget {
    fn default() -> Self {
        Self {
            bandwidth_hz: 500e3,
            noise_psd: 7.95e-21,
            interference_w: 2e-9,
            packet_bits: 9000.0,
            epoch_s: 0.018,
        }
    }
}

impl LinkBudget {
    pub fn violations(&self) -> Vec<String> {
        let fields = [
            ("bandwidth_hz", self.bandwidth_hz),
            ("noise_psd", self.noise_psd),
            ("interference_w", self.interference_w),
            ("packet_bits", self.packet_bits),
            ("epoch_s", self.epoch_s),
        ];
        fields
            .iter()
            .filter(|(_, v)| !(v.is_finite() && *v > 0.0))
            .map(|(n, v)| format!("link budget {n} must be positive, got {v}"))
            .collect()
    }

    /// Interference plus noise power in the channel, W.
    pub fn impairment_w(&self) -> f64 {
        self.interference_w + self.bandwidth_hz * self.noise_psd
    }

    /// Exponent of two in the power formula for `r` packets.
    pub fn rate_exponent(&self, r: u32) -> f64 {
        self.packet_bits * r as f64 / (self.bandwidth_hz * self.epoch_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    /// Weight of the queueing delay term.
    pub delay_weight: f64,
    /// Weight of the transmit power term.
    pub power_weight: f64,
    /// Mean packet arrivals per epoch.
    pub arrival_rate: f64,
    pub discount: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { delay_weight: 30.0, power_weight: 1.0, arrival_rate: 1.0, discount: 0.9 }
    }
}

impl CostWeights {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.delay_weight > 0.0 && self.power_weight > 0.0) {
            out.push(format!(
                "cost weights must be positive, got delay {} power {}",
                self.delay_weight, self.power_weight
            ));
        }
        if !(self.arrival_rate > 0.0 && self.arrival_rate.is_finite()) {
            out.push(format!("arrival rate must be positive, got {}", self.arrival_rate));
        }
        if !(0.0..1.0).contains(&self.discount) {
            out.push(format!("discount must lie in [0, 1), got {}", self.discount));
        }
        out
    }

    /// Queueing delay in epochs implied by a queue length.
    pub fn delay(&self, q: QueueState) -> f64 {
        q.0 as f64 / self.arrival_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalModel {
    /// Poisson with the configured mean, clamped at the per-epoch bound.
    #[default]
    TruncatedPoisson,
    /// A full batch of `max` packets with probability `rate / max`, else none.
    BernoulliBatch,
}

/// Which packet count the power formula is charged on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerAccounting {
    /// Packets that actually left the queue.
    #[default]
    Departed,
    /// The scheduled count, even when the queue held fewer packets.
    Scheduled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arrivals {
    pub packets: u32,
    pub truncated: bool,
}

/// Draws one epoch of arrivals with mean `rate`, never exceeding `max`.
pub fn arrivals<R: Rng + ?Sized>(rate: f64, max: u32, model: ArrivalModel, rng: &mut R) -> Arrivals {
    match model {
        ArrivalModel::TruncatedPoisson => {
            let raw = Poisson::new(rate).map(|p| p.sample(rng)).unwrap_or(0.0);
            let truncated = raw > max as f64;
            Arrivals { packets: if truncated { max } else { raw as u32 }, truncated }
        }
        ArrivalModel::BernoulliBatch => {
            let p = if max == 0 { 0.0 } else { rate / max as f64 };
            let hit = rng.random::<f64>() < p.min(1.0);
            Arrivals { packets: if hit { max } else { 0 }, truncated: p > 1.0 }
        }
    }
}

/// One epoch of queue evolution. Returns the next queue and the packets that left.
pub fn step_queue(q: QueueState, r: u32, allocated: bool, a: u32) -> (QueueState, u32) {
    let departed = if allocated { r.min(q.0) } else { 0 };
    (QueueState(q.0 - departed + a), departed)
}

/// Power needed to push `r` packets through a channel of power gain `g` in one epoch.
pub fn transmit_power(r: u32, g: f64, budget: &LinkBudget, allocated: bool) -> Result<f64> {
    if !(g.is_finite() && g > 0.0) {
        return Err(Error::InvalidGain(g));
    }
    if !allocated || r == 0 {
        return Ok(0.0);
    }
    Ok(budget.impairment_w() / g * (budget.rate_exponent(r).exp2() - 1.0))
}

/// Weighted delay-power cost of one epoch.
pub fn epoch_cost(q: QueueState, power_w: f64, weights: &CostWeights) -> f64 {
    weights.delay_weight * weights.delay(q) + weights.power_weight * power_w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};
    use proptest::prelude::*;

    #[test]
    fn queue_examples() {
        assert_eq!(step_queue(QueueState(5), 3, true, 2), (QueueState(4), 3));
        assert_eq!(step_queue(QueueState(2), 5, true, 0), (QueueState(0), 2));
        assert_eq!(step_queue(QueueState(0), 4, false, 1), (QueueState(1), 0));
    }

    #[test]
    fn power_examples() {
        let b = LinkBudget::default();
        assert_eq!(transmit_power(0, 1.0, &b, true).unwrap(), 0.0);
        assert_eq!(transmit_power(3, 1.0, &b, false).unwrap(), 0.0);
        for r in 0..=10 {
            assert_eq!(b.rate_exponent(r), r as f64);
        }
        let p = transmit_power(1, 1.0, &b, true).unwrap();
        let hand = 2e-9 + 3.975e-15;
        assert!((p - hand).abs() / hand < 1e-12);
        assert!(matches!(transmit_power(1, 0.0, &b, true), Err(Error::InvalidGain(_))));
        assert!(matches!(transmit_power(1, -1.0, &b, true), Err(Error::InvalidGain(_))));
    }

    #[test]
    fn power_monotonicity() {
        let b = LinkBudget::default();
        for r in 1..6 {
            let lo = transmit_power(r, 1e-9, &b, true).unwrap();
            let hi = transmit_power(r, 2e-9, &b, true).unwrap();
            assert!(hi < lo);
            assert!(transmit_power(r + 1, 1e-9, &b, true).unwrap() > lo);
        }
    }

    #[test]
    fn cost_examples() {
        let w = CostWeights::default();
        assert_eq!(epoch_cost(QueueState(2), 0.0, &w), 60.0);
        assert_eq!(epoch_cost(QueueState(0), 0.0, &w), 0.0);
        let w2 = CostWeights { arrival_rate: 2.0, ..w };
        assert_eq!(epoch_cost(QueueState(7), 0.0, &w2) * 2.0, epoch_cost(QueueState(7), 0.0, &w));
    }

    #[test]
    fn poisson_mean_and_bound() {
        let mut rng = derive(9, Stream::Mobility, 0);
        let n = 1_000_000;
        let mut sum = 0u64;
        for _ in 0..n {
            let a = arrivals(1.0, 5, ArrivalModel::TruncatedPoisson, &mut rng);
            assert!(a.packets <= 5);
            sum += a.packets as u64;
        }
        let mean = sum as f64 / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn vanishing_rate_gives_no_arrivals() {
        let mut rng = derive(1, Stream::Mobility, 0);
        for _ in 0..10_000 {
            assert_eq!(arrivals(1e-9, 5, ArrivalModel::TruncatedPoisson, &mut rng).packets, 0);
        }
    }

    #[test]
    fn truncation_is_flagged() {
        let mut rng = derive(2, Stream::Mobility, 0);
        let draws: Vec<_> = (0..1000).map(|_| arrivals(20.0, 5, ArrivalModel::TruncatedPoisson, &mut rng)).collect();
        assert!(draws.iter().all(|a| a.packets <= 5));
        assert!(draws.iter().any(|a| a.truncated));
    }

    #[test]
    fn bernoulli_batch_mean() {
        let mut rng = derive(3, Stream::Mobility, 0);
        let n = 200_000;
        let sum: u64 = (0..n).map(|_| arrivals(0.5, 1, ArrivalModel::BernoulliBatch, &mut rng).packets as u64).sum();
        assert!((sum as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn conservation(q in 0u32..1000, r in 0u32..=5, allocated: bool, a in 0u32..=5) {
            let (next, departed) = step_queue(QueueState(q), r, allocated, a);
            prop_assert_eq!(next.0 as i64 - q as i64, a as i64 - departed as i64);
            let clamp = (q as i64 - if allocated { r as i64 } else { 0 }).max(0) + a as i64;
            prop_assert_eq!(next.0 as i64, clamp);
        }
    }
}
