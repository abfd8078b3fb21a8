//! Fixed-length feature vector of one pair in one epoch.
//!
//! Layout: `J` log-gains, receiver x and y (fractions of the map side), the
//! heading as a unit vector, the scaled queue, a one-hot of the previous group
//! (all zero before the first epoch), the previous group size over `K`, and
//! the previous channel-utilisation bits.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, LocalObservation, VuePairState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingConfig {
    /// Added to `log10(gain)` before scaling.
    pub gain_offset_decades: f64,
    /// Decades of gain mapped onto one unit of input.
    pub gain_span_decades: f64,
    /// Queue length mapped onto one unit of input.
    pub queue_scale: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { gain_offset_decades: 9.0, gain_span_decades: 3.0, queue_scale: 10.0 }
    }
}

impl EncodingConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.gain_offset_decades.is_finite() {
            out.push("encoding.gain_offset_decades must be finite".into());
        }
        if !(self.gain_span_decades > 0.0 && self.gain_span_decades.is_finite()) {
            out.push("encoding.gain_span_decades must be positive".into());
        }
        if !(self.queue_scale > 0.0 && self.queue_scale.is_finite()) {
            out.push("encoding.queue_scale must be positive".into());
        }
        out
    }
}

pub fn feature_count(channels: usize, groups: usize) -> usize {
    2 * channels + 6 + groups
}

/// Writes the features of one pair into `out`, which must hold
/// [`feature_count`] values.
pub fn encode_pair(
    state: &VuePairState,
    obs: &LocalObservation,
    side_length: f64,
    pairs: usize,
    groups: usize,
    cfg: &EncodingConfig,
    out: &mut [f64],
) {
    let j = state.gains.len();
    debug_assert_eq!(out.len(), feature_count(j, groups));
    for (o, &g) in out[..j].iter_mut().zip(state.gains.as_slice()) {
        *o = (g.log10() + cfg.gain_offset_decades) / cfg.gain_span_decades;
    }
    let rx = state.pose.rx();
    let (hx, hy) = state.pose.heading().unit();
    out[j] = rx.x / side_length;
    out[j + 1] = rx.y / side_length;
    out[j + 2] = hx;
    out[j + 3] = hy;
    out[j + 4] = state.queue.0 as f64 / cfg.queue_scale;
    let base = j + 5;
    out[base..base + groups].iter_mut().for_each(|v| *v = 0.0);
    if let Some(g) = obs.prev_group {
        out[base + g] = 1.0;
    }
    out[base + groups] = obs.group_size as f64 / pairs as f64;
    for (o, &u) in out[base + groups + 1..].iter_mut().zip(&obs.utilization) {
        *o = if u { 1.0 } else { 0.0 };
    }
}

/// Features of every pair for the epoch the environment is about to execute.
pub fn encode_epoch(env: &Environment, cfg: &EncodingConfig) -> Array2<f64> {
    let sc = env.scenario();
    let d = feature_count(sc.channels, sc.groups);
    let mut out = Array2::zeros((sc.pairs, d));
    for (k, (state, obs)) in env.pairs().iter().zip(env.observations()).enumerate() {
        let row = out.row_mut(k).into_slice().expect("rows of a standard array are contiguous");
        encode_pair(state, obs, sc.map.side_length, sc.pairs, sc.groups, cfg, row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::env::JointAction;

    #[test]
    fn dimensions_and_finiteness() {
        let sc = ExperimentConfig::desk().scenario;
        let mut env = Environment::new(sc.clone(), 4).unwrap();
        let d = feature_count(sc.channels, sc.groups);
        for _ in 0..20 {
            let x = encode_epoch(&env, &EncodingConfig::default());
            assert_eq!(x.dim(), (sc.pairs, d));
            assert!(x.iter().all(|v| v.is_finite()));
            env.step(&JointAction::idle(sc.pairs)).unwrap();
        }
    }

    #[test]
    fn neutral_observation_has_no_group_bit() {
        let sc = ExperimentConfig::desk().scenario;
        let env = Environment::new(sc.clone(), 4).unwrap();
        let x = encode_epoch(&env, &EncodingConfig::default());
        let base = sc.channels + 5;
        assert!(x.row(0).iter().skip(base).take(sc.groups).all(|&v| v == 0.0));
        assert_eq!(x[[0, base + sc.groups]], 1.0 / sc.pairs as f64);
    }
}
