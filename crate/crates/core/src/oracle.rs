//! Exact and tabular solutions of small finite decision processes, used to
//! check learning against ground truth.
//!
//! Values are normalised costs: `Q(s, a) = (1 - gamma) c(s, a) + gamma E[min_a' Q(s', a')]`.

use rand::Rng;
use serde::Serialize;

use crate::channel::{path_loss_between, PathLossConfig};
use crate::error::{Error, Result};
use crate::grid::{Point, Regime};
use crate::rng::{derive, Stream};
use crate::traffic::{epoch_cost, step_queue, transmit_power, CostWeights, LinkBudget, QueueState};

/// A finite process with deterministic costs and explicit transition lists.
#[derive(Debug, Clone)]
pub struct FiniteMdp {
    /// `transitions[s][a]` lists `(next state, probability)`.
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
    /// `costs[s][a]`.
    pub costs: Vec<Vec<f64>>,
    pub discount: f64,
}

impl FiniteMdp {
    pub fn states(&self) -> usize {
        self.costs.len()
    }

    pub fn actions(&self) -> usize {
        self.costs.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.states(), self.actions());
        if s == 0 || a == 0 || !(0.0..1.0).contains(&self.discount) {
            return Err(Error::InvalidState("process needs states, actions and a discount in [0, 1)".into()));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.len() != a || self.costs[i].len() != a {
                return Err(Error::Shape(format!("state {i} does not list {a} actions")));
            }
            for (j, next) in row.iter().enumerate() {
                let total: f64 = next.iter().map(|&(_, p)| p).sum();
                if (total - 1.0).abs() > 1e-9 || next.iter().any(|&(t, p)| t >= s || p < 0.0) {
                    return Err(Error::InvalidState(format!("transition row ({i}, {j}) is not a distribution")));
                }
            }
        }
        Ok(())
    }

    fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let mut u = rng.random::<f64>();
        let row = &self.transitions[s][a];
        for &(t, p) in row {
            if u < p {
                return t;
            }
            u -= p;
        }
        row.last().expect("validated rows are nonempty").0
    }
}

pub type QTable = Vec<Vec<f64>>;

/// Fixed point of the Bellman optimality operator, iterated until the update
/// moves no entry by more than `tolerance`.
pub fn value_iteration(mdp: &FiniteMdp, tolerance: f64) -> Result<QTable> {
    mdp.validate()?;
    let g = mdp.discount;
    let mut q = vec![vec![0.0; mdp.actions()]; mdp.states()];
    loop {
        let best: Vec<f64> = q.iter().map(|row| row.iter().copied().fold(f64::INFINITY, f64::min)).collect();
        let mut moved = 0.0f64;
        for s in 0..mdp.states() {
            for a in 0..mdp.actions() {
                let future: f64 = mdp.transitions[s][a].iter().map(|&(t, p)| p * best[t]).sum();
                let v = (1.0 - g) * mdp.costs[s][a] + g * future;
                moved = moved.max((v - q[s][a]).abs());
                q[s][a] = v;
            }
        }
        if moved < tolerance {
            return Ok(q);
        }
    }
}

/// `Q(s, a) += alpha * ((1 - gamma) f + gamma Q(s', a') - Q(s, a))`.
pub fn sarsa_update(q: f64, cost: f64, next_q: f64, discount: f64, alpha: f64) -> f64 {
    q + alpha * ((1.0 - discount) * cost + discount * next_q - q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SarsaConfig {
    pub episodes: u64,
    pub episode_length: u64,
    /// Learning rate is `1 / (1 + visits)^alpha_exponent` per state-action.
    pub alpha_exponent: f64,
    /// Exploration is `epsilon_scale / (1 + visits(s))^epsilon_exponent` per state.
    pub epsilon_scale: f64,
    pub epsilon_exponent: f64,
}

impl Default for SarsaConfig {
    fn default() -> Self {
        Self { episodes: 200_000, episode_length: 40, alpha_exponent: 0.7, epsilon_scale: 1.0, epsilon_exponent: 0.5 }
    }
}

/// On-policy tabular SARSA with exploring starts: each episode begins in a
/// uniformly random state with a uniformly random action, then follows an
/// epsilon-greedy policy whose exploration decays with state visits.
pub fn tabular_sarsa(mdp: &FiniteMdp, config: &SarsaConfig, seed: u64) -> Result<QTable> {
    mdp.validate()?;
    let mut rng = derive(seed, Stream::Learner, 42);
    let (ns, na) = (mdp.states(), mdp.actions());
    let mut q = vec![vec![0.0; na]; ns];
    let mut visits = vec![vec![0u64; na]; ns];
    let mut state_visits = vec![0u64; ns];
    let greedy = |row: &[f64]| row.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &v)| if v < b.1 { (i, v) } else { b }).0;
    for _ in 0..config.episodes {
        let mut s = rng.random_range(0..ns);
        let mut a = rng.random_range(0..na);
        for _ in 0..config.episode_length {
            let next = mdp.sample_next(s, a, &mut rng);
            state_visits[next] += 1;
            let eps = config.epsilon_scale / (1.0 + state_visits[next] as f64).powf(config.epsilon_exponent);
            let next_a = if rng.random::<f64>() < eps { rng.random_range(0..na) } else { greedy(&q[next]) };
            visits[s][a] += 1;
            let alpha = 1.0 / (1.0 + visits[s][a] as f64).powf(config.alpha_exponent);
            q[s][a] = sarsa_update(q[s][a], mdp.costs[s][a], q[next][next_a], mdp.discount, alpha);
            s = next;
            a = next_a;
        }
    }
    Ok(q)
}

pub fn sup_norm(a: &QTable, b: &QTable) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Two pairs sharing one channel, gains quantised to two levels, queues
/// capped at three packets, at most one arrival and one departure per epoch.
///
/// Gain levels are the conditional means of the fading factor below and
/// above its median, times the line-of-sight path loss at the following
/// distance. Arrivals are single packets with probability one half. State
/// index is `((q0 * 2 + g0) * 4 + q1) * 2 + g1`. Pair actions are
/// `(channel, departures)` with index `c * 2 + r`; the twelve joint actions
/// are the feasible combinations of two pair actions.
#[derive(Debug, Clone)]
pub struct TinyV2x {
    pub mdp: FiniteMdp,
    pub gain_levels: [f64; 2],
    /// Pair actions of each joint action, as `(channel used, departures)`.
    pub joint_actions: Vec<[(bool, u32); 2]>,
}

pub const TINY_MAX_QUEUE: u32 = 3;

pub fn tiny_v2x(following_distance_m: f64) -> Result<TinyV2x> {
    let budget = LinkBudget::default();
    let weights = CostWeights { delay_weight: 1.0, power_weight: 1.0, arrival_rate: 0.5, discount: 0.9 };
    let cost_scale = 0.1;
    let h = path_loss_between(
        Point::new(0.0, 0.0),
        Point::new(following_distance_m, 0.0),
        Regime::Los,
        &PathLossConfig::default().params(),
    )?;
    // Fading is exponential with mean 2; its median is 2 ln 2.
    let median = 2.0 * std::f64::consts::LN_2;
    let low = 2.0 - median * 0.5 / 0.5;
    let high = median + 2.0;
    let gain_levels = [low * h, high * h];

    let pair_actions: Vec<(bool, u32)> = vec![(false, 0), (false, 1), (true, 0), (true, 1)];
    let joint_actions: Vec<[(bool, u32); 2]> = pair_actions
        .iter()
        .flat_map(|&a| pair_actions.iter().map(move |&b| [a, b]))
        .filter(|[a, b]| !(a.0 && b.0))
        .collect();

    let levels = TINY_MAX_QUEUE as usize + 1;
    let index = |q: [u32; 2], g: [usize; 2]| ((q[0] as usize * 2 + g[0]) * levels + q[1] as usize) * 2 + g[1];
    let states = (levels * 2).pow(2);
    let mut transitions = vec![Vec::new(); states];
    let mut costs = vec![Vec::new(); states];
    for q0 in 0..=TINY_MAX_QUEUE {
        for g0 in 0..2 {
            for q1 in 0..=TINY_MAX_QUEUE {
                for g1 in 0..2 {
                    let s = index([q0, q1], [g0, g1]);
                    let (q, g) = ([q0, q1], [g0, g1]);
                    for ja in &joint_actions {
                        let mut cost = 0.0;
                        let mut after = [0u32; 2];
                        for k in 0..2 {
                            let (allocated, r) = ja[k];
                            let (left, departed) = step_queue(QueueState(q[k]), r, allocated, 0);
                            let p = transmit_power(departed, gain_levels[g[k]], &budget, allocated)?;
                            cost += epoch_cost(QueueState(q[k]), p, &weights) * cost_scale;
                            after[k] = left.0;
                        }
                        let mut next = Vec::with_capacity(16);
                        for a0 in 0..2 {
                            for a1 in 0..2 {
                                for n0 in 0..2 {
                                    for n1 in 0..2 {
                                        let nq = [(after[0] + a0).min(TINY_MAX_QUEUE), (after[1] + a1).min(TINY_MAX_QUEUE)];
                                        next.push((index(nq, [n0, n1]), 1.0 / 16.0));
                                    }
                                }
                            }
                        }
                        transitions[s].push(next);
                        costs[s].push(cost);
                    }
                }
            }
        }
    }
    let mdp = FiniteMdp { transitions, costs, discount: weights.discount };
    mdp.validate()?;
    Ok(TinyV2x { mdp, gain_levels, joint_actions })
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub states: usize,
    pub actions: usize,
    pub sup_norm: f64,
    pub value_range: (f64, f64),
}

/// SARSA against value iteration on the tiny network.
pub fn oracle_report(config: &SarsaConfig, seed: u64) -> Result<OracleReport> {
    let tiny = tiny_v2x(20.0)?;
    let exact = value_iteration(&tiny.mdp, 1e-12)?;
    let learned = tabular_sarsa(&tiny.mdp, config, seed)?;
    let flat = exact.iter().flatten();
    let lo = flat.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = flat.copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(OracleReport {
        states: tiny.mdp.states(),
        actions: tiny.mdp.actions(),
        sup_norm: sup_norm(&exact, &learned),
        value_range: (lo, hi),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two states, two actions: action 0 stays put, action 1 switches state.
    /// State 0 costs 1 whatever the action, state 1 costs 0 when staying and 2 when leaving.
    fn chain() -> FiniteMdp {
        FiniteMdp {
            transitions: vec![vec![vec![(0, 1.0)], vec![(1, 1.0)]], vec![vec![(1, 1.0)], vec![(0, 1.0)]]],
            costs: vec![vec![1.0, 1.0], vec![0.0, 2.0]],
            discount: 0.9,
        }
    }

    #[test]
    fn update_rule_examples() {
        assert!((sarsa_update(0.0, 1.0, 0.0, 0.9, 0.5) - 0.05).abs() < 1e-15);
        assert_eq!(sarsa_update(0.37, 5.0, 2.0, 0.9, 0.0), 0.37);
    }

    #[test]
    fn chain_closed_form() {
        // Staying in state 1 forever is free, so V(1) = 0 and
        // Q(1,0) = 0, Q(0,1) = 0.1, V(0) = 0.1, Q(0,0) = 0.1 + 0.9 * 0.1,
        // Q(1,1) = 0.2 + 0.9 * 0.1.
        let q = value_iteration(&chain(), 1e-14).unwrap();
        let want = [[0.19, 0.1], [0.0, 0.29]];
        for s in 0..2 {
            for a in 0..2 {
                assert!((q[s][a] - want[s][a]).abs() < 1e-10, "{q:?}");
            }
        }
        let cfg = SarsaConfig { episodes: 20_000, episode_length: 20, ..SarsaConfig::default() };
        let learned = tabular_sarsa(&chain(), &cfg, 1).unwrap();
        assert!(sup_norm(&q, &learned) < 0.05, "{learned:?}");
    }

    #[test]
    fn tiny_network_shape() {
        let t = tiny_v2x(20.0).unwrap();
        assert_eq!(t.mdp.states(), 64);
        assert_eq!(t.mdp.actions(), 12);
        let ratio = t.gain_levels[1] / t.gain_levels[0];
        assert!((ratio - 3.386 / 0.614).abs() < 0.01);
        // Idle everywhere with empty queues costs nothing.
        let idle = t.joint_actions.iter().position(|a| *a == [(false, 0), (false, 0)]).unwrap();
        assert_eq!(t.mdp.costs[0][idle], 0.0);
    }
}
