//! The online learner: epsilon-greedy acting through per-group min-cost
//! matching, joint experiences in replay, mini-batch regression on
//! bootstrapped targets, and a periodically refreshed target network.

use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::config::{AgentConfig, ScenarioConfig, TargetRule};
use crate::env::{Environment, JointAction, PairAction};
use crate::error::{Error, Result};
use crate::grouping::Grouping;
use crate::neural::{encode_epoch, feature_count, Adam, Architecture, NetParams, TrainingBatch};
use crate::policies::{assign_min_cost, Policy};
use crate::rng::{derive, SimRng, Stream};

use super::memory::{EpochRecord, ObservationPool, ReplayMemory};

/// Flat output index of `(channel, departures)`.
pub fn action_index(action: PairAction, max_departures: u32) -> usize {
    match action.channel {
        None => 0,
        Some(j) => (j + 1) * (1 + max_departures as usize) + action.departures as usize,
    }
}

/// One epoch of the whole network, as stored in replay.
#[derive(Debug, Clone)]
pub struct Experience {
    /// `N + 1` consecutive records: the first `N` form the sequence the action
    /// was chosen from, the last `N` the sequence that followed.
    pub window: Vec<EpochRecord>,
    pub actions: Vec<usize>,
    pub costs: Vec<f64>,
    pub next_actions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    /// `None` on epochs without a training step.
    pub loss: Option<f64>,
    pub avg_cost: f64,
    pub avg_queue: f64,
    pub avg_power_w: f64,
    pub epsilon: f64,
}

/// Minimum-cost joint action for Q values `(pairs, outputs)` under `grouping`.
/// Returns the action and each pair's output index.
pub fn greedy_action(q: ArrayView2<f64>, grouping: &Grouping, channels: usize, max_departures: u32) -> Result<(JointAction, Vec<usize>)> {
    let per = 1 + max_departures as usize;
    let pairs = q.nrows();
    let mut action = JointAction::idle(pairs);
    let mut best_r = vec![vec![0u32; channels]; pairs];
    for members in grouping.partition() {
        if members.is_empty() {
            continue;
        }
        let score: Vec<Vec<f64>> = members
            .iter()
            .map(|&k| {
                let mut row = Vec::with_capacity(1 + channels);
                row.push(q[[k, 0]]);
                for j in 0..channels {
                    let block = (j + 1) * per;
                    let mut best = (q[[k, block]], 0u32);
                    for r in 1..per {
                        if q[[k, block + r]] < best.0 {
                            best = (q[[k, block + r]], r as u32);
                        }
                    }
                    best_r[k][j] = best.1;
                    row.push(best.0);
                }
                row
            })
            .collect();
        let assignment = assign_min_cost(&score)?;
        for (&k, c) in members.iter().zip(assignment.channels) {
            if let Some(j) = c {
                action.set(k, PairAction::on(j, best_r[k][j]));
            }
        }
    }
    let indices = action.pairs().iter().map(|&a| action_index(a, max_departures)).collect();
    Ok((action, indices))
}

fn choose(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn arrange(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64)
}

/// A uniformly random feasible action for one group: every way of giving
/// distinct channels to a subset of members, with any departure count on
/// each allocated member, is equally likely.
pub fn random_group_action<R: Rng + ?Sized>(members: &[usize], channels: usize, max_departures: u32, rng: &mut R) -> Vec<(usize, PairAction)> {
    let b = members.len() as u64;
    let j = channels as u64;
    let per = 1.0 + max_departures as f64;
    let weights: Vec<f64> = (0..=b.min(j)).map(|m| choose(b, m) * arrange(j, m) * per.powi(m as i32)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut m = weights.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            m = i;
            break;
        }
        u -= w;
    }
    let chosen = rand::seq::index::sample(rng, members.len(), m);
    let mut free: Vec<usize> = (0..channels).collect();
    free.shuffle(rng);
    let mut out: Vec<(usize, PairAction)> = members.iter().map(|&k| (k, PairAction::IDLE)).collect();
    for (slot, &c) in chosen.iter().zip(&free) {
        out[slot].1 = PairAction::on(c, rng.random_range(0..=max_departures));
    }
    out
}

struct Pending {
    window: Vec<EpochRecord>,
    actions: Vec<usize>,
    costs: Vec<f64>,
}

/// Shared Q-network for all pairs plus everything needed to train it online.
pub struct DrlAgent {
    config: AgentConfig,
    pairs: usize,
    channels: usize,
    max_departures: u32,
    online: NetParams,
    target: NetParams,
    optimizer: Adam,
    pool: ObservationPool,
    memory: ReplayMemory<Experience>,
    explore: SimRng,
    sampler: SimRng,
    epsilon: f64,
    pending: Option<Pending>,
    last: Option<(Vec<EpochRecord>, Vec<usize>)>,
}

impl DrlAgent {
    pub fn new(scenario: &ScenarioConfig, config: &AgentConfig, seed: u64) -> Result<Self> {
        let arch = Architecture {
            input: feature_count(scenario.channels, scenario.groups),
            lstm_hidden: config.lstm_hidden,
            dense: config.dense_hidden.clone(),
            output: Architecture::action_count(scenario.channels, scenario.max_packets),
        };
        let online = NetParams::init(arch, &mut derive(seed, Stream::Learner, 0))?;
        Self::with_params(scenario, config, online, seed)
    }

    /// An agent around existing weights, e.g. from a checkpoint.
    pub fn with_params(scenario: &ScenarioConfig, config: &AgentConfig, params: NetParams, seed: u64) -> Result<Self> {
        let arch = params.architecture();
        let want_in = feature_count(scenario.channels, scenario.groups);
        let want_out = Architecture::action_count(scenario.channels, scenario.max_packets);
        if arch.input != want_in || arch.output != want_out {
            return Err(Error::Shape(format!(
                "network maps {} features to {} actions, scenario needs {want_in} to {want_out}",
                arch.input, arch.output
            )));
        }
        let neutral = Arc::new(Array2::zeros((scenario.pairs, want_in)));
        Ok(Self {
            config: config.clone(),
            pairs: scenario.pairs,
            channels: scenario.channels,
            max_departures: scenario.max_packets,
            target: params.clone(),
            optimizer: Adam::new(&params, config.learning_rate),
            online: params,
            pool: ObservationPool::new(config.pool_size, neutral),
            memory: ReplayMemory::new(config.replay_capacity),
            explore: derive(seed, Stream::Policy, 0),
            sampler: derive(seed, Stream::Learner, 1),
            epsilon: config.epsilon,
            pending: None,
            last: None,
        })
    }

    pub fn params(&self) -> &NetParams {
        &self.online
    }

    pub fn target_params(&self) -> &NetParams {
        &self.target
    }

    pub fn memory(&self) -> &ReplayMemory<Experience> {
        &self.memory
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn set_epsilon(&mut self, epsilon: f64) {
        self.epsilon = epsilon;
    }

    /// Forgets the observation history, e.g. before acting in a fresh network.
    pub fn reset_episode(&mut self) {
        self.pool.clear();
        self.pending = None;
        self.last = None;
    }

    pub fn learning_rate(&self) -> f64 {
        self.optimizer.learning_rate
    }

    pub fn set_learning_rate(&mut self, rate: f64) {
        self.optimizer.learning_rate = rate;
    }

    pub fn reset_target(&mut self) {
        self.target = self.online.clone();
    }

    fn stack(windows: &[&[EpochRecord]]) -> Array3<f64> {
        let steps = windows[0].len();
        let (pairs, features) = windows[0][0].dim();
        let mut x = Array3::zeros((windows.len() * pairs, steps, features));
        for (e, w) in windows.iter().enumerate() {
            for (t, rec) in w.iter().enumerate() {
                x.slice_mut(s![e * pairs..(e + 1) * pairs, t, ..]).assign(rec);
            }
        }
        x
    }

    /// Q values of every pair for the window ending at the current epoch.
    pub fn q_values(&self, window: &[EpochRecord]) -> Result<Array2<f64>> {
        self.online.forward(Self::stack(&[window]).view())
    }

    /// Observes the epoch about to run and picks an action for it.
    pub fn act(&mut self, env: &Environment) -> Result<JointAction> {
        self.pool.push(Arc::new(encode_epoch(env, &self.config.encoding)));
        let window = self.pool.window();
        let q = self.q_values(&window)?;
        let grouping = env.grouping();
        let (mut action, _) = greedy_action(q.view(), grouping, self.channels, self.max_departures)?;
        if self.epsilon > 0.0 {
            for members in grouping.partition() {
                if !members.is_empty() && self.explore.random::<f64>() < self.epsilon {
                    for (k, a) in random_group_action(&members, self.channels, self.max_departures, &mut self.explore) {
                        action.set(k, a);
                    }
                }
            }
        }
        let indices = action.pairs().iter().map(|&a| action_index(a, self.max_departures)).collect();
        self.last = Some((window, indices));
        Ok(action)
    }

    /// Files the experience completed by the action just chosen and remembers
    /// the costs it produced for the next one.
    fn record(&mut self, costs: Vec<f64>) {
        let Some((window, actions)) = self.last.take() else { return };
        if let Some(p) = self.pending.take() {
            let mut full = p.window;
            full.push(window.last().expect("window is never empty").clone());
            self.memory.push(Experience { window: full, actions: p.actions, costs: p.costs, next_actions: actions.clone() });
        }
        self.pending = Some(Pending { window, actions, costs });
    }

    /// One optimiser step on a uniformly sampled mini-batch. `None` while the
    /// memory holds fewer experiences than a batch.
    pub fn train_step(&mut self, discount: f64) -> Result<Option<f64>> {
        let batch_size = self.config.batch_size;
        let Some(batch) = self.memory.sample(batch_size, &mut self.sampler) else { return Ok(None) };
        let n = self.config.pool_size;
        let current: Vec<&[EpochRecord]> = batch.iter().map(|e| &e.window[..n]).collect();
        let next: Vec<&[EpochRecord]> = batch.iter().map(|e| &e.window[1..]).collect();
        let x_next = Self::stack(&next);
        let q_next = self.target.forward(x_next.view())?;
        let next_idx: Vec<usize> = match self.config.target {
            TargetRule::Sarsa => batch.iter().flat_map(|e| e.next_actions.iter().copied()).collect(),
            TargetRule::DoubleDqn => {
                let q_online = self.online.forward(x_next.view())?;
                q_online
                    .rows()
                    .into_iter()
                    .map(|row| row.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &v)| if v < b.1 { (i, v) } else { b }).0)
                    .collect()
            }
        };
        let scale = self.config.cost_scale;
        let mut targets = Vec::with_capacity(batch_size * self.pairs);
        let mut actions = Vec::with_capacity(batch_size * self.pairs);
        for (e, exp) in batch.iter().enumerate() {
            for k in 0..self.pairs {
                let row = e * self.pairs + k;
                targets.push((1.0 - discount) * exp.costs[k] * scale + discount * q_next[[row, next_idx[row]]]);
                actions.push(exp.actions[k]);
            }
        }
        let tb = TrainingBatch { inputs: Self::stack(&current), actions, targets, group: self.pairs };
        let (mut grads, loss) = self.online.backward(&tb, self.config.loss)?;
        if let Some(c) = self.config.grad_clip {
            grads.clip(c);
        }
        self.optimizer.step(&mut self.online, &grads)?;
        Ok(Some(loss))
    }
}

impl Policy for DrlAgent {
    fn name(&self) -> &str {
        "lstm_drl"
    }

    fn decide(&mut self, env: &Environment) -> Result<JointAction> {
        let a = self.act(env)?;
        self.last = None;
        Ok(a)
    }
}

pub struct TrainingOutcome {
    pub agent: DrlAgent,
    pub metrics: Vec<EpochMetrics>,
}

/// Online training for `epochs` epochs in a fresh network seeded by `seed`.
/// `on_epoch` sees every epoch's metrics and the agent after its update.
pub fn run_training(
    scenario: &ScenarioConfig,
    config: &AgentConfig,
    epochs: u64,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &DrlAgent) -> Result<()>,
) -> Result<TrainingOutcome> {
    let mut env = Environment::new(scenario.clone(), seed)?;
    let mut agent = DrlAgent::new(scenario, config, seed)?;
    let discount = scenario.weights.discount;
    let mut metrics = Vec::with_capacity(epochs as usize);
    for t in 0..epochs {
        if let Some(last) = config.final_learning_rate {
            let progress = t as f64 / epochs.saturating_sub(1).max(1) as f64;
            agent.set_learning_rate(config.learning_rate * (last / config.learning_rate).powf(progress));
        }
        let action = agent.act(&env)?;
        let out = env.step(&action)?;
        agent.record(out.costs());
        let loss = agent.train_step(discount)?;
        if let Some(l) = loss {
            if !(l <= config.divergence_threshold) {
                return Err(Error::Diverged { epoch: out.epoch, loss: l, threshold: config.divergence_threshold });
            }
        }
        if out.epoch % config.target_reset_interval == 0 {
            agent.reset_target();
        }
        let m = EpochMetrics {
            epoch: out.epoch,
            loss,
            avg_cost: out.mean_cost(),
            avg_queue: out.mean_queue(),
            avg_power_w: out.mean_power_w(),
            epsilon: agent.epsilon,
        };
        on_epoch(&m, &agent)?;
        metrics.push(m);
    }
    Ok(TrainingOutcome { agent, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use std::collections::HashMap;

    fn tiny() -> (ScenarioConfig, AgentConfig) {
        let mut c = ExperimentConfig::desk();
        c.scenario.pairs = 4;
        c.agent.lstm_hidden = 8;
        c.agent.dense_hidden = vec![8];
        c.agent.pool_size = 3;
        c.agent.batch_size = 4;
        c.agent.replay_capacity = 50;
        (c.scenario, c.agent)
    }

    #[test]
    fn exploration_is_uniform_over_feasible_group_actions() {
        // Two members, one channel, at most one packet: idle, or one of two
        // pairs on the channel with 0 or 1 departures. Five actions.
        let mut rng = derive(3, Stream::Policy, 0);
        let mut counts: HashMap<Vec<(usize, PairAction)>, u64> = HashMap::new();
        let n = 100_000;
        for _ in 0..n {
            *counts.entry(random_group_action(&[4, 9], 1, 1, &mut rng)).or_default() += 1;
        }
        assert_eq!(counts.len(), 5);
        let expected = n as f64 / 5.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 4 degrees of freedom.
        assert!(chi2 < 13.28, "chi2 {chi2}");
    }

    #[test]
    fn single_pair_picks_the_smallest_output() {
        let q = Array2::from_shape_vec((1, 4), vec![0.5, 0.2, 0.1, 0.3]).unwrap();
        let g = Grouping::single(1, 0);
        let (a, idx) = greedy_action(q.view(), &g, 1, 1).unwrap();
        assert_eq!(a.get(0), PairAction::on(0, 0));
        assert_eq!(idx, vec![2]);
        let q = Array2::from_shape_vec((1, 4), vec![-1.0, 0.2, 0.1, 0.3]).unwrap();
        let (a, idx) = greedy_action(q.view(), &g, 1, 1).unwrap();
        assert_eq!(a.get(0), PairAction::IDLE);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn cheap_idle_output_leaves_everyone_unallocated() {
        let (sc, ac) = tiny();
        let mut agent = DrlAgent::new(&sc, &ac, 0).unwrap();
        let mut params = NetParams::zeros(agent.params().architecture().clone()).unwrap();
        let head = params.tensors().len() - 1;
        params.tensors_mut()[head].data.iter_mut().enumerate().for_each(|(i, b)| *b = if i == 0 { -1.0 } else { 1.0 });
        agent = DrlAgent::with_params(&sc, &ac, params, 0).unwrap();
        agent.set_epsilon(0.0);
        let env = Environment::new(sc.clone(), 0).unwrap();
        let a = agent.act(&env).unwrap();
        assert!(a.pairs().iter().all(|p| p.channel.is_none()));
    }

    #[test]
    fn untrained_until_memory_fills() {
        let (sc, ac) = tiny();
        let mut agent = DrlAgent::new(&sc, &ac, 0).unwrap();
        let before = agent.params().clone();
        assert_eq!(agent.train_step(0.9).unwrap(), None);
        assert_eq!(agent.params(), &before);
    }

    #[test]
    fn zero_epochs_is_a_null_run() {
        let (sc, ac) = tiny();
        let out = run_training(&sc, &ac, 0, 5, &mut |_, _| Ok(())).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.agent.params(), DrlAgent::new(&sc, &ac, 5).unwrap().params());
    }

    #[test]
    fn training_is_deterministic() {
        let (sc, ac) = tiny();
        let run = || run_training(&sc, &ac, 120, 9, &mut |_, _| Ok(())).unwrap().metrics;
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().filter(|m| m.loss.is_some()).count() > 100);
    }

    #[test]
    fn target_changes_only_at_resets() {
        let (sc, mut ac) = tiny();
        ac.target_reset_interval = 25;
        let mut snapshots = Vec::new();
        run_training(&sc, &ac, 100, 2, &mut |m, agent| {
            snapshots.push((m.epoch, agent.target_params().clone(), agent.params().clone()));
            Ok(())
        })
        .unwrap();
        for w in snapshots.windows(2) {
            let (epoch, ref target, ref online) = w[1];
            if epoch % 25 == 0 {
                assert_eq!(target, online);
            } else {
                assert_eq!(target, &w[0].1);
            }
        }
    }

    #[test]
    fn frozen_memory_is_fitted() {
        let (sc, ac) = tiny();
        let mut agent = run_training(&sc, &ac, 60, 4, &mut |_, _| Ok(())).unwrap().agent;
        // Same batch every step, fixed target network, no new experiences.
        let sampler = agent.sampler.clone();
        let mut losses = Vec::new();
        for _ in 0..=100 {
            agent.sampler = sampler.clone();
            losses.push(agent.train_step(0.9).unwrap().unwrap());
        }
        assert!(losses[100] < losses[0], "{} >= {}", losses[100], losses[0]);
    }
}
