//! Heuristic allocation rules, the one-step scheduler, and the per-group
//! min-cost channel matching.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, JointAction, PairAction, StepOutcome};
use crate::error::{Error, Result};
use crate::rng::{derive, SimRng, Stream};
use crate::traffic::{transmit_power, CostWeights, LinkBudget, QueueState};

/// Anything that picks a joint action from the current network.
pub trait Policy {
    fn name(&self) -> &str;

    fn decide(&mut self, env: &Environment) -> Result<JointAction>;

    /// Called with the outcome of the action just decided.
    fn observe(&mut self, _outcome: &StepOutcome) {}
}

/// Departures minimising this epoch's power plus the delay left behind:
/// `argmin_r eta * p(r) + phi * (q - r) / lambda` over `r` in `0..=min(q, max)`.
/// Ties go to the smaller count.
pub fn greedy_schedule(q: QueueState, g: f64, budget: &LinkBudget, weights: &CostWeights, max: u32) -> Result<u32> {
    let mut best = (f64::INFINITY, 0);
    for r in 0..=q.0.min(max) {
        let p = transmit_power(r, g, budget, true)?;
        let v = weights.power_weight * p + weights.delay_weight * (q.0 - r) as f64 / weights.arrival_rate;
        if v < best.0 {
            best = (v, r);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Repeatedly hand out the best remaining (pair, channel) gain.
    ChannelAware,
    /// Longest queues first, each taking its best remaining channel.
    QueueAware,
    /// Random pairs on a random matching.
    Random,
}

/// Channel for each member of one group. `gains[i]` and `queues[i]` describe member `i`.
pub fn baseline_allocate<R: Rng + ?Sized>(
    kind: BaselineKind,
    gains: &[&[f64]],
    queues: &[u32],
    channels: usize,
    rng: &mut R,
) -> Vec<Option<usize>> {
    let n = gains.len();
    let mut out = vec![None; n];
    let mut free = vec![true; channels];
    match kind {
        BaselineKind::ChannelAware => {
            for _ in 0..n.min(channels) {
                let mut best: Option<(f64, usize, usize)> = None;
                for i in (0..n).filter(|&i| out[i].is_none()) {
                    for j in (0..channels).filter(|&j| free[j]) {
                        if best.is_none_or(|(g, _, _)| gains[i][j] > g) {
                            best = Some((gains[i][j], i, j));
                        }
                    }
                }
                let (_, i, j) = best.expect("a free pair and channel remain");
                out[i] = Some(j);
                free[j] = false;
            }
        }
        BaselineKind::QueueAware => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| std::cmp::Reverse(queues[i]));
            for &i in order.iter().take(channels) {
                let j = (0..channels)
                    .filter(|&j| free[j])
                    .fold(None, |acc: Option<usize>, j| match acc {
                        Some(b) if gains[i][b] >= gains[i][j] => Some(b),
                        _ => Some(j),
                    })
                    .expect("a free channel remains");
                out[i] = Some(j);
                free[j] = false;
            }
        }
        BaselineKind::Random => {
            let m = n.min(channels);
            let mut who: Vec<usize> = (0..n).collect();
            who.shuffle(rng);
            let mut which: Vec<usize> = (0..channels).collect();
            which.shuffle(rng);
            for (&i, &j) in who.iter().zip(&which).take(m) {
                out[i] = Some(j);
            }
        }
    }
    out
}

/// A baseline allocation rule followed by [`greedy_schedule`] on every allocated pair.
#[derive(Debug, Clone)]
pub struct BaselinePolicy {
    kind: BaselineKind,
    rng: SimRng,
}

impl BaselinePolicy {
    pub fn new(kind: BaselineKind, seed: u64) -> Self {
        Self { kind, rng: derive(seed, Stream::Policy, 0) }
    }
}

impl Policy for BaselinePolicy {
    fn name(&self) -> &str {
        match self.kind {
            BaselineKind::ChannelAware => "channel_aware",
            BaselineKind::QueueAware => "queue_aware",
            BaselineKind::Random => "random",
        }
    }

    fn decide(&mut self, env: &Environment) -> Result<JointAction> {
        let sc = env.scenario();
        let pairs = env.pairs();
        let mut action = JointAction::idle(pairs.len());
        for members in env.grouping().partition() {
            if members.is_empty() {
                continue;
            }
            let gains: Vec<&[f64]> = members.iter().map(|&k| pairs[k].gains.as_slice()).collect();
            let queues: Vec<u32> = members.iter().map(|&k| pairs[k].queue.0).collect();
            let alloc = baseline_allocate(self.kind, &gains, &queues, sc.channels, &mut self.rng);
            for (&k, c) in members.iter().zip(alloc) {
                if let Some(j) = c {
                    let r = greedy_schedule(pairs[k].queue, pairs[k].gains.get(j), &sc.link, &sc.weights, sc.max_packets)?;
                    action.set(k, PairAction::on(j, r));
                }
            }
        }
        Ok(action)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub channels: Vec<Option<usize>>,
    pub total: f64,
}

/// Minimum-cost feasible channel assignment inside one group.
///
/// `score[i][0]` is the cost of leaving pair `i` without a channel and
/// `score[i][1 + j]` the cost of giving it channel `j`. Solved as a
/// rectangular assignment problem with one private "no channel" column per
/// pair, by the Hungarian method with potentials.
pub fn assign_min_cost(score: &[Vec<f64>]) -> Result<Assignment> {
    let n = score.len();
    if n == 0 {
        return Ok(Assignment { channels: Vec::new(), total: 0.0 });
    }
    let width = score[0].len();
    if width == 0 {
        return Err(Error::Shape("score rows need a no-channel column".into()));
    }
    for (row, r) in score.iter().enumerate() {
        if r.len() != width {
            return Err(Error::Shape(format!("score row {row} has {} columns, expected {width}", r.len())));
        }
        if let Some((col, &value)) = r.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidScore { row, col, value });
        }
    }
    let channels = width - 1;
    let cols = channels + n;
    // Column c < channels is channel c; column channels + i is "no channel" and
    // costs score[i][0] for every row.
    let cost = |i: usize, c: usize| if c < channels { score[i][1 + c] } else { score[i][0] };

    // 1-based arrays with a virtual column 0, following the classic O(n^2 m) scheme.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut out = vec![None; n];
    for j in 1..=channels {
        if owner[j] != 0 {
            out[owner[j] - 1] = Some(j - 1);
        }
    }
    let total = out.iter().enumerate().map(|(i, c)| score[i][c.map_or(0, |j| j + 1)]).sum();
    Ok(Assignment { channels: out, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Smallest total over every feasible assignment, by enumeration.
    fn brute_force(score: &[Vec<f64>]) -> f64 {
        fn go(i: usize, score: &[Vec<f64>], free: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if i == score.len() {
                *best = best.min(acc);
                return;
            }
            go(i + 1, score, free, acc + score[i][0], best);
            for j in 0..free.len() {
                if free[j] {
                    free[j] = false;
                    go(i + 1, score, free, acc + score[i][1 + j], best);
                    free[j] = true;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(0, score, &mut vec![true; score[0].len() - 1], 0.0, &mut best);
        best
    }

    #[test]
    fn two_by_two() {
        let a = assign_min_cost(&[vec![1e9, 1.0, 2.0], vec![1e9, 3.0, 0.0]]).unwrap();
        assert_eq!(a.channels, vec![Some(0), Some(1)]);
        assert_eq!(a.total, 1.0);
    }

    #[test]
    fn one_channel_two_pairs() {
        let a = assign_min_cost(&[vec![10.0, 3.0], vec![10.0, 5.0]]).unwrap();
        assert_eq!(a.channels, vec![Some(0), None]);
        assert_eq!(a.total, 13.0);
    }

    #[test]
    fn identical_rows_fix_the_total() {
        let row = vec![4.0, 1.0, 2.0];
        let a = assign_min_cost(&[row.clone(), row.clone(), row]).unwrap();
        assert_eq!(a.total, 7.0);
    }

    #[test]
    fn no_channel_can_win() {
        let a = assign_min_cost(&[vec![0.0, 5.0, 6.0]]).unwrap();
        assert_eq!(a.channels, vec![None]);
    }

    #[test]
    fn rejects_non_finite_scores() {
        let e = assign_min_cost(&[vec![0.0, f64::NAN]]).unwrap_err();
        assert!(matches!(e, Error::InvalidScore { row: 0, col: 1, .. }));
    }

    proptest! {
        #[test]
        fn matches_enumeration(n in 1usize..=3, j in 1usize..=3, seed: u64) {
            let mut rng = derive(seed, Stream::Policy, 0);
            let score: Vec<Vec<f64>> = (0..n).map(|_| (0..=j).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
            let a = assign_min_cost(&score).unwrap();
            prop_assert_eq!(a.total, brute_force(&score));
        }
    }

    #[test]
    fn greedy_schedule_matches_enumeration() {
        let b = LinkBudget::default();
        let w = CostWeights::default();
        for max in 0..=5u32 {
            for q in 0..=10u32 {
                for g in [1e-12, 3e-11, 1e-10, 1e-9, 1e-8, 1.0] {
                    let r = greedy_schedule(QueueState(q), g, &b, &w, max).unwrap();
                    let f = |r: u32| transmit_power(r, g, &b, true).unwrap() + 30.0 * (q - r) as f64;
                    let best = (0..=q.min(max)).map(f).fold(f64::INFINITY, f64::min);
                    assert_eq!(f(r), best);
                    assert!((0..r).all(|s| f(s) > best));
                }
            }
        }
        assert_eq!(greedy_schedule(QueueState(0), 1e-9, &b, &w, 5).unwrap(), 0);
        assert_eq!(greedy_schedule(QueueState(4), 1e6, &b, &w, 5).unwrap(), 4);
        assert_eq!(greedy_schedule(QueueState(9), 1e6, &b, &w, 5).unwrap(), 5);
    }

    #[test]
    fn single_pair_single_channel() {
        let mut rng = derive(0, Stream::Policy, 0);
        for kind in [BaselineKind::ChannelAware, BaselineKind::QueueAware, BaselineKind::Random] {
            assert_eq!(baseline_allocate(kind, &[&[1.0]], &[0], 1, &mut rng), vec![Some(0)]);
        }
    }

    #[test]
    fn channel_aware_trace() {
        let mut rng = derive(0, Stream::Policy, 0);
        let a = baseline_allocate(BaselineKind::ChannelAware, &[&[5.0, 1.0], &[4.0, 3.0]], &[0, 0], 2, &mut rng);
        assert_eq!(a, vec![Some(0), Some(1)]);
    }

    #[test]
    fn queue_aware_serves_longest_queue() {
        let mut rng = derive(0, Stream::Policy, 0);
        let a = baseline_allocate(BaselineKind::QueueAware, &[&[9.0], &[1.0]], &[0, 7], 1, &mut rng);
        assert_eq!(a, vec![None, Some(0)]);
    }

    proptest! {
        #[test]
        fn allocations_are_feasible(n in 1usize..6, j in 1usize..4, seed: u64) {
            let mut rng = derive(seed, Stream::Policy, 1);
            let gains: Vec<Vec<f64>> = (0..n).map(|_| (0..j).map(|_| rng.random::<f64>()).collect()).collect();
            let rows: Vec<&[f64]> = gains.iter().map(|g| g.as_slice()).collect();
            let queues: Vec<u32> = (0..n).map(|_| rng.random_range(0..10)).collect();
            for kind in [BaselineKind::ChannelAware, BaselineKind::QueueAware, BaselineKind::Random] {
                let a = baseline_allocate(kind, &rows, &queues, j, &mut rng);
                let used: Vec<usize> = a.iter().flatten().copied().collect();
                let mut dedup = used.clone();
                dedup.sort();
                dedup.dedup();
                prop_assert_eq!(dedup.len(), used.len());
                prop_assert_eq!(used.len(), n.min(j));
                prop_assert!(used.iter().all(|&c| c < j));
            }
        }
    }
}
