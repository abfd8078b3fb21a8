//! Experiment configuration: scenario, agent and run settings, the two shipped
//! profiles, JSON loading with partial overrides, and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::channel::{FadingModel, PathLossConfig};
use crate::error::{Error, Result};
use crate::grid::{GridMap, MobilityRules};
use crate::grouping::ClusteringConfig;
use crate::neural::{EncodingConfig, LossForm};
use crate::traffic::{ArrivalModel, CostWeights, LinkBudget, PowerAccounting};

/// Version of the JSON layout understood by this build.
pub const SCHEMA_VERSION: u32 = 1;

/// Everything that defines the simulated network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Number of VUE-pairs `K`.
    pub pairs: usize,
    /// Orthogonal channels `J` available to every group.
    pub channels: usize,
    /// Number of groups `I`.
    pub groups: usize,
    /// Epochs between re-clusterings.
    pub clustering_interval: u64,
    /// Path distance from each transmitter to its receiver, metres.
    pub following_distance_m: f64,
    pub speed_kmh: f64,
    /// Per-epoch bound on arrivals and on scheduled departures.
    pub max_packets: u32,
    pub buffer_capacity: u32,
    pub map: GridMap,
    pub mobility: MobilityRules,
    pub path_loss: PathLossConfig,
    pub fading: FadingModel,
    pub link: LinkBudget,
    pub weights: CostWeights,
    pub arrivals: ArrivalModel,
    pub power_accounting: PowerAccounting,
    pub clustering: ClusteringConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            pairs: 36,
            channels: 3,
            groups: 10,
            clustering_interval: 10,
            following_distance_m: 20.0,
            speed_kmh: 60.0,
            max_packets: 5,
            buffer_capacity: 500,
            map: GridMap::default(),
            mobility: MobilityRules::default(),
            path_loss: PathLossConfig::default(),
            fading: FadingModel::default(),
            link: LinkBudget::default(),
            weights: CostWeights::default(),
            arrivals: ArrivalModel::default(),
            power_accounting: PowerAccounting::default(),
            clustering: ClusteringConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn speed_mps(&self) -> f64 {
        self.speed_kmh / 3.6
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.pairs == 0 {
            out.push("pairs must be at least 1".into());
        }
        if self.channels == 0 {
            out.push("channels must be at least 1".into());
        }
        if self.groups == 0 || self.groups > self.pairs {
            out.push(format!("groups must lie in 1..={}, got {}", self.pairs, self.groups));
        }
        if self.clustering_interval == 0 {
            out.push("clustering_interval must be at least 1".into());
        }
        if !(self.following_distance_m > 0.0 && self.following_distance_m < self.map.side_length) {
            out.push(format!(
                "following_distance_m must lie in (0, {}), got {}",
                self.map.side_length, self.following_distance_m
            ));
        }
        if !(self.speed_kmh > 0.0 && self.speed_kmh.is_finite()) {
            out.push(format!("speed_kmh must be positive, got {}", self.speed_kmh));
        }
        if self.max_packets == 0 {
            out.push("max_packets must be at least 1".into());
        }
        if self.buffer_capacity < self.max_packets {
            out.push(format!(
                "buffer_capacity {} is below max_packets {}",
                self.buffer_capacity, self.max_packets
            ));
        }
        if let Err(Error::Config(v)) = self.map.validate() {
            out.extend(v);
        }
        if let Err(Error::Config(v)) = self.mobility.turns.validate() {
            out.extend(v);
        }
        out.extend(self.path_loss.params().violations());
        out.extend(self.link.violations());
        out.extend(self.weights.violations());
        if self.clustering.kmeans_iterations == 0 {
            out.push("clustering.kmeans_iterations must be at least 1".into());
        }
        if let Some(b) = self.clustering.bandwidth_m {
            if !(b > 0.0 && b.is_finite()) {
                out.push(format!("clustering.bandwidth_m must be positive, got {b}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        into_result(self.violations())
    }

    /// A copy with one swept quantity replaced.
    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> ScenarioConfig {
        let mut s = self.clone();
        match axis {
            SweepAxis::Pairs => s.pairs = value.round().max(0.0) as usize,
            SweepAxis::ArrivalRate => s.weights.arrival_rate = value,
            SweepAxis::FollowingDistance => s.following_distance_m = value,
        }
        s
    }
}

/// Target used for the next-state term of the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// Target network evaluated at the next action actually taken.
    #[default]
    Sarsa,
    /// Online network picks the next action per pair, target network scores it.
    DoubleDqn,
}

/// Hyper-parameters of the learning agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    /// Length `N` of the observation window fed to the recurrent layer.
    pub pool_size: usize,
    /// Replay capacity `M`.
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub epsilon: f64,
    /// Epochs between target-network resets.
    pub target_reset_interval: u64,
    pub learning_rate: f64,
    /// Learning rate reached at the last training epoch, decaying
    /// geometrically from `learning_rate`; constant when absent.
    #[serde(default)]
    pub final_learning_rate: Option<f64>,
    pub lstm_hidden: usize,
    pub dense_hidden: Vec<usize>,
    pub loss: LossForm,
    pub target: TargetRule,
    /// Multiplier applied to per-epoch costs before they enter the targets.
    pub cost_scale: f64,
    /// Global gradient-norm clip; none when absent.
    pub grad_clip: Option<f64>,
    /// Loss above which training aborts.
    pub divergence_threshold: f64,
    pub encoding: EncodingConfig,
    /// Write a checkpoint every this many epochs; none when absent.
    pub checkpoint_interval: Option<u64>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            pool_size: 20,
            replay_capacity: 5000,
            batch_size: 200,
            epsilon: 0.06,
            target_reset_interval: 500,
            learning_rate: 1e-3,
            final_learning_rate: None,
            lstm_hidden: 64,
            dense_hidden: vec![64, 64],
            loss: LossForm::default(),
            target: TargetRule::default(),
            cost_scale: 0.01,
            grad_clip: Some(10.0),
            divergence_threshold: 1e12,
            encoding: EncodingConfig::default(),
            checkpoint_interval: None,
        }
    }
}

impl AgentConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.pool_size == 0 {
            out.push("pool_size must be at least 1".into());
        }
        if self.pool_size > self.replay_capacity {
            out.push(format!(
                "pool_size {} exceeds replay_capacity {}",
                self.pool_size, self.replay_capacity
            ));
        }
        if self.batch_size == 0 || self.batch_size > self.replay_capacity {
            out.push(format!("batch_size must lie in 1..={}, got {}", self.replay_capacity, self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            out.push(format!("epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if self.target_reset_interval == 0 {
            out.push("target_reset_interval must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Some(f) = self.final_learning_rate {
            if !(f > 0.0 && f.is_finite()) {
                out.push(format!("final_learning_rate must be positive, got {f}"));
            }
        }
        if self.lstm_hidden == 0 || self.dense_hidden.contains(&0) {
            out.push("layer widths must be at least 1".into());
        }
        if !(self.cost_scale > 0.0 && self.cost_scale.is_finite()) {
            out.push(format!("cost_scale must be positive, got {}", self.cost_scale));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                out.push(format!("grad_clip must be positive, got {c}"));
            }
        }
        if !(self.divergence_threshold > 0.0) {
            out.push("divergence_threshold must be positive".into());
        }
        out.extend(self.encoding.violations());
        if self.checkpoint_interval == Some(0) {
            out.push("checkpoint_interval must be at least 1".into());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    ChannelAware,
    QueueAware,
    Random,
    Drl,
}

impl PolicyKind {
    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::ChannelAware => "channel_aware",
            PolicyKind::QueueAware => "queue_aware",
            PolicyKind::Random => "random",
            PolicyKind::Drl => "lstm_drl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Pairs,
    ArrivalRate,
    FollowingDistance,
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::Pairs => "pairs",
            SweepAxis::ArrivalRate => "arrival_rate",
            SweepAxis::FollowingDistance => "following_distance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Online training epochs for the learning agent.
    pub train_epochs: u64,
    /// Epochs each policy is rolled out for when measuring cost.
    pub eval_epochs: u64,
    pub seeds: Vec<u64>,
    pub policies: Vec<PolicyKind>,
    pub sweep: Option<Sweep>,
    /// Write a per-pair trajectory CSV next to the evaluation results.
    pub trajectory: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small network that trains in minutes on one core.
    #[default]
    Desk,
    /// The full-size network with the published settings.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub profile: Profile,
    pub scenario: ScenarioConfig,
    pub agent: AgentConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Eight pairs, two channels, two groups; trains in minutes.
    pub fn desk() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            profile: Profile::Desk,
            scenario: ScenarioConfig { pairs: 8, channels: 2, groups: 2, ..ScenarioConfig::default() },
            agent: AgentConfig {
                pool_size: 4,
                batch_size: 16,
                lstm_hidden: 32,
                dense_hidden: vec![32, 32],
                final_learning_rate: Some(1e-4),
                ..AgentConfig::default()
            },
            run: RunConfig {
                train_epochs: 20_000,
                eval_epochs: 2_000,
                seeds: vec![1, 2, 3, 4, 5],
                policies: vec![PolicyKind::Drl, PolicyKind::ChannelAware, PolicyKind::QueueAware, PolicyKind::Random],
                sweep: None,
                trajectory: false,
            },
        }
    }

    /// Thirty-six pairs in ten groups with the full-size agent.
    pub fn paper() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            profile: Profile::Paper,
            scenario: ScenarioConfig::default(),
            agent: AgentConfig::default(),
            run: RunConfig {
                train_epochs: 30_000,
                eval_epochs: 5_000,
                seeds: vec![1, 2, 3, 4, 5],
                policies: vec![PolicyKind::Drl, PolicyKind::ChannelAware, PolicyKind::QueueAware, PolicyKind::Random],
                sweep: None,
                trajectory: false,
            },
        }
    }

    /// Every problem with the configuration, in one list.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            out.push(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        out.extend(self.scenario.violations());
        out.extend(self.agent.violations());
        if self.run.seeds.is_empty() {
            out.push("run.seeds must not be empty".into());
        }
        if self.run.policies.is_empty() {
            out.push("run.policies must not be empty".into());
        }
        if self.run.eval_epochs == 0 {
            out.push("run.eval_epochs must be at least 1".into());
        }
        if let Some(sweep) = &self.run.sweep {
            if sweep.values.is_empty() {
                out.push("run.sweep.values must not be empty".into());
            }
            for &v in &sweep.values {
                let s = self.scenario.with_axis(sweep.axis, v);
                if sweep.axis == SweepAxis::Pairs && (v.fract() != 0.0 || v < 1.0) {
                    out.push(format!("sweep value {v} is not a pair count"));
                }
                for msg in s.violations() {
                    out.push(format!("at {} = {v}: {msg}", sweep.axis.label()));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        into_result(self.violations())
    }

    /// Parses a JSON document laid over `base`: absent keys keep the base value.
    pub fn from_json_over(text: &str, base: &ExperimentConfig) -> Result<Self> {
        let patch: Value = serde_json::from_str(text)?;
        let version = patch.get("schema_version").and_then(Value::as_u64);
        match version {
            None => return Err(Error::Schema("config is missing schema_version".into())),
            Some(v) if v != SCHEMA_VERSION as u64 => {
                return Err(Error::Schema(format!("schema_version {v} is not supported (expected {SCHEMA_VERSION})")))
            }
            _ => {}
        }
        let mut merged = serde_json::to_value(base)?;
        merge(&mut merged, patch);
        Ok(serde_json::from_value(merged)?)
    }

    /// Loads a config file. The `profile` key of the file, when present,
    /// selects the base; otherwise `fallback` does.
    pub fn load(path: &Path, fallback: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let raw: Value = serde_json::from_str(&text)?;
        let profile = match raw.get("profile") {
            Some(p) => serde_json::from_value(p.clone())?,
            None => fallback,
        };
        let cfg = Self::from_json_over(&text, &Self::profile(profile))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn into_result(v: Vec<String>) -> Result<()> {
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        ExperimentConfig::desk().validate().unwrap();
        ExperimentConfig::paper().validate().unwrap();
    }

    #[test]
    fn rejects_scaled_nlos_constant() {
        let mut c = ExperimentConfig::desk();
        c.scenario.path_loss.xi_db += 10.0 * 1.1f64.log10();
        let Err(Error::Config(v)) = c.validate() else { panic!("accepted") };
        assert!(v.iter().any(|m| m.contains("NLOS")));
    }

    #[test]
    fn lists_every_violation() {
        let mut c = ExperimentConfig::desk();
        c.scenario.weights.discount = 1.0;
        c.scenario.groups = 99;
        c.scenario.channels = 0;
        c.agent.pool_size = 10_000;
        let Err(Error::Config(v)) = c.validate() else { panic!("accepted") };
        assert_eq!(v.len(), 4, "{v:?}");
    }

    #[test]
    fn partial_override_and_round_trip() {
        let base = ExperimentConfig::desk();
        let c = ExperimentConfig::from_json_over(
            r#"{"schema_version": 1, "scenario": {"weights": {"arrival_rate": 2.0}}, "run": {"seeds": [7]}}"#,
            &base,
        )
        .unwrap();
        assert_eq!(c.scenario.weights.arrival_rate, 2.0);
        assert_eq!(c.scenario.weights.delay_weight, 30.0);
        assert_eq!(c.run.seeds, vec![7]);
        let again = ExperimentConfig::from_json_over(&c.to_json().unwrap(), &ExperimentConfig::paper()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn schema_version_is_required() {
        let base = ExperimentConfig::desk();
        assert!(matches!(ExperimentConfig::from_json_over("{}", &base), Err(Error::Schema(_))));
        assert!(matches!(
            ExperimentConfig::from_json_over(r#"{"schema_version": 99}"#, &base),
            Err(Error::Schema(_))
        ));
        assert!(ExperimentConfig::from_json_over(r#"{"schema_version": 1, "bogus": 1}"#, &base).is_err());
    }
}
