//! Experiment orchestration: which policies run where, with which seeds, and
//! the CSV files that come out.
//!
//! Every cell of an experiment is one (policy, sweep value, seed) triple. The
//! learning agent is trained online in the cell's network and then measured
//! greedily in a fresh network drawn from a separate seed; baselines are only
//! measured. All policies of one cell see the same measurement network.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, PolicyKind, SweepAxis};
use crate::drl::{run_training, DrlAgent, EpochMetrics};
use crate::env::{run_policy, Environment, RolloutSummary, TrajectoryWriter};
use crate::error::{Error, Result};
use crate::neural::NetParams;
use crate::policies::{BaselineKind, BaselinePolicy, Policy};
use crate::rng::{derive, Stream};

/// Identifies the binary that produced a result row.
pub fn build_id() -> &'static str {
    env!("V2X_BUILD_ID")
}

/// SHA-256 of the canonical JSON form of `config`, hex encoded.
pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let json = serde_json::to_string(config)?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

/// Seed of the network a policy is measured in after training under `seed`.
pub fn evaluation_seed(seed: u64) -> u64 {
    derive(seed, Stream::Placement, u64::MAX).next_u64()
}

/// One line of the long-form results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub policy: String,
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub avg_cost: f64,
    pub avg_delay_epochs: f64,
    pub avg_power_w: f64,
    pub config_hash: String,
    pub build_id: String,
}

/// Mean and sample standard deviation over seeds for one (policy, axis, value).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub policy: String,
    pub axis: String,
    pub value: f64,
    pub seeds: usize,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub mean_delay_epochs: f64,
    pub std_delay_epochs: f64,
    pub mean_power_w: f64,
    pub std_power_w: f64,
}

/// Training record of the learning agent in one cell.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub value: f64,
    pub seed: u64,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentResults {
    pub rows: Vec<ResultRow>,
    pub training: Vec<TrainingRun>,
    /// Final weights of each training run, in the order of `training`.
    pub networks: Vec<NetParams>,
}

impl ExperimentResults {
    pub fn summary(&self) -> Vec<SummaryRow> {
        summarize(&self.rows)
    }
}

/// Sweep axis and values of an experiment; without a sweep, the pair count
/// of the base scenario is the single value.
pub fn axis_values(config: &ExperimentConfig) -> (SweepAxis, Vec<f64>) {
    match &config.run.sweep {
        Some(s) => (s.axis, s.values.clone()),
        None => (SweepAxis::Pairs, vec![config.scenario.pairs as f64]),
    }
}

fn baseline(kind: PolicyKind) -> Option<BaselineKind> {
    match kind {
        PolicyKind::ChannelAware => Some(BaselineKind::ChannelAware),
        PolicyKind::QueueAware => Some(BaselineKind::QueueAware),
        PolicyKind::Random => Some(BaselineKind::Random),
        PolicyKind::Drl => None,
    }
}

/// Measures `policy` for `epochs` epochs in a fresh network seeded by `seed`.
pub fn measure<W: Write>(
    config: &ExperimentConfig,
    policy: &mut dyn Policy,
    seed: u64,
    trajectory: Option<&mut TrajectoryWriter<W>>,
) -> Result<RolloutSummary> {
    let mut env = Environment::new(config.scenario.clone(), seed)?;
    run_policy(&mut env, policy, config.run.eval_epochs, trajectory)
}

/// The trained agent, frozen and greedy, ready to be measured.
pub fn greedy_agent(config: &ExperimentConfig, params: NetParams, seed: u64) -> Result<DrlAgent> {
    let mut agent = DrlAgent::with_params(&config.scenario, &config.agent, params, seed)?;
    agent.set_epsilon(0.0);
    agent.reset_episode();
    Ok(agent)
}

/// Runs every (policy, sweep value, seed) cell of `config` in a fixed order.
/// `progress` hears about each finished cell.
pub fn run_experiment(config: &ExperimentConfig, progress: &mut dyn FnMut(&ResultRow)) -> Result<ExperimentResults> {
    config.validate()?;
    let hash = config_hash(config)?;
    let (axis, values) = axis_values(config);
    let mut out = ExperimentResults::default();
    for &value in &values {
        let mut cell = config.clone();
        cell.scenario = config.scenario.with_axis(axis, value);
        for &seed in &config.run.seeds {
            let eval_seed = evaluation_seed(seed);
            for &kind in &config.run.policies {
                let summary = match baseline(kind) {
                    Some(b) => measure::<std::io::Sink>(&cell, &mut BaselinePolicy::new(b, seed), eval_seed, None)?,
                    None => {
                        let trained = run_training(&cell.scenario, &cell.agent, cell.run.train_epochs, seed, &mut |_, _| Ok(()))?;
                        out.training.push(TrainingRun { value, seed, metrics: trained.metrics });
                        out.networks.push(trained.agent.params().clone());
                        let mut agent = greedy_agent(&cell, trained.agent.params().clone(), seed)?;
                        measure::<std::io::Sink>(&cell, &mut agent, eval_seed, None)?
                    }
                };
                let row = ResultRow {
                    policy: kind.label().to_string(),
                    axis: axis.label().to_string(),
                    value,
                    seed,
                    avg_cost: summary.avg_cost,
                    avg_delay_epochs: summary.avg_delay_epochs,
                    avg_power_w: summary.avg_power_w,
                    config_hash: hash.clone(),
                    build_id: build_id().to_string(),
                };
                progress(&row);
                out.rows.push(row);
            }
        }
    }
    Ok(out)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows by (policy, axis, value) in order of first appearance.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, u64)> = Vec::new();
    let mut cells: BTreeMap<(String, String, u64), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.policy.clone(), r.axis.clone(), r.value.to_bits());
        if !cells.contains_key(&key) {
            order.push(key.clone());
        }
        cells.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &cells[&key];
            let pick = |f: fn(&ResultRow) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (mean_cost, std_cost) = pick(|r| r.avg_cost);
            let (mean_delay_epochs, std_delay_epochs) = pick(|r| r.avg_delay_epochs);
            let (mean_power_w, std_power_w) = pick(|r| r.avg_power_w);
            SummaryRow {
                policy: key.0,
                axis: key.1,
                value: f64::from_bits(key.2),
                seeds: rs.len(),
                mean_cost,
                std_cost,
                mean_delay_epochs,
                std_delay_epochs,
                mean_power_w,
                std_power_w,
            }
        })
        .collect()
}

fn write_rows<W: Write, T: Serialize>(sink: W, rows: &[T], header: &[&str]) -> Result<W> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub const RESULT_COLUMNS: [&str; 9] =
    ["policy", "axis", "value", "seed", "avg_cost", "avg_delay_epochs", "avg_power_w", "config_hash", "build_id"];

pub const SUMMARY_COLUMNS: [&str; 10] = [
    "policy",
    "axis",
    "value",
    "seeds",
    "mean_cost",
    "std_cost",
    "mean_delay_epochs",
    "std_delay_epochs",
    "mean_power_w",
    "std_power_w",
];

pub fn write_results<W: Write>(sink: W, rows: &[ResultRow]) -> Result<W> {
    write_rows(sink, rows, &RESULT_COLUMNS)
}

pub fn write_summary<W: Write>(sink: W, rows: &[SummaryRow]) -> Result<W> {
    write_rows(sink, rows, &SUMMARY_COLUMNS)
}

/// Parses a results table, insisting on every column.
pub fn read_results<R: Read>(source: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(source);
    let header = r.headers()?.clone();
    let missing: Vec<&str> = RESULT_COLUMNS.iter().copied().filter(|c| !header.iter().any(|h| h == *c)).collect();
    if !missing.is_empty() {
        return Err(Error::Schema(format!("results table lacks column(s): {}", missing.join(", "))));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Streams per-epoch training metrics as CSV.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub const HEADER: [&'static str; 6] = ["epoch", "loss", "avg_cost", "avg_queue", "avg_power_w", "epsilon"];

    pub fn new(sink: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(sink);
        inner.write_record(Self::HEADER)?;
        Ok(Self { inner })
    }

    /// The loss field is empty for epochs before the first update.
    pub fn write(&mut self, m: &EpochMetrics) -> Result<()> {
        self.inner.write_record([
            m.epoch.to_string(),
            m.loss.map(|l| l.to_string()).unwrap_or_default(),
            m.avg_cost.to_string(),
            m.avg_queue.to_string(),
            m.avg_power_w.to_string(),
            m.epsilon.to_string(),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// Figure file name for cost along `axis`.
pub fn cost_figure(axis: SweepAxis) -> String {
    format!("cost_vs_{}.csv", axis.label())
}

pub const LOSS_FIGURE: &str = "loss_vs_epoch.csv";

/// Writes one CSV per figure into `dir`: the loss curve of every training
/// run, and mean cost against each sweep axis present in `rows`. Returns the
/// files written.
pub fn emit_plot_data(rows: &[ResultRow], training: &[TrainingRun], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if !training.is_empty() {
        let path = dir.join(LOSS_FIGURE);
        let mut w = csv::Writer::from_writer(fs::File::create(&path)?);
        w.write_record(["value", "seed", "epoch", "loss"])?;
        for run in training {
            for m in &run.metrics {
                w.write_record([
                    run.value.to_string(),
                    run.seed.to_string(),
                    m.epoch.to_string(),
                    m.loss.map(|l| l.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
        written.push(path);
    }
    for axis in [SweepAxis::Pairs, SweepAxis::ArrivalRate, SweepAxis::FollowingDistance] {
        let on_axis: Vec<ResultRow> = rows.iter().filter(|r| r.axis == axis.label()).cloned().collect();
        if on_axis.is_empty() {
            continue;
        }
        let path = dir.join(cost_figure(axis));
        let mut w = csv::Writer::from_writer(fs::File::create(&path)?);
        w.write_record([axis.label(), "policy", "seeds", "mean_cost", "std_cost"])?;
        for s in summarize(&on_axis) {
            w.write_record([
                s.value.to_string(),
                s.policy,
                s.seeds.to_string(),
                s.mean_cost.to_string(),
                s.std_cost.to_string(),
            ])?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(policy: &str, value: f64, seed: u64, cost: f64) -> ResultRow {
        ResultRow {
            policy: policy.into(),
            axis: "pairs".into(),
            value,
            seed,
            avg_cost: cost,
            avg_delay_epochs: 1.0,
            avg_power_w: 0.5,
            config_hash: "abc".into(),
            build_id: "x".into(),
        }
    }

    #[test]
    fn sample_std_over_seeds() {
        let rows = vec![row("random", 4.0, 1, 1.0), row("random", 4.0, 2, 3.0), row("random", 8.0, 1, 5.0)];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].seeds, s[0].mean_cost), (2, 2.0));
        assert!((s[0].std_cost - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1].std_cost, 0.0);
    }

    #[test]
    fn results_round_trip_and_schema() {
        let rows = vec![row("random", 4.0, 1, 1.25), row("channel_aware", 4.0, 1, 0.5)];
        let bytes = write_results(Vec::new(), &rows).unwrap();
        assert_eq!(read_results(bytes.as_slice()).unwrap(), rows);
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("policy,axis,value,seed,avg_cost,avg_delay_epochs,avg_power_w,config_hash,build_id\n"));

        let no_seed = "policy,axis,value,avg_cost,avg_delay_epochs,avg_power_w,config_hash,build_id\nrandom,pairs,4,1,1,1,a,b\n";
        let err = read_results(no_seed.as_bytes()).unwrap_err();
        assert!(matches!(&err, Error::Schema(m) if m.contains("seed")), "{err}");
    }

    #[test]
    fn figure_files() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row("random", 4.0, 1, 1.0)];
        let metrics: Vec<EpochMetrics> = (1..=7)
            .map(|e| EpochMetrics { epoch: e, loss: (e > 2).then_some(1.0 / e as f64), avg_cost: 1.0, avg_queue: 0.0, avg_power_w: 0.0, epsilon: 0.06 })
            .collect();
        let written = emit_plot_data(&rows, &[TrainingRun { value: 4.0, seed: 1, metrics }], dir.path()).unwrap();
        assert_eq!(written.len(), 2);
        let loss = fs::read_to_string(dir.path().join(LOSS_FIGURE)).unwrap();
        assert_eq!(loss.lines().count(), 1 + 7);
        let cost = fs::read_to_string(dir.path().join("cost_vs_pairs.csv")).unwrap();
        assert_eq!(cost.lines().collect::<Vec<_>>(), ["pairs,policy,seeds,mean_cost,std_cost", "4,random,1,1,0"]);
    }

    #[test]
    fn metrics_header() {
        let mut w = MetricsWriter::new(Vec::new()).unwrap();
        w.write(&EpochMetrics { epoch: 1, loss: None, avg_cost: 2.5, avg_queue: 1.0, avg_power_w: 0.1, epsilon: 0.06 }).unwrap();
        let text = String::from_utf8(w.finish().unwrap()).unwrap();
        assert_eq!(text, "epoch,loss,avg_cost,avg_queue,avg_power_w,epsilon\n1,,2.5,1,0.1,0.06\n");
    }

    #[test]
    fn hash_tracks_config() {
        let a = ExperimentConfig::desk();
        let mut b = a.clone();
        b.run.seeds = vec![9];
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a.clone()).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn empty_system_costs_nothing() {
        let mut c = ExperimentConfig::desk();
        c.scenario.weights.arrival_rate = 1e-12;
        c.run.policies = vec![PolicyKind::Random];
        c.run.seeds = vec![1];
        c.run.eval_epochs = 200;
        let res = run_experiment(&c, &mut |_| {}).unwrap();
        assert_eq!(res.rows.len(), 1);
        assert!(res.rows[0].avg_cost.abs() < 1e-9, "{:?}", res.rows[0]);
    }
}
