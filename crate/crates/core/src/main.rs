use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use v2x_rrm::config::{ExperimentConfig, PolicyKind, Profile, Sweep, SweepAxis};
use v2x_rrm::drl::run_training;
use v2x_rrm::env::TrajectoryWriter;
use v2x_rrm::harness::{
    build_id, config_hash, emit_plot_data, evaluation_seed, greedy_agent, measure, run_experiment, write_results,
    write_summary, summarize, MetricsWriter, ResultRow, TrainingRun,
};
use v2x_rrm::neural::{feature_count, gradient_check, read_checkpoint, write_checkpoint, Architecture, LossForm};
use v2x_rrm::oracle::{oracle_report, SarsaConfig};
use v2x_rrm::policies::{BaselineKind, BaselinePolicy, Policy};
use v2x_rrm::{Error, Result};

#[derive(Parser)]
#[command(name = "v2x-rrm", version = build_id(), about = "V2V channel and power scheduling experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment file laid over the profile defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Defaults to start from when the config file does not name one.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
}

#[derive(Subcommand)]
enum Command {
    /// Train the learning agent; writes a checkpoint and the loss curve.
    Train,
    /// Measure a checkpoint or the baselines.
    Evaluate {
        /// Network to measure; without it only baselines run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Baselines to measure (default: those in the config).
        #[arg(long, value_enum)]
        policy: Vec<Baseline>,
        /// Also dump every pair-epoch.
        #[arg(long)]
        trajectory: bool,
    },
    /// Every policy across a sweep of one scenario parameter.
    Sweep {
        #[arg(long, value_enum)]
        axis: Option<Axis>,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Tabular SARSA against value iteration on a tiny network.
    Oracle {
        #[arg(long)]
        episodes: Option<u64>,
    },
    /// Finite-difference audit of the network gradient.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        #[arg(long, default_value_t = 3)]
        steps: usize,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Baseline {
    ChannelAware,
    QueueAware,
    Random,
}

impl From<Baseline> for PolicyKind {
    fn from(b: Baseline) -> Self {
        match b {
            Baseline::ChannelAware => PolicyKind::ChannelAware,
            Baseline::QueueAware => PolicyKind::QueueAware,
            Baseline::Random => PolicyKind::Random,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Axis {
    Pairs,
    ArrivalRate,
    FollowingDistance,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Pairs => SweepAxis::Pairs,
            Axis::ArrivalRate => SweepAxis::ArrivalRate,
            Axis::FollowingDistance => SweepAxis::FollowingDistance,
        }
    }
}

const AUDIT_TOLERANCE: f64 = 1e-4;
const ORACLE_TOLERANCE: f64 = 0.05;

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p, common.profile)?,
        None => ExperimentConfig::profile(common.profile),
    };
    if let Some(s) = common.seed {
        cfg.run.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn save_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join("config.json"), cfg.to_json()? + "\n")?;
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let seed = cfg.run.seeds[0];
    let mut metrics = MetricsWriter::new(create(out, "metrics.csv")?)?;
    let every = cfg.agent.checkpoint_interval;
    let total = cfg.run.train_epochs;
    let trained = run_training(&cfg.scenario, &cfg.agent, total, seed, &mut |m, agent| {
        metrics.write(m)?;
        if every.is_some_and(|c| m.epoch % c == 0) {
            write_checkpoint(agent.params(), create(out, &format!("checkpoint_{:07}.bin", m.epoch))?)?;
        }
        if m.epoch % 1000 == 0 {
            eprintln!("epoch {}/{total}  cost {:.3}  loss {}", m.epoch, m.avg_cost, m.loss.map_or("-".into(), |l| format!("{l:.4e}")));
        }
        Ok(())
    })?;
    metrics.finish()?;
    write_checkpoint(trained.agent.params(), create(out, "checkpoint.bin")?)?;
    let value = cfg.scenario.pairs as f64;
    emit_plot_data(&[], &[TrainingRun { value, seed, metrics: trained.metrics }], out)?;
    eprintln!("wrote {}", out.join("checkpoint.bin").display());
    Ok(true)
}

fn evaluate(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>, policies: &[Baseline], trajectory: bool) -> Result<bool> {
    let mut kinds: Vec<PolicyKind> = if policies.is_empty() {
        cfg.run.policies.iter().copied().filter(|&k| k != PolicyKind::Drl).collect()
    } else {
        policies.iter().map(|&b| b.into()).collect()
    };
    let params = match checkpoint {
        Some(p) => {
            kinds.insert(0, PolicyKind::Drl);
            Some(read_checkpoint(File::open(p)?)?)
        }
        None => None,
    };
    let hash = config_hash(cfg)?;
    let mut rows = Vec::new();
    for &seed in &cfg.run.seeds {
        for &kind in &kinds {
            let mut policy: Box<dyn Policy> = match kind {
                PolicyKind::Drl => Box::new(greedy_agent(cfg, params.clone().expect("checkpoint loaded"), seed)?),
                PolicyKind::ChannelAware => Box::new(BaselinePolicy::new(BaselineKind::ChannelAware, seed)),
                PolicyKind::QueueAware => Box::new(BaselinePolicy::new(BaselineKind::QueueAware, seed)),
                PolicyKind::Random => Box::new(BaselinePolicy::new(BaselineKind::Random, seed)),
            };
            let mut dump = if trajectory || cfg.run.trajectory {
                Some(TrajectoryWriter::new(create(out, &format!("trajectory_{}_{seed}.csv", kind.label()))?)?)
            } else {
                None
            };
            let s = measure(cfg, policy.as_mut(), evaluation_seed(seed), dump.as_mut())?;
            if let Some(w) = dump {
                w.finish()?;
            }
            rows.push(ResultRow {
                policy: kind.label().into(),
                axis: "pairs".into(),
                value: cfg.scenario.pairs as f64,
                seed,
                avg_cost: s.avg_cost,
                avg_delay_epochs: s.avg_delay_epochs,
                avg_power_w: s.avg_power_w,
                config_hash: hash.clone(),
                build_id: build_id().into(),
            });
        }
    }
    finish_tables(&rows, out)?;
    Ok(true)
}

fn finish_tables(rows: &[ResultRow], out: &Path) -> Result<()> {
    write_results(create(out, "results.csv")?, rows)?;
    let summary = summarize(rows);
    write_summary(create(out, "summary.csv")?, &summary)?;
    for s in &summary {
        println!(
            "{:<14} {}={:<6} cost {:>10.4} ± {:<8.4} delay {:>8.3} power {:.4e} W",
            s.policy, s.axis, s.value, s.mean_cost, s.std_cost, s.mean_delay_epochs, s.mean_power_w
        );
    }
    Ok(())
}

fn sweep(mut cfg: ExperimentConfig, out: &Path, axis: Option<Axis>, values: Vec<f64>) -> Result<bool> {
    match (axis, cfg.run.sweep.take()) {
        (Some(a), _) => {
            if values.is_empty() {
                return Err(Error::Config(vec!["--axis needs --values".into()]));
            }
            cfg.run.sweep = Some(Sweep { axis: a.into(), values });
        }
        (None, Some(mut s)) => {
            if !values.is_empty() {
                s.values = values;
            }
            cfg.run.sweep = Some(s);
        }
        (None, None) => {
            return Err(Error::Config(vec!["sweep needs --axis or run.sweep in the config".into()]));
        }
    }
    cfg.validate()?;
    save_config(&cfg, out)?;
    let res = run_experiment(&cfg, &mut |r| {
        eprintln!("{} {}={} seed {}: cost {:.4}", r.policy, r.axis, r.value, r.seed, r.avg_cost)
    })?;
    finish_tables(&res.rows, out)?;
    emit_plot_data(&res.rows, &res.training, out)?;
    Ok(true)
}

fn oracle(cfg: &ExperimentConfig, out: &Path, episodes: Option<u64>) -> Result<bool> {
    let mut sarsa = SarsaConfig::default();
    if let Some(e) = episodes {
        sarsa.episodes = e;
    }
    let report = oracle_report(&sarsa, cfg.run.seeds[0])?;
    let pass = report.sup_norm < ORACLE_TOLERANCE;
    let mut w = csv::Writer::from_writer(create(out, "oracle.csv")?);
    w.write_record(["states", "actions", "sup_norm", "value_min", "value_max", "tolerance", "pass"])?;
    w.write_record([
        report.states.to_string(),
        report.actions.to_string(),
        report.sup_norm.to_string(),
        report.value_range.0.to_string(),
        report.value_range.1.to_string(),
        ORACLE_TOLERANCE.to_string(),
        pass.to_string(),
    ])?;
    w.flush()?;
    println!(
        "{} states x {} actions: sup-norm gap {:.5} (Q in [{:.4}, {:.4}]) {}",
        report.states,
        report.actions,
        report.sup_norm,
        report.value_range.0,
        report.value_range.1,
        if pass { "ok" } else { "TOO LARGE" }
    );
    Ok(pass)
}

fn gradcheck(cfg: &ExperimentConfig, out: &Path, hidden: usize, steps: usize) -> Result<bool> {
    let sc = &cfg.scenario;
    let arch = Architecture {
        input: feature_count(sc.channels, sc.groups),
        lstm_hidden: hidden,
        dense: vec![hidden],
        output: Architecture::action_count(sc.channels, sc.max_packets),
    };
    let mut w = csv::Writer::from_writer(create(out, "gradcheck.csv")?);
    w.write_record(["loss", "tensor", "parameters", "max_relative_error"])?;
    let mut worst = 0.0f64;
    for (label, form) in [("summed_td", LossForm::SummedTd), ("per_pair_squared", LossForm::PerPairSquared)] {
        let report = gradient_check(arch.clone(), steps, 3, 2, form, cfg.run.seeds[0], 1e-5)?;
        for t in &report.tensors {
            w.write_record([label, t.name.as_str(), &t.parameters.to_string(), &t.max_relative_error.to_string()])?;
        }
        worst = worst.max(report.max_relative_error());
        println!("{label}: max relative error {:.3e}", report.max_relative_error());
    }
    w.flush()?;
    Ok(worst < AUDIT_TOLERANCE)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load(&cli.common)?;
    let out = cli.common.out.as_path();
    fs::create_dir_all(out)?;
    match cli.command {
        Command::Train => {
            save_config(&cfg, out)?;
            train(&cfg, out)
        }
        Command::Evaluate { checkpoint, policy, trajectory } => {
            save_config(&cfg, out)?;
            evaluate(&cfg, out, checkpoint.as_deref(), &policy, trajectory)
        }
        Command::Sweep { axis, values } => sweep(cfg, out, axis, values),
        Command::Oracle { episodes } => oracle(&cfg, out, episodes),
        Command::Gradcheck { hidden, steps } => gradcheck(&cfg, out, hidden, steps),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
