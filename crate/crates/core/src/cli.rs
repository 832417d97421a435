//! Config-driven command line: task generation, single runs, grids, bootstrapping chains,
//! easy-to-hard sweeps, strategy comparisons, and report tables.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{generate_task, rebalance, DataError, DatasetBundle, TaskSpec};
use crate::easy_to_hard::{self, AssignConfig, E2hError};
use crate::losses::LossSpec;
use crate::metrics::{self, MetricsError};
use crate::models::{CapacityLadder, ModelError, ModelSpec};
use crate::training::{self, RunRecord, TrainConfig, TrainError};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    E2h(#[from] E2hError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{failed} of {total} runs failed:\n{details}")]
    PartialFailure {
        failed: usize,
        total: usize,
        details: String,
    },
}

#[derive(Debug, Parser)]
#[command(name = "w2s", version, about = "Weak-to-strong generalization lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config's `output`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; overrides the config's `parallel`.
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
    /// Added to every configured seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed_offset: u64,
}

#[derive(Debug, Clone, Copy, Subcommand, PartialEq, Eq)]
pub enum Command {
    /// Write the dataset CSV and its JSON sidecar for each seed.
    Gen,
    /// One weak-to-strong run per seed for the `[run]` pair.
    Run,
    /// Every grid pair × loss × seed.
    Grid,
    /// Bootstrapping chain through the `[bootstrap]` ladder indices.
    Bootstrap,
    /// Difficulty assignment and cutoff sweep.
    E2h,
    /// Probing versus finetuning comparison.
    Strategies,
    /// Summary tables from runs.jsonl.
    Report,
}

/// A ladder rung in config files; the input dimension comes from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum LadderEntry {
    LinearProbe { k: usize },
    Mlp { widths: Vec<usize> },
}

impl LadderEntry {
    fn to_spec(&self, d: usize) -> Result<ModelSpec, ModelError> {
        match self {
            LadderEntry::LinearProbe { k } => ModelSpec::linear_probe(*k, d),
            LadderEntry::Mlp { widths } => ModelSpec::mlp(widths.clone(), d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub weak: usize,
    pub strong: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub chain: Vec<usize>,
    #[serde(default = "LossSpec::naive")]
    pub intermediate_loss: LossSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct E2hConfig {
    #[serde(default)]
    pub assign: AssignConfig,
    /// Ladder indices whose compute proxies serve as cutoffs; omitted means every rung plus
    /// no cutoff.
    #[serde(default)]
    pub cutoffs: Option<Vec<usize>>,
    pub strong: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    #[serde(default)]
    pub rebalance: bool,
    #[serde(default)]
    pub train: TrainConfig,
    /// Omitted means the default ladder for the task dimension.
    #[serde(default)]
    pub ladder: Option<Vec<LadderEntry>>,
    /// (weak, strong) ladder index pairs; omitted means every pair with weak < strong.
    #[serde(default)]
    pub grid: Option<Vec<(usize, usize)>>,
    #[serde(default = "default_losses")]
    pub losses: Vec<LossSpec>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub parallel: Option<usize>,
    #[serde(default)]
    pub run: Option<PairConfig>,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
    #[serde(default)]
    pub e2h: Option<E2hConfig>,
    #[serde(default)]
    pub strategies: Option<PairConfig>,
}

fn default_losses() -> Vec<LossSpec> {
    vec![LossSpec::naive()]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ladder(&self) -> Result<CapacityLadder, CliError> {
        match &self.ladder {
            None => Ok(CapacityLadder::default_for(self.task.d)?),
            Some(entries) => {
                let specs = entries
                    .iter()
                    .map(|e| e.to_spec(self.task.d))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(CapacityLadder::new(specs)?)
            }
        }
    }

    pub fn grid_pairs(&self) -> Result<Vec<(usize, usize)>, CliError> {
        let n = self.ladder()?.len();
        Ok(match &self.grid {
            Some(g) => g.clone(),
            None => (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect(),
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, msg: String| Err(CliError::Config(format!("{key}: {msg}")));
        if self.seeds.is_empty() {
            return bad("seeds", "must not be empty".into());
        }
        if self.parallel == Some(0) {
            return bad("parallel", "must be at least 1".into());
        }
        self.task
            .validate()
            .map_err(|e| CliError::Config(format!("task: {e}")))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        for (i, l) in self.losses.iter().enumerate() {
            l.validate()
                .map_err(|e| CliError::Config(format!("losses[{i}]: {e}")))?;
        }
        let ladder = self.ladder().map_err(|e| CliError::Config(format!("ladder: {e}")))?;
        let n = ladder.len();
        let check = |key: &str, idx: usize| {
            if idx >= n {
                Err(CliError::Config(format!("{key}: index {idx} outside ladder of {n}")))
            } else {
                Ok(())
            }
        };
        if let Some(g) = &self.grid {
            for (i, &(w, s)) in g.iter().enumerate() {
                check(&format!("grid[{i}]"), w)?;
                check(&format!("grid[{i}]"), s)?;
            }
        }
        if let Some(r) = &self.run {
            check("run.weak", r.weak)?;
            check("run.strong", r.strong)?;
        }
        if let Some(s) = &self.strategies {
            check("strategies.weak", s.weak)?;
            check("strategies.strong", s.strong)?;
            if !ladder.specs()[s.strong].is_mlp() {
                return bad("strategies.strong", "must be an mlp rung".into());
            }
        }
        if let Some(b) = &self.bootstrap {
            if b.chain.len() < 2 {
                return bad("bootstrap.chain", "needs at least two rungs".into());
            }
            for &i in &b.chain {
                check("bootstrap.chain", i)?;
            }
            b.intermediate_loss
                .validate()
                .map_err(|e| CliError::Config(format!("bootstrap.intermediate_loss: {e}")))?;
        }
        if let Some(e) = &self.e2h {
            check("e2h.strong", e.strong)?;
            for &c in e.cutoffs.iter().flatten() {
                check("e2h.cutoffs", c)?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the parsed config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Task for seed `s`: the configured task with its seed shifted by `s`.
    pub fn bundle_for(&self, seed: u64) -> Result<DatasetBundle, CliError> {
        let mut task = self.task.clone();
        task.seed = task.seed.wrapping_add(seed);
        let b = generate_task(&task)?;
        Ok(if self.rebalance { rebalance(&b)? } else { b })
    }

    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

/// Resolved invocation shared by all commands.
pub struct Session {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub parallel: usize,
    pub seeds: Vec<u64>,
    pub hash: String,
}

impl Session {
    pub fn new(
        config: ExperimentConfig,
        out: Option<PathBuf>,
        parallel: Option<usize>,
        seed_offset: u64,
    ) -> Result<Self, CliError> {
        let out = out
            .or_else(|| config.output.clone())
            .ok_or_else(|| CliError::Config("output: no --out given and no output key".into()))?;
        let parallel = parallel.or(config.parallel).unwrap_or(1);
        if parallel == 0 {
            return Err(CliError::Config("parallel: must be at least 1".into()));
        }
        fs::create_dir_all(&out)?;
        let seeds = config.seeds.iter().map(|s| s.wrapping_add(seed_offset)).collect();
        let hash = config.hash();
        Ok(Self {
            config,
            out,
            parallel,
            seeds,
            hash,
        })
    }

    fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.parallel)
            .build()
            .map_err(|e| CliError::Config(format!("parallel: {e}")))
    }

    fn stamp_columns(&self) -> [(&str, &str); 2] {
        [("config_hash", self.hash.as_str()), ("tool_version", TOOL_VERSION)]
    }

    fn stamp(&self, records: &mut [RunRecord]) {
        for r in records {
            r.config_hash = self.hash.clone();
            r.tool_version = TOOL_VERSION.into();
        }
    }

    /// Appends records (canonically sorted) to runs.jsonl and their curves to curves.csv.
    pub fn persist(&self, mut records: Vec<RunRecord>) -> Result<(), CliError> {
        records.sort_by_key(RunRecord::sort_key);
        self.stamp(&mut records);
        training::append_jsonl(&self.out.join("runs.jsonl"), &records)?;
        let path = self.out.join("curves.csv");
        let fresh = !path.exists();
        let file = fs::OpenOptions::new().create(true).append(true).open(&path)?;
        let mut w = csv::Writer::from_writer(file);
        if fresh {
            w.write_record(["run_id", "step", "metric", "value", "config_hash", "tool_version"])?;
        }
        for r in &records {
            for (step, metric, value) in r.curves.long_rows() {
                w.write_record([
                    r.run_id.as_str(),
                    &step.to_string(),
                    metric,
                    &value.to_string(),
                    &self.hash,
                    TOOL_VERSION,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    fn write_manifest(&self, command: &str) -> Result<(), CliError> {
        let manifest = serde_json::json!({
            "command": command,
            "config_hash": self.hash,
            "tool_version": TOOL_VERSION,
            "seeds": self.seeds,
            "config": self.config,
        });
        fs::write(
            self.out.join(format!("manifest_{command}.json")),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(())
    }
}

fn collect_results(results: Vec<(String, Result<Vec<RunRecord>, CliError>)>) -> (Vec<RunRecord>, Vec<String>) {
    let mut ok = vec![];
    let mut failed = vec![];
    for (label, r) in results {
        match r {
            Ok(rs) => ok.extend(rs),
            Err(e) => failed.push(format!("{label}: {e}")),
        }
    }
    (ok, failed)
}

fn finish(
    session: &Session,
    total: usize,
    results: Vec<(String, Result<Vec<RunRecord>, CliError>)>,
) -> Result<Vec<RunRecord>, CliError> {
    let (records, failed) = collect_results(results);
    session.persist(records.clone())?;
    if failed.is_empty() {
        Ok(records)
    } else {
        Err(CliError::PartialFailure {
            failed: failed.len(),
            total,
            details: failed.join("\n"),
        })
    }
}

pub fn cmd_gen(session: &Session) -> Result<Vec<PathBuf>, CliError> {
    session.write_manifest("gen")?;
    let mut written = vec![];
    for &seed in &session.seeds {
        let bundle = session.config.bundle_for(seed)?;
        let csv_path = session.out.join(format!("dataset_s{seed}.csv"));
        let sidecar = session.out.join(format!("dataset_s{seed}.json"));
        bundle.save(&csv_path, &sidecar, &session.stamp_columns())?;
        // stamp the sidecar with the config hash and tool version
        let mut doc: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&sidecar)?).map_err(|e| CliError::Config(e.to_string()))?;
        doc["config_hash"] = session.hash.clone().into();
        doc["tool_version"] = TOOL_VERSION.into();
        fs::write(&sidecar, serde_json::to_string_pretty(&doc).expect("json"))?;
        written.push(csv_path);
    }
    Ok(written)
}

pub fn cmd_run(session: &Session) -> Result<Vec<RunRecord>, CliError> {
    let pair = session
        .config
        .run
        .ok_or_else(|| CliError::Config("run: missing [run] table".into()))?;
    let grid = ExperimentConfig {
        grid: Some(vec![(pair.weak, pair.strong)]),
        ..session.config.clone()
    };
    session.write_manifest("run")?;
    run_grid(session, &grid)
}

pub fn cmd_grid(session: &Session) -> Result<Vec<RunRecord>, CliError> {
    session.write_manifest("grid")?;
    run_grid(session, &session.config)
}

fn run_grid(session: &Session, config: &ExperimentConfig) -> Result<Vec<RunRecord>, CliError> {
    let ladder = config.ladder()?;
    let pairs = config.grid_pairs()?;
    let pool = session.pool()?;
    let per_seed: Vec<(String, Result<Vec<RunRecord>, CliError>)> = pool.install(|| {
        session
            .seeds
            .par_iter()
            .map(|&seed| {
                let result = (|| -> Result<Vec<RunRecord>, CliError> {
                    let bundle = config.bundle_for(seed)?;
                    let cfg = config.train_for(seed);
                    let mut weak_idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
                    weak_idx.sort_unstable();
                    weak_idx.dedup();
                    let mut strong_idx: Vec<usize> = pairs.iter().map(|p| p.1).collect();
                    strong_idx.sort_unstable();
                    strong_idx.dedup();
                    let weak: Vec<_> = weak_idx
                        .par_iter()
                        .map(|&i| training::weak_supervisor(&ladder.specs()[i], &bundle, &cfg).map(|w| (i, w)))
                        .collect::<Result<_, _>>()?;
                    let ceilings: Vec<_> = strong_idx
                        .par_iter()
                        .map(|&i| training::ceiling_accuracy(&ladder.specs()[i], &bundle, &cfg).map(|c| (i, c)))
                        .collect::<Result<_, _>>()?;
                    let jobs: Vec<(usize, usize, &LossSpec)> = pairs
                        .iter()
                        .flat_map(|&(w, s)| config.losses.iter().map(move |l| (w, s, l)))
                        .collect();
                    jobs.par_iter()
                        .map(|&(w, s, loss)| {
                            let sup = &weak.iter().find(|x| x.0 == w).expect("weak trained").1;
                            let ceil = ceilings.iter().find(|x| x.0 == s).expect("ceiling trained").1;
                            let cfg = cfg.clone().with_loss(loss.clone());
                            Ok(training::run_w2s_with(sup, ceil, &ladder.specs()[s], &bundle, &cfg)?)
                        })
                        .collect()
                })();
                (format!("seed {seed}"), result)
            })
            .collect()
    });
    finish(session, session.seeds.len(), per_seed)
}

pub fn cmd_bootstrap(session: &Session) -> Result<Vec<RunRecord>, CliError> {
    let boot = session
        .config
        .bootstrap
        .clone()
        .ok_or_else(|| CliError::Config("bootstrap: missing [bootstrap] table".into()))?;
    session.write_manifest("bootstrap")?;
    let ladder = session.config.ladder()?;
    let specs: Vec<ModelSpec> = boot.chain.iter().map(|&i| ladder.specs()[i].clone()).collect();
    let (specs, intermediate) = (&specs, &boot.intermediate_loss);
    let pool = session.pool()?;
    let results = pool.install(|| {
        session
            .seeds
            .par_iter()
            .flat_map(|&seed| {
                session.config.losses.par_iter().map(move |loss| {
                    let r = (|| -> Result<Vec<RunRecord>, CliError> {
                        let bundle = session.config.bundle_for(seed)?;
                        let cfg = session.config.train_for(seed).with_loss(loss.clone());
                        Ok(training::bootstrap_chain(specs, &bundle, &cfg, intermediate)?)
                    })();
                    (format!("seed {seed} loss {}", loss.variant.as_str()), r)
                })
            })
            .collect()
    });
    finish(session, session.seeds.len() * session.config.losses.len(), results)
}

type SeedSweep = (u64, easy_to_hard::DifficultyAssignment, Vec<easy_to_hard::CutoffResult>);

pub fn cmd_e2h(session: &Session) -> Result<(), CliError> {
    let e2h = session
        .config
        .e2h
        .clone()
        .ok_or_else(|| CliError::Config("e2h: missing [e2h] table".into()))?;
    session.write_manifest("e2h")?;
    let ladder = session.config.ladder()?;
    let strong = ladder.specs()[e2h.strong].clone();
    let cutoffs: Vec<Option<f64>> = match &e2h.cutoffs {
        Some(idx) => idx.iter().map(|&i| Some(ladder.specs()[i].compute_proxy())).collect(),
        None => ladder
            .specs()
            .iter()
            .map(|s| Some(s.compute_proxy()))
            .chain([None])
            .collect(),
    };
    let pool = session.pool()?;
    let results: Vec<Result<SeedSweep, CliError>> = pool.install(|| {
        session
            .seeds
            .par_iter()
            .map(|&seed| {
                let bundle = session.config.bundle_for(seed)?;
                let cfg = session.config.train_for(seed);
                let assignment = easy_to_hard::assign_difficulty(&bundle, &ladder, &cfg, e2h.assign)?;
                let sweep = easy_to_hard::cutoff_sweep(&bundle, &assignment, &cutoffs, &strong, &cfg)?;
                Ok((seed, assignment, sweep))
            })
            .collect()
    });
    let mut w = csv::Writer::from_path(session.out.join("e2h_cutoffs.csv"))?;
    w.write_record([
        "seed",
        "cutoff",
        "train_size",
        "full_test_acc",
        "hard_test_acc",
        "hard_test_count",
        "config_hash",
        "tool_version",
    ])?;
    let mut failures = vec![];
    for r in results {
        match r {
            Ok((seed, assignment, sweep)) => {
                assignment.write_csv(
                    &session.out.join(format!("difficulty_s{seed}.csv")),
                    &session.stamp_columns(),
                )?;
                for c in sweep {
                    w.write_record([
                        seed.to_string(),
                        c.cutoff.map_or_else(|| "inf".into(), |v| v.to_string()),
                        c.train_size.to_string(),
                        c.full_test_acc.to_string(),
                        c.hard_test_acc.map_or_else(String::new, |v| v.to_string()),
                        c.hard_test_count.to_string(),
                        session.hash.clone(),
                        TOOL_VERSION.into(),
                    ])?;
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    w.flush()?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::PartialFailure {
            failed: failures.len(),
            total: session.seeds.len(),
            details: failures.join("\n"),
        })
    }
}

pub fn cmd_strategies(session: &Session) -> Result<Vec<(u64, training::StrategyAccuracies)>, CliError> {
    let pair = session
        .config
        .strategies
        .ok_or_else(|| CliError::Config("strategies: missing [strategies] table".into()))?;
    session.write_manifest("strategies")?;
    let ladder = session.config.ladder()?;
    let (weak, strong) = (&ladder.specs()[pair.weak], &ladder.specs()[pair.strong]);
    let pool = session.pool()?;
    let results: Vec<Result<(u64, training::StrategyAccuracies), CliError>> = pool.install(|| {
        session
            .seeds
            .par_iter()
            .map(|&seed| {
                let bundle = session.config.bundle_for(seed)?;
                let acc = training::strategy_compare(weak, strong, &bundle, &session.config.train_for(seed))?;
                Ok((seed, acc))
            })
            .collect()
    });
    let results: Vec<(u64, training::StrategyAccuracies)> = results.into_iter().collect::<Result<_, _>>()?;
    let mut w = csv::Writer::from_path(session.out.join("strategies.csv"))?;
    w.write_record(["seed", "strategy", "test_acc", "config_hash", "tool_version"])?;
    for (seed, a) in &results {
        for (name, v) in [
            ("weak", a.weak),
            ("lp(weak)", a.lp_weak),
            ("lp(gt)", a.lp_gt),
            ("ft(weak)", a.ft_weak),
            ("ft(weak)+lp(gt)", a.ft_weak_lp_gt),
            ("ft(gt)", a.ft_gt),
        ] {
            w.write_record([
                seed.to_string(),
                name.into(),
                v.to_string(),
                session.hash.clone(),
                TOOL_VERSION.into(),
            ])?;
        }
    }
    w.flush()?;
    Ok(results)
}

/// Summaries of every record in `dir/runs.jsonl`.
pub fn cmd_report(dir: &Path, config_hash: &str) -> Result<Vec<metrics::GridSummary>, CliError> {
    let records = training::read_jsonl(&dir.join("runs.jsonl"))?;
    if records.is_empty() {
        return Err(CliError::Config("runs.jsonl holds no records".into()));
    }
    let summaries = metrics::summarize_grid(&records);
    metrics::write_reports(dir, &summaries, config_hash, TOOL_VERSION)?;
    Ok(summaries)
}

/// Entry point used by the binary.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.command == Command::Report && cli.config.is_none() {
        let dir = cli
            .out
            .ok_or_else(|| CliError::Config("report needs --out or --config".into()))?;
        cmd_report(&dir, "")?;
        return Ok(());
    }
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let text =
        fs::read_to_string(&path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config = ExperimentConfig::from_toml(&text)?;
    let session = Session::new(config, cli.out, cli.parallel, cli.seed_offset)?;
    match cli.command {
        Command::Gen => cmd_gen(&session).map(|_| ()),
        Command::Run => cmd_run(&session).map(|_| ()),
        Command::Grid => cmd_grid(&session).map(|_| ()),
        Command::Bootstrap => cmd_bootstrap(&session).map(|_| ()),
        Command::E2h => cmd_e2h(&session),
        Command::Strategies => cmd_strategies(&session).map(|_| ()),
        Command::Report => cmd_report(&session.out, &session.hash).map(|_| ()),
    }
}
