use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use grpo_rank::checkpoint::{read_policy, write_policy};
use grpo_rank::config::{ConfigError, ExperimentConfig, OracleSpec};
use grpo_rank::trainer::{Execution, JsonlSink, MetricsSink, TrainError};
use grpo_rank::{evaluate, EvalReport, StepMetrics};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments.
    Config(String),
    /// Anything that fails after the run started.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config: {msg}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub struct RunOptions {
    pub single_thread: bool,
    pub seed_override: Option<u64>,
    pub oracle_cmd: Option<String>,
}

#[derive(Serialize)]
struct Seeds {
    task: u64,
    policy_init: u64,
    sampling: u64,
    oracle_noise: Option<u64>,
    eval: u64,
}

#[derive(Serialize)]
struct RunHeader<'a> {
    version: &'static str,
    seeds: Seeds,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct TrainReport {
    steps: usize,
    dropped_groups: usize,
    initial: EvalReport,
    #[serde(rename = "final")]
    final_: EvalReport,
    /// PPO value baselines per prompt class.
    #[serde(skip_serializing_if = "Option::is_none")]
    values: Option<Vec<f64>>,
}

/// Forwards every record to the JSONL stream and keeps a copy for the CSV
/// summary.
struct Recorder<W: Write> {
    jsonl: JsonlSink<W>,
    kept: Vec<StepMetrics>,
}

impl<W: Write> MetricsSink for Recorder<W> {
    fn record(&mut self, m: &StepMetrics) -> io::Result<()> {
        self.kept.push(m.clone());
        self.jsonl.record(m)
    }
}

fn load(path: &Path, seed_override: Option<u64>, oracle_cmd: Option<&str>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed_override {
        cfg = cfg.with_seed(seed);
    }
    if let Some(cmd) = oracle_cmd {
        let timeout_ms = match cfg.oracle {
            OracleSpec::External { timeout_ms, .. } => timeout_ms,
            _ => 5000,
        };
        cfg.oracle = OracleSpec::External {
            command: cmd.split_whitespace().map(String::from).collect(),
            timeout_ms,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn eval_report(cfg: &ExperimentConfig, policy: &grpo_rank::Policy, task: &grpo_rank::Task) -> anyhow::Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.output.eval_seed);
    let g = cfg.training.resolved_group_size().max(2);
    Ok(evaluate(policy, task, cfg.output.eval_samples, g, cfg.training.rank_by, &mut rng)?)
}

fn execution(single_thread: bool) -> Execution {
    if single_thread {
        Execution::SingleThread
    } else {
        Execution::Parallel
    }
}

fn train_error(e: TrainError, out: &Path) -> CliError {
    if let TrainError::NonFiniteGradient(diag) = &e {
        let path = out.join("diagnostic.json");
        if let Err(w) = write_json(&path, diag) {
            eprintln!("warning: could not write {}: {w:#}", path.display());
        } else {
            eprintln!("diagnostic dump written to {}", path.display());
        }
    }
    match e {
        TrainError::Config(inner) => CliError::Config(inner.to_string()),
        other => CliError::Runtime(other.into()),
    }
}

pub fn train(config: &Path, out: &Path, opts: &RunOptions) -> Result<(), CliError> {
    let cfg = load(config, opts.seed_override, opts.oracle_cmd.as_deref())?;
    let task = cfg.build_task()?;
    let init = cfg.build_policy().map_err(CliError::Config)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("resolved_config.json"), &cfg)?;

    let mut oracle = cfg.build_oracle(&task).context("starting oracle")?;
    let initial = eval_report(&cfg, &init, &task)?;

    let header = RunHeader {
        version: env!("CARGO_PKG_VERSION"),
        seeds: Seeds {
            task: cfg.task.seed,
            policy_init: cfg.policy.init_seed,
            sampling: cfg.training.sampling_seed,
            oracle_noise: match cfg.oracle {
                OracleSpec::Noisy { seed, .. } => Some(seed),
                _ => None,
            },
            eval: cfg.output.eval_seed,
        },
        config: &cfg,
    };
    let file = File::create(out.join("metrics.jsonl")).context("creating metrics.jsonl")?;
    let mut recorder = Recorder {
        jsonl: JsonlSink::new(BufWriter::new(file), &header)?,
        kept: Vec::new(),
    };
    let outcome = grpo_rank::train(
        &cfg.training,
        &task,
        init,
        oracle.as_mut(),
        &mut recorder,
        execution(opts.single_thread),
    )
    .map_err(|e| train_error(e, out))?;
    drop(oracle);
    recorder.jsonl.into_inner().flush()?;

    let ckpt = BufWriter::new(File::create(out.join("policy.ckpt")).context("creating policy.ckpt")?);
    write_policy(&outcome.policy, ckpt).context("writing checkpoint")?;
    let final_ = eval_report(&cfg, &outcome.policy, &task)?;
    write_json(
        &out.join("eval_report.json"),
        &TrainReport {
            steps: outcome.steps,
            dropped_groups: outcome.dropped_groups,
            initial,
            final_,
            values: outcome.values.map(|v| v.0),
        },
    )?;
    if cfg.output.csv {
        write_summary(&out.join("summary.csv"), &recorder.kept)?;
    }
    eprintln!(
        "trained {} steps ({} groups dropped); outputs in {}",
        outcome.steps,
        outcome.dropped_groups,
        out.display()
    );
    Ok(())
}

fn write_summary(path: &Path, metrics: &[StepMetrics]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "mean_true_score", "rank_agreement", "kl", "clip_fraction"])?;
    for m in metrics {
        w.write_record([
            m.step.to_string(),
            m.mean_true_score.to_string(),
            m.rank_agreement.to_string(),
            m.objective.kl_term.to_string(),
            m.objective.clip_fraction.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn eval(config: &Path, checkpoint: &Path, out: Option<&Path>, seed_override: Option<u64>) -> Result<(), CliError> {
    let mut cfg = load(config, None, None)?;
    if let Some(seed) = seed_override {
        cfg.output.eval_seed = seed;
    }
    let task = cfg.build_task()?;
    let file = File::open(checkpoint).with_context(|| format!("opening {}", checkpoint.display()))?;
    let policy = read_policy(io::BufReader::new(file)).context("reading checkpoint")?;
    if policy.vocab() != task.vocab() || policy.prompt_count() != task.prompt_count() {
        return Err(CliError::Config("checkpoint does not match the configured task".into()));
    }
    let report = eval_report(&cfg, &policy, &task)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_json(&dir.join("eval_report.json"), &report)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?),
    }
    Ok(())
}

#[derive(Serialize)]
struct CompareRun {
    label: String,
    algorithm: String,
    seed: u64,
    initial_sampled_score: f64,
    final_sampled_score: f64,
    final_greedy_score: f64,
    initial_rank_agreement: f64,
    final_rank_agreement: f64,
    dropped_groups: usize,
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

pub fn compare(configs: &[PathBuf], out: &Path, seeds: &[u64], single_thread: bool) -> Result<(), CliError> {
    if seeds.is_empty() {
        return Err(CliError::Config("--seeds must name at least one seed".into()));
    }
    let loaded: Vec<(String, ExperimentConfig)> = configs
        .iter()
        .map(|p| {
            let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            load(p, None, None).map(|c| (label, c))
        })
        .collect::<Result<_, _>>()?;
    fs::create_dir_all(out)?;

    let mut curves = csv::Writer::from_path(out.join("compare.csv")).context("creating compare.csv")?;
    curves.write_record([
        "label",
        "algorithm",
        "step",
        "seeds",
        "mean_true_score_mean",
        "mean_true_score_std",
        "rank_agreement_mean",
        "rank_agreement_std",
    ])?;
    let mut runs = Vec::new();
    for (label, base) in &loaded {
        let mut per_seed: Vec<Vec<StepMetrics>> = Vec::new();
        for &seed in seeds {
            let cfg = base.clone().with_seed(seed);
            let task = cfg.build_task()?;
            let init = cfg.build_policy().map_err(CliError::Config)?;
            let initial = eval_report(&cfg, &init, &task)?;
            let mut oracle = cfg.build_oracle(&task).context("starting oracle")?;
            let mut sink: Vec<StepMetrics> = Vec::new();
            let outcome = grpo_rank::train(&cfg.training, &task, init, oracle.as_mut(), &mut sink, execution(single_thread))
                .map_err(|e| train_error(e, out))?;
            let final_ = eval_report(&cfg, &outcome.policy, &task)?;
            eprintln!(
                "{label} seed {seed}: sampled score {:.4} -> {:.4}",
                initial.sampled_mean_score, final_.sampled_mean_score
            );
            runs.push(CompareRun {
                label: label.clone(),
                algorithm: cfg.training.algorithm.to_string(),
                seed,
                initial_sampled_score: initial.sampled_mean_score,
                final_sampled_score: final_.sampled_mean_score,
                final_greedy_score: final_.greedy_mean_score,
                initial_rank_agreement: initial.rank_agreement,
                final_rank_agreement: final_.rank_agreement,
                dropped_groups: outcome.dropped_groups,
            });
            per_seed.push(sink);
        }
        let steps = per_seed.iter().map(Vec::len).min().unwrap_or(0);
        for s in 0..steps {
            let score: Vec<f64> = per_seed.iter().map(|m| m[s].mean_true_score).collect();
            let agree: Vec<f64> = per_seed.iter().map(|m| m[s].rank_agreement).collect();
            let (sm, ss) = mean_std(&score);
            let (am, as_) = mean_std(&agree);
            curves.write_record([
                label.clone(),
                base.training.algorithm.to_string(),
                s.to_string(),
                seeds.len().to_string(),
                sm.to_string(),
                ss.to_string(),
                am.to_string(),
                as_.to_string(),
            ])?;
        }
    }
    curves.flush()?;
    write_json(&out.join("compare_runs.json"), &runs)?;
    Ok(())
}
