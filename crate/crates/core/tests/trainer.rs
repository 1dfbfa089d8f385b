use grpo_rank::oracle::{Oracle, OracleError, OracleRequest, OracleVerdict};
use grpo_rank::optim::OptimizerConfig;
use grpo_rank::trainer::{Execution, TrainError};
use grpo_rank::{
    train, train_baseline, Algorithm, ExactOracle, NoisyOracle, Policy, StepMetrics, Task, TaskKind, TaskSpec,
    TokenSequence, TrainConfig, Vocab,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn task() -> Task {
    Task::new(TaskSpec {
        kind: TaskKind::TargetMatch,
        prompt_count: 2,
        ..TaskSpec::default()
    })
    .unwrap()
}

fn policy(task: &Task) -> Policy {
    let mut p = Policy::new(*task.vocab(), 2, task.prompt_count(), true).unwrap();
    p.randomize(0.3, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    p
}

fn short(algorithm: Algorithm) -> TrainConfig {
    TrainConfig {
        algorithm,
        epochs: 3,
        steps_per_epoch: 10,
        ..TrainConfig::default()
    }
}

fn run(cfg: &TrainConfig, exec: Execution) -> (Policy, Vec<StepMetrics>) {
    let task = task();
    let mut oracle = ExactOracle::new(&task);
    let mut metrics = Vec::new();
    let out = train(cfg, &task, policy(&task), &mut oracle, &mut metrics, exec).unwrap();
    (out.policy, metrics)
}

/// Records every request it forwards.
struct Recording<O> {
    inner: O,
    seen: Vec<Vec<TokenSequence>>,
}

impl<O: Oracle> Oracle for Recording<O> {
    fn rank(&mut self, request: &OracleRequest) -> Result<OracleVerdict, OracleError> {
        self.seen.push(request.candidates.clone());
        self.inner.rank(request)
    }
}

struct Broken {
    alive: bool,
}

impl Oracle for Broken {
    fn rank(&mut self, _: &OracleRequest) -> Result<OracleVerdict, OracleError> {
        Err(OracleError::MalformedVerdict {
            reason: "test".into(),
            raw: "{}".into(),
        })
    }

    fn is_alive(&self) -> bool {
        self.alive
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    for (algorithm, opt) in [
        (Algorithm::GrpoRank, OptimizerConfig::Sgd { lr: 0.0 }),
        (Algorithm::GrpoRank, OptimizerConfig::Adam { lr: 0.0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }),
        (Algorithm::Grpo, OptimizerConfig::Sgd { lr: 0.0 }),
        (Algorithm::Ppo, OptimizerConfig::Sgd { lr: 0.0 }),
    ] {
        let cfg = TrainConfig { optimizer: opt, ..short(algorithm) };
        let task = task();
        let (trained, _) = run(&cfg, Execution::SingleThread);
        assert_eq!(trained.params(), policy(&task).params(), "{algorithm}");
    }
}

#[test]
fn identical_seeds_reproduce_metrics_bit_for_bit() {
    for algorithm in [Algorithm::GrpoRank, Algorithm::Grpo, Algorithm::Ppo] {
        let cfg = short(algorithm);
        let (p1, m1) = run(&cfg, Execution::SingleThread);
        let (p2, m2) = run(&cfg, Execution::SingleThread);
        assert_eq!(m1, m2);
        assert_eq!(p1, p2);
    }
}

#[test]
fn parallel_execution_matches_single_thread() {
    for algorithm in [Algorithm::GrpoRank, Algorithm::Ppo] {
        let cfg = TrainConfig { batch_size: 8, ..short(algorithm) };
        let (p1, m1) = run(&cfg, Execution::SingleThread);
        let (p2, m2) = run(&cfg, Execution::Parallel);
        assert_eq!(m1, m2);
        assert_eq!(p1.params(), p2.params());
    }
}

#[test]
fn ratios_are_one_right_after_each_snapshot() {
    let (_, metrics) = run(&short(Algorithm::GrpoRank), Execution::SingleThread);
    assert_eq!(metrics.len(), 30);
    for m in &metrics {
        if m.step % 10 == 0 {
            assert_eq!(m.objective.kl_term, 0.0, "step {}", m.step);
            assert_eq!(m.objective.clip_fraction, 0.0);
            // rank advantages sum to zero, so the snapshot surrogate vanishes
            assert!(m.objective.surrogate.abs() < 1e-12);
        }
    }
    assert!(metrics.iter().any(|m| m.objective.kl_term > 0.0));
}

#[test]
fn one_record_per_step_with_monotone_indices() {
    let (_, metrics) = run(&short(Algorithm::Grpo), Execution::SingleThread);
    for (i, m) in metrics.iter().enumerate() {
        assert_eq!(m.step, i);
        assert_eq!(m.epoch, i / 10);
        assert_eq!(m.kept_groups + m.dropped_groups, 4);
    }
}

#[test]
fn oracle_noise_seed_does_not_touch_sampling() {
    let task = task();
    let cfg = short(Algorithm::GrpoRank);
    let mut first = Vec::new();
    for seed in [1, 2] {
        let noisy = NoisyOracle::new(ExactOracle::new(&task), 0.5, seed).unwrap();
        let mut rec = Recording { inner: noisy, seen: Vec::new() };
        let mut sink: Vec<StepMetrics> = Vec::new();
        train(&cfg, &task, policy(&task), &mut rec, &mut sink, Execution::SingleThread).unwrap();
        first.push(rec.seen[..cfg.batch_size].to_vec());
    }
    assert_eq!(first[0], first[1]);
}

#[test]
fn failing_verdicts_drop_groups_without_aborting() {
    let task = task();
    let cfg = short(Algorithm::GrpoRank);
    let mut sink: Vec<StepMetrics> = Vec::new();
    let out = train(&cfg, &task, policy(&task), &mut Broken { alive: true }, &mut sink, Execution::SingleThread).unwrap();
    assert_eq!(out.dropped_groups, 30 * 4);
    assert!(sink.iter().all(|m| m.dropped_groups == 4 && m.kept_groups == 0));
    assert_eq!(out.policy.params(), policy(&task).params());
}

#[test]
fn dead_oracle_aborts_the_run() {
    let task = task();
    let mut sink: Vec<StepMetrics> = Vec::new();
    let err = train(
        &short(Algorithm::GrpoRank),
        &task,
        policy(&task),
        &mut Broken { alive: false },
        &mut sink,
        Execution::SingleThread,
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::Oracle { step: 0, .. }));
    assert!(sink.is_empty());
}

#[test]
fn exploding_updates_abort_instead_of_writing_garbage() {
    let task = task();
    // returns near f64::MAX overflow the surrogate or the update
    let cfg = TrainConfig {
        optimizer: OptimizerConfig::Sgd { lr: 1e300 },
        reward_scale: f64::MAX,
        ..short(Algorithm::Ppo)
    };
    let mut sink: Vec<StepMetrics> = Vec::new();
    let err = train_baseline(&cfg, &task, policy(&task), &mut sink, Execution::SingleThread).unwrap_err();
    match err {
        TrainError::NonFiniteGradient(diag) => {
            assert!(diag.parameter_index.is_some());
            assert_eq!(diag.step, sink.len());
        }
        TrainError::Numeric { .. } => {}
        other => panic!("unexpected {other}"),
    }
    assert!(sink.len() < 30);
}

#[test]
fn non_finite_initial_policy_is_rejected() {
    let task = task();
    let mut p = policy(&task);
    p.params_mut()[3] = f64::NAN;
    let mut sink: Vec<StepMetrics> = Vec::new();
    assert!(matches!(
        train_baseline(&short(Algorithm::Grpo), &task, p, &mut sink, Execution::SingleThread),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn baseline_entry_point_rejects_rank_configs() {
    let task = task();
    let mut sink: Vec<StepMetrics> = Vec::new();
    assert!(matches!(
        train_baseline(&short(Algorithm::GrpoRank), &task, policy(&task), &mut sink, Execution::SingleThread),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn mismatched_policy_is_rejected() {
    let task = task();
    let wrong = Policy::new(Vocab::new(5, 0).unwrap(), 1, 2, false).unwrap();
    let mut sink: Vec<StepMetrics> = Vec::new();
    let mut oracle = ExactOracle::new(&task);
    assert!(matches!(
        train(&short(Algorithm::GrpoRank), &task, wrong, &mut oracle, &mut sink, Execution::SingleThread),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn ppo_learns_value_baselines() {
    let task = task();
    let cfg = TrainConfig { epochs: 10, ..short(Algorithm::Ppo) };
    let mut sink: Vec<StepMetrics> = Vec::new();
    let out = train_baseline(&cfg, &task, policy(&task), &mut sink, Execution::SingleThread).unwrap();
    let values = out.values.unwrap();
    // returns lie in [-1, 0]; baselines start at 0 and move toward them
    assert!(values.0.iter().all(|v| (-1.0..0.0).contains(v)), "{values:?}");
    assert!(sink.last().unwrap().value_loss < sink[0].value_loss);
}
