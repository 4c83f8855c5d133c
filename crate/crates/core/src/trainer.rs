//! Sequential continual-learning driver for the five strategies.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{attach_adapters, freeze_hierarchy, merge_adapters, AdapterSpec, FreezeLevel};
use crate::autodiff::Graph;
use crate::encoder::{DualEncoder, ModelConfig, Pair};
use crate::error::{Error, Result};
use crate::metrics::{alignment_drift, retrieval_accuracy, Drift};
use crate::params::{sgd_step, BindMode};
use crate::regularize::{
    adaptive_lambdas, combined_loss, estimate_fisher, ConsolidationRecord, EncoderSnapshot, PenaltyWeights,
    ProbeSelection,
};
use crate::taskgen::{mix_batches, update_buffer, ReplayBuffer, Task, TaskStream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Naive,
    EwcStandard,
    Replay,
    L2,
    Ours,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Naive,
        StrategyKind::EwcStandard,
        StrategyKind::Replay,
        StrategyKind::L2,
        StrategyKind::Ours,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Naive => "naive",
            StrategyKind::EwcStandard => "ewc_standard",
            StrategyKind::Replay => "replay",
            StrategyKind::L2 => "l2",
            StrategyKind::Ours => "ours",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown strategy '{s}'")))
    }
}

/// A strategy and the hyperparameters it uses; fields outside the strategy's
/// subset are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub lambda_base: f64,
    pub beta: f64,
    pub replay_ratio: f64,
    pub replay_fraction: f64,
    pub weight_decay: f64,
    pub adapters: Option<AdapterSpec>,
    pub freeze: FreezeLevel,
    /// Probe pairs per snapshot entering the consistency term on each step.
    pub probe_window: usize,
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            lambda_base: if kind == StrategyKind::Ours { 0.3 } else { 1.0 },
            beta: 1.0,
            replay_ratio: 0.3,
            replay_fraction: 0.1,
            weight_decay: 0.01,
            adapters: (kind == StrategyKind::Ours).then(AdapterSpec::default),
            freeze: if kind == StrategyKind::Ours {
                FreezeLevel::AllButAdapters
            } else {
                FreezeLevel::None
            },
            probe_window: 4,
        }
    }

    /// Every regularizer off and no adapters: the trajectory must equal naive's.
    pub fn zeroed(kind: StrategyKind) -> Self {
        Self {
            lambda_base: 0.0,
            beta: 0.0,
            replay_ratio: 0.0,
            weight_decay: 0.0,
            adapters: None,
            freeze: FreezeLevel::None,
            ..Self::new(kind)
        }
    }

    fn uses_records(&self) -> bool {
        matches!(self.kind, StrategyKind::EwcStandard | StrategyKind::Ours)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lambda_base >= 0.0) {
            bad.push(format!("lambda_base must be >= 0, got {}", self.lambda_base));
        }
        if !(self.beta >= 0.0) {
            bad.push(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.replay_ratio) {
            bad.push(format!("replay_ratio must lie in [0, 1], got {}", self.replay_ratio));
        }
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            bad.push(format!(
                "replay_fraction must lie in [0, 1], got {}",
                self.replay_fraction
            ));
        }
        if !(self.weight_decay >= 0.0) {
            bad.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.probe_window == 0 {
            bad.push("probe_window must be >= 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_fisher: usize,
    pub probe_size: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 5,
            batch_size: 32,
            lr: 0.02,
            n_fisher: 200,
            probe_size: 64,
            eval_batch: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            bad.push(format!("lr must be > 0, got {}", self.lr));
        }
        if self.n_fisher == 0 {
            bad.push("n_fisher must be >= 1".into());
        }
        if self.probe_size == 0 {
            bad.push("probe_size must be >= 1".into());
        }
        if self.eval_batch == 0 {
            bad.push("eval_batch must be >= 1".into());
        }
        if let Err(Error::Config(mut m)) = self.model.validate() {
            bad.append(&mut m);
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Everything later tasks may consult about earlier ones.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<ConsolidationRecord>,
    pub snapshots: Vec<EncoderSnapshot>,
    pub buffer: Option<ReplayBuffer>,
}

impl History {
    pub fn new(strategy: &Strategy) -> Self {
        Self {
            records: Vec::new(),
            snapshots: Vec::new(),
            buffer: (strategy.kind == StrategyKind::Replay).then(|| ReplayBuffer::new(strategy.replay_fraction)),
        }
    }

    fn anchor(&self) -> Option<BTreeMap<String, Tensor>> {
        self.records
            .last()
            .map(|r| r.anchor.iter().map(|(k, v)| (k.clone(), v.as_ref().clone())).collect())
    }
}

fn shuffle_rng(seed: u64, task_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + task_index as u64);
    rng
}

fn replay_rng(seed: u64, task_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2000 + task_index as u64);
    rng
}

/// Train on one task with the strategy's objective; returns every batch loss in order.
///
/// The shuffle order depends only on `seed` and `task_index`, so strategies
/// differ only through their objectives.
pub fn train_task(
    model: &mut DualEncoder,
    task: &Task,
    task_index: usize,
    strategy: &Strategy,
    history: &History,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if task.train.is_empty() {
        return Err(Error::Input(format!(
            "task {} has no training pairs",
            task.spec.task_id
        )));
    }
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut rng = shuffle_rng(seed, task_index);
    let mut rrng = replay_rng(seed, task_index);
    let l2_anchor = match strategy.kind {
        StrategyKind::L2 if strategy.weight_decay > 0.0 => history.anchor(),
        _ => None,
    };
    let wd = if l2_anchor.is_some() {
        strategy.weight_decay
    } else {
        0.0
    };
    let (records, snapshots): (&[ConsolidationRecord], &[EncoderSnapshot]) = if strategy.uses_records() {
        let snaps: &[EncoderSnapshot] = if strategy.kind == StrategyKind::Ours {
            &history.snapshots
        } else {
            &[]
        };
        (&history.records, snaps)
    } else {
        (&[], &[])
    };

    let mut log = Vec::with_capacity(config.epochs * task.train.len().div_ceil(config.batch_size));
    let mut step = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let current: Vec<Pair> = chunk.iter().map(|&i| task.train[i].clone()).collect();
            let batch = match &history.buffer {
                Some(buf) if strategy.kind == StrategyKind::Replay => {
                    mix_batches(&current, buf, strategy.replay_ratio, &mut rrng)?
                }
                _ => current,
            };
            let mut g = Graph::new();
            let b = model.bind(&mut g, BindMode::Trainable)?;
            let task_loss = model.batch_loss(&mut g, &b, &batch)?;
            let window = ProbeSelection::Window {
                start: step * strategy.probe_window,
                len: strategy.probe_window,
            };
            let loss = combined_loss(&mut g, model, &b, task_loss, records, snapshots, strategy.beta, window)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss on task {} step {step}: total={value}, task={}",
                    task.spec.task_id,
                    g.value(task_loss).item()
                )));
            }
            let grads = g.backward(loss)?.into_named();
            sgd_step(&mut model.params, &grads, config.lr, wd, l2_anchor.as_ref())?;
            log.push(value);
            step += 1;
        }
    }
    Ok(log)
}

/// Fisher record and encoder snapshot for a finished task.
pub fn consolidate(
    model: &DualEncoder,
    task: &Task,
    strategy: &Strategy,
    config: &TrainConfig,
) -> Result<(ConsolidationRecord, EncoderSnapshot)> {
    if !model.adapters.is_empty() {
        return Err(Error::Contract("merge adapters before consolidating".into()));
    }
    let fisher = estimate_fisher(model, &task.train, config.n_fisher, config.batch_size)?;
    let weights = match strategy.kind {
        StrategyKind::Ours => PenaltyWeights::PerGroup(adaptive_lambdas(&fisher, strategy.lambda_base)),
        StrategyKind::EwcStandard => PenaltyWeights::Whole(strategy.lambda_base),
        _ => PenaltyWeights::Whole(0.0),
    };
    let record = ConsolidationRecord::new(&task.spec.task_id, &model.params, fisher, weights)?;
    let probe: Vec<Pair> = task.train.iter().take(config.probe_size).cloned().collect();
    let snapshot = EncoderSnapshot::capture(model, probe, &task.spec.task_id)?;
    Ok((record, snapshot))
}

/// Output of one strategy over one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub strategy: Strategy,
    pub seed: u64,
    pub task_ids: Vec<String>,
    /// `r[k][i]`: accuracy on task `i` after training task `k`.
    pub r: Vec<Vec<f64>>,
    /// Fresh-model accuracy per task.
    pub baseline: Vec<f64>,
    pub loss_logs: Vec<Vec<f64>>,
    pub history: History,
    /// Seconds of training plus consolidation per task.
    pub wallclock: Vec<f64>,
    pub epsilon_violations: Vec<String>,
    pub drift: Option<Drift>,
    pub model: DualEncoder,
}

/// A run that stopped early, with everything finished before the failure.
#[derive(Debug)]
pub struct RunAbort {
    pub error: Error,
    pub partial: Box<RunArtifacts>,
}

impl From<RunAbort> for Error {
    fn from(a: RunAbort) -> Self {
        a.error
    }
}

/// Train, consolidate and evaluate every task of `stream` in order.
pub fn run_sequence(
    stream: &TaskStream,
    strategy: &Strategy,
    config: &TrainConfig,
    seed: u64,
) -> std::result::Result<RunArtifacts, RunAbort> {
    let mut model_cfg = config.model.clone();
    model_cfg.seed = seed;
    let fail = |error: Error, partial: RunArtifacts| RunAbort {
        error,
        partial: Box::new(partial),
    };
    let model = DualEncoder::new(model_cfg.clone());
    let mut art = RunArtifacts {
        strategy: strategy.clone(),
        seed,
        task_ids: stream.tasks.iter().map(|t| t.spec.task_id.clone()).collect(),
        r: Vec::new(),
        baseline: Vec::new(),
        loss_logs: Vec::new(),
        history: History::new(strategy),
        wallclock: Vec::new(),
        epsilon_violations: Vec::new(),
        drift: None,
        model: match &model {
            Ok(m) => m.clone(),
            Err(_) => DualEncoder {
                config: model_cfg,
                params: Default::default(),
                adapters: Default::default(),
                saved_mask: None,
            },
        },
    };
    if let Err(e) = model {
        return Err(fail(e, art));
    }
    if let Err(e) = strategy.validate().and_then(|_| config.validate()) {
        return Err(fail(e, art));
    }
    if stream.tasks.len() < 2 {
        return Err(fail(Error::Input("a stream needs at least 2 tasks".into()), art));
    }
    match stream
        .tasks
        .iter()
        .map(|t| retrieval_accuracy(&art.model, &t.eval, config.eval_batch).map(|r| r.accuracy))
        .collect()
    {
        Ok(b) => art.baseline = b,
        Err(e) => return Err(fail(e, art)),
    }
    for (k, task) in stream.tasks.iter().enumerate() {
        if let Err(e) = run_one_task(&mut art, stream, k, task, strategy, config, seed) {
            return Err(fail(e, art));
        }
    }
    let last = art.r.last().expect("at least two tasks");
    art.epsilon_violations = stream
        .tasks
        .iter()
        .zip(last)
        .filter(|(t, &acc)| acc < t.spec.epsilon)
        .map(|(t, _)| t.spec.task_id.clone())
        .collect();
    match alignment_drift(
        &art.history.snapshots[0],
        &art.model,
        &stream.tasks[0].eval,
        config.eval_batch,
    ) {
        Ok(d) => art.drift = Some(d),
        Err(e) => return Err(fail(e, art)),
    }
    Ok(art)
}

fn run_one_task(
    art: &mut RunArtifacts,
    stream: &TaskStream,
    k: usize,
    task: &Task,
    strategy: &Strategy,
    config: &TrainConfig,
    seed: u64,
) -> Result<()> {
    let start = Instant::now();
    let model = &mut art.model;
    let with_adapters = k > 0 && strategy.kind == StrategyKind::Ours;
    if with_adapters {
        if let Some(spec) = &strategy.adapters {
            attach_adapters(model, spec, seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))?;
        }
        freeze_hierarchy(model, strategy.freeze)?;
    }
    let log = train_task(model, task, k, strategy, &art.history, config, seed);
    art.loss_logs.push(log.as_ref().map(|l| l.clone()).unwrap_or_default());
    log?;
    if !model.adapters.is_empty() {
        merge_adapters(model)?;
    }
    if with_adapters {
        freeze_hierarchy(model, FreezeLevel::None)?;
    }
    let (record, snapshot) = consolidate(model, task, strategy, config)?;
    art.history.records.push(record);
    art.history.snapshots.push(snapshot);
    if let Some(buf) = art.history.buffer.as_mut() {
        update_buffer(buf, &task.train)?;
    }
    art.wallclock.push(start.elapsed().as_secs_f64());
    let row = stream
        .tasks
        .iter()
        .map(|t| retrieval_accuracy(model, &t.eval, config.eval_batch).map(|r| r.accuracy))
        .collect::<Result<Vec<f64>>>()?;
    art.r.push(row);
    Ok(())
}
