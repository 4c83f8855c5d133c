//! Flat `key = value` experiment configuration with dotted sections.
//!
//! ```text
//! # comment
//! run.strategies = naive, ours
//! run.seeds = 0, 1, 2
//! trainer.lr = 0.02
//! ours.beta = 1.0
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{AdapterSpec, FreezeLevel};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::taskgen::{generate_task_stream, stream_from_files, StreamTemplate, TaskStream};
use crate::trainer::{Strategy, StrategyKind, TrainConfig};

pub const SEED_ENV: &str = "MODALANCHOR_SEED";

/// Pair files standing in for the synthetic stream, one train and eval file per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub train: Vec<PathBuf>,
    pub eval: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub stream: StreamTemplate,
    pub n_tasks: usize,
    pub data: Option<DataPaths>,
    pub strategies: Vec<StrategyKind>,
    pub seeds: Vec<u64>,
    pub ewc_lambda: f64,
    pub ours: Strategy,
    pub replay_ratio: f64,
    pub replay_fraction: f64,
    pub weight_decay: f64,
    /// Fill `wallclock_ratio` in the metrics CSV; off keeps the file reproducible.
    pub record_wallclock: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let replay = Strategy::new(StrategyKind::Replay);
        Self {
            train: TrainConfig::default(),
            stream: StreamTemplate::default(),
            n_tasks: 4,
            data: None,
            strategies: StrategyKind::ALL.to_vec(),
            seeds: vec![0],
            ewc_lambda: Strategy::new(StrategyKind::EwcStandard).lambda_base,
            ours: Strategy::new(StrategyKind::Ours),
            replay_ratio: replay.replay_ratio,
            replay_fraction: replay.replay_fraction,
            weight_decay: Strategy::new(StrategyKind::L2).weight_decay,
            record_wallclock: false,
            out: PathBuf::from("runs"),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse '{v}'"))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got '{v}'")),
    }
}

fn freeze_str(f: FreezeLevel) -> &'static str {
    match f {
        FreezeLevel::None => "none",
        FreezeLevel::Lower => "lower",
        FreezeLevel::AllButAdapters => "all_but_adapters",
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn join_paths(xs: &[PathBuf]) -> String {
    xs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

fn hash16(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl ExperimentConfig {
    /// Parse config text, then apply `overrides` in order.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut bad = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v.trim()) {
                        bad.push(format!("line {}: {e}", i + 1));
                    }
                }
                None => bad.push(format!("line {}: expected key = value, got '{line}'", i + 1)),
            }
        }
        for (k, v) in overrides {
            if let Err(e) = cfg.set(k.trim(), v.trim()) {
                bad.push(format!("override: {e}"));
            }
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, overrides)
    }

    /// Replace the seed list with `MODALANCHOR_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(vec![format!("{SEED_ENV}: expected an integer, got '{v}'")]))?;
            self.seeds = vec![seed];
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "run.strategies" => {
                self.strategies = v
                    .split(',')
                    .map(str::trim)
                    .filter(|x| !x.is_empty())
                    .map(|x| x.parse().map_err(|_| format!("run.strategies: unknown strategy '{x}'")))
                    .collect::<std::result::Result<_, _>>()?
            }
            "run.seeds" => self.seeds = parse_list(key, v)?,
            "run.out" => self.out = PathBuf::from(v),
            "run.record_wallclock" => self.record_wallclock = parse_bool(key, v)?,
            "model.d_v" => self.train.model.d_v = parse_num(key, v)?,
            "model.vocab" => self.train.model.vocab = parse_num(key, v)?,
            "model.max_len" => self.train.model.max_len = parse_num(key, v)?,
            "model.d_h" => self.train.model.d_h = parse_num(key, v)?,
            "model.d_e" => self.train.model.d_e = parse_num(key, v)?,
            "model.temperature" => self.train.model.temperature = parse_num(key, v)?,
            "stream.n_tasks" => self.n_tasks = parse_num(key, v)?,
            "stream.n_train" => self.stream.n_train = parse_list(key, v)?,
            "stream.n_eval" => self.stream.n_eval = parse_num(key, v)?,
            "stream.n_concepts" => self.stream.n_concepts = parse_num(key, v)?,
            "stream.n_attributes" => self.stream.n_attributes = parse_num(key, v)?,
            "stream.attrs_per_pair" => self.stream.attrs_per_pair = parse_num(key, v)?,
            "stream.attr_scale" => self.stream.attr_scale = parse_num(key, v)?,
            "stream.noise" => self.stream.noise = parse_num(key, v)?,
            "stream.rotation" => self.stream.rotation = parse_num(key, v)?,
            "stream.token_offset" => self.stream.token_offset = parse_num(key, v)?,
            "stream.band_width" => self.stream.band_width = parse_num(key, v)?,
            "stream.epsilon" => self.stream.epsilon = parse_num(key, v)?,
            "data.train" | "data.eval" => {
                let paths: Vec<PathBuf> = v
                    .split(',')
                    .map(str::trim)
                    .filter(|x| !x.is_empty())
                    .map(PathBuf::from)
                    .collect();
                let d = self.data.get_or_insert(DataPaths {
                    train: Vec::new(),
                    eval: Vec::new(),
                });
                if key == "data.train" {
                    d.train = paths;
                } else {
                    d.eval = paths;
                }
            }
            "trainer.epochs" => self.train.epochs = parse_num(key, v)?,
            "trainer.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "trainer.lr" => self.train.lr = parse_num(key, v)?,
            "trainer.n_fisher" => self.train.n_fisher = parse_num(key, v)?,
            "trainer.probe_size" => self.train.probe_size = parse_num(key, v)?,
            "trainer.eval_batch" => self.train.eval_batch = parse_num(key, v)?,
            "ewc_standard.lambda_base" => self.ewc_lambda = parse_num(key, v)?,
            "ours.lambda_base" => self.ours.lambda_base = parse_num(key, v)?,
            "ours.beta" => self.ours.beta = parse_num(key, v)?,
            "ours.probe_window" => self.ours.probe_window = parse_num(key, v)?,
            "ours.freeze" => self.ours.freeze = v.parse().map_err(|e: Error| format!("{key}: {e}"))?,
            "ours.adapters" => {
                if parse_bool(key, v)? {
                    self.ours.adapters.get_or_insert_with(AdapterSpec::default);
                } else {
                    self.ours.adapters = None;
                }
            }
            "ours.adapter_rank" => {
                self.ours.adapters.get_or_insert_with(AdapterSpec::default).rank = parse_num(key, v)?
            }
            "ours.adapter_alpha" => {
                self.ours.adapters.get_or_insert_with(AdapterSpec::default).alpha = parse_num(key, v)?
            }
            "ours.adapter_targets" => {
                self.ours.adapters.get_or_insert_with(AdapterSpec::default).targets = v
                    .split(',')
                    .map(str::trim)
                    .filter(|x| !x.is_empty())
                    .map(String::from)
                    .collect()
            }
            "replay.ratio" => self.replay_ratio = parse_num(key, v)?,
            "replay.fraction" => self.replay_fraction = parse_num(key, v)?,
            "l2.weight_decay" => self.weight_decay = parse_num(key, v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Every setting as sorted `key=value` pairs; parsing them back gives the same config.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let m = &self.train.model;
        let s = &self.stream;
        let t = &self.train;
        let o = &self.ours;
        let mut p = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            p.insert(k.to_string(), v);
        };
        put("run.strategies", join(&self.strategies));
        put("run.seeds", join(&self.seeds));
        put("run.out", self.out.display().to_string());
        put("run.record_wallclock", self.record_wallclock.to_string());
        put("model.d_v", m.d_v.to_string());
        put("model.vocab", m.vocab.to_string());
        put("model.max_len", m.max_len.to_string());
        put("model.d_h", m.d_h.to_string());
        put("model.d_e", m.d_e.to_string());
        put("model.temperature", m.temperature.to_string());
        put("stream.n_tasks", self.n_tasks.to_string());
        put("stream.n_train", join(&s.n_train));
        put("stream.n_eval", s.n_eval.to_string());
        put("stream.n_concepts", s.n_concepts.to_string());
        put("stream.n_attributes", s.n_attributes.to_string());
        put("stream.attrs_per_pair", s.attrs_per_pair.to_string());
        put("stream.attr_scale", s.attr_scale.to_string());
        put("stream.noise", s.noise.to_string());
        put("stream.rotation", s.rotation.to_string());
        put("stream.token_offset", s.token_offset.to_string());
        put("stream.band_width", s.band_width.to_string());
        put("stream.epsilon", s.epsilon.to_string());
        if let Some(d) = &self.data {
            put("data.train", join_paths(&d.train));
            put("data.eval", join_paths(&d.eval));
        }
        put("trainer.epochs", t.epochs.to_string());
        put("trainer.batch_size", t.batch_size.to_string());
        put("trainer.lr", t.lr.to_string());
        put("trainer.n_fisher", t.n_fisher.to_string());
        put("trainer.probe_size", t.probe_size.to_string());
        put("trainer.eval_batch", t.eval_batch.to_string());
        put("ewc_standard.lambda_base", self.ewc_lambda.to_string());
        put("ours.lambda_base", o.lambda_base.to_string());
        put("ours.beta", o.beta.to_string());
        put("ours.probe_window", o.probe_window.to_string());
        put("ours.freeze", freeze_str(o.freeze).to_string());
        put("ours.adapters", o.adapters.is_some().to_string());
        if let Some(a) = &o.adapters {
            put("ours.adapter_rank", a.rank.to_string());
            put("ours.adapter_alpha", a.alpha.to_string());
            put("ours.adapter_targets", a.targets.join(","));
        }
        put("replay.ratio", self.replay_ratio.to_string());
        put("replay.fraction", self.replay_fraction.to_string());
        put("l2.weight_decay", self.weight_decay.to_string());
        p
    }

    pub fn render(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hash of every setting except the output directory.
    pub fn config_hash(&self) -> String {
        let text: String = self
            .to_pairs()
            .into_iter()
            .filter(|(k, _)| k != "run.out")
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        hash16(&text)
    }

    /// Hash of the `model.*` settings only.
    pub fn model_hash(&self) -> String {
        let text: String = self
            .to_pairs()
            .into_iter()
            .filter(|(k, _)| k.starts_with("model."))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        hash16(&text)
    }

    pub fn strategy(&self, kind: StrategyKind) -> Strategy {
        let mut s = match kind {
            StrategyKind::Ours => self.ours.clone(),
            _ => Strategy::new(kind),
        };
        match kind {
            StrategyKind::EwcStandard => s.lambda_base = self.ewc_lambda,
            StrategyKind::Replay => {
                s.replay_ratio = self.replay_ratio;
                s.replay_fraction = self.replay_fraction;
            }
            StrategyKind::L2 => s.weight_decay = self.weight_decay,
            _ => {}
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut absorb = |r: Result<()>| match r {
            Err(Error::Config(mut m)) => bad.append(&mut m),
            Err(e) => bad.push(e.to_string()),
            Ok(()) => {}
        };
        if self.strategies.is_empty() {
            absorb(Err(Error::Config(vec![
                "run.strategies must name at least one strategy".into(),
            ])));
        }
        if self.seeds.is_empty() {
            absorb(Err(Error::Config(vec!["run.seeds must list at least one seed".into()])));
        }
        absorb(self.train.validate());
        match &self.data {
            Some(d) => {
                if d.train.len() < 2 || d.train.len() != d.eval.len() {
                    absorb(Err(Error::Config(vec![
                        "data.train and data.eval must list the same number (>= 2) of files".into(),
                    ])));
                }
            }
            None => absorb(self.stream.validate(self.n_tasks, &self.train.model)),
        }
        for kind in StrategyKind::ALL {
            absorb(self.strategy(kind).validate());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// The task stream a run with `seed` trains on.
    pub fn build_stream(&self, seed: u64) -> Result<TaskStream> {
        match &self.data {
            Some(d) => stream_from_files(&d.train, &d.eval, self.stream.epsilon, &self.train.model),
            None => generate_task_stream(seed, self.n_tasks, &self.stream, &self.train.model),
        }
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.train.model
    }
}
