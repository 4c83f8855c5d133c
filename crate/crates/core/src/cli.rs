//! The `run`, `report` and `gradcheck` commands.
//!
//! Layout of a run directory:
//!
//! ```text
//! <out>/config.txt  metrics.csv  timing.csv  summary.md  stream_s<seed>.json
//! <out>/<strategy>_s<seed>/checkpoint.ckpt  metrics.csv  accuracy.csv
//!     constraints.csv  loss_curves.csv  fisher_hist.csv  pca.csv  cosmatrix.csv
//! ```
//!
//! Every CSV starts with a `# config_hash=… model_hash=…` line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::encoder::{images_tensor, similarity_matrix};
use crate::error::{Error, Result};
use crate::gradsuite::{run_suite_with, SuiteEntry, TOLERANCE};
use crate::metrics::{average_accuracy, backward_transfer, forgetting_rate, forward_transfer, histogram, pca_project};
use crate::taskgen::TaskStream;
use crate::trainer::{run_sequence, RunArtifacts, StrategyKind};

pub const PLOT_FILES: [&str; 4] = ["loss_curves.csv", "fisher_hist.csv", "pca.csv", "cosmatrix.csv"];
const FISHER_BINS: usize = 40;
const PCA_PER_TASK: usize = 64;
const COS_PER_TASK: usize = 16;

/// One line of a metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub bwt: f64,
    pub fwt: f64,
    pub forgetting: f64,
    pub avg_acc: f64,
    pub drift_cos: f64,
    pub retention: Option<f64>,
    pub wallclock_ratio: Option<f64>,
}

pub const METRICS_HEADER: &str = "strategy,seed,bwt,fwt,forgetting,avg_acc,drift_cos,retention,wallclock_ratio";

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), fmt6)
}

impl MetricsRow {
    pub fn from_run(run: &RunArtifacts) -> Result<Self> {
        let drift = run
            .drift
            .ok_or_else(|| Error::Contract("run finished without a drift measurement".into()))?;
        Ok(Self {
            strategy: run.strategy.kind,
            seed: run.seed,
            bwt: backward_transfer(&run.r)?,
            fwt: forward_transfer(&run.r, &run.baseline)?,
            forgetting: forgetting_rate(&run.r)?,
            avg_acc: average_accuracy(&run.r)?,
            drift_cos: drift.delta_cos,
            retention: drift.retention,
            wallclock_ratio: None,
        })
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.strategy,
            self.seed,
            fmt6(self.bwt),
            fmt6(self.fwt),
            fmt6(self.forgetting),
            fmt6(self.avg_acc),
            fmt6(self.drift_cos),
            fmt_opt(self.retention),
            fmt_opt(self.wallclock_ratio)
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(Error::Input(format!(
                "metrics row needs 9 fields, got {}: '{line}'",
                f.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Input(format!("bad number '{s}' in metrics row")))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s == "NA" {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        Ok(Self {
            strategy: f[0].parse()?,
            seed: f[1].parse().map_err(|_| Error::Input(format!("bad seed '{}'", f[1])))?,
            bwt: num(f[2])?,
            fwt: num(f[3])?,
            forgetting: num(f[4])?,
            avg_acc: num(f[5])?,
            drift_cos: num(f[6])?,
            retention: opt(f[7])?,
            wallclock_ratio: opt(f[8])?,
        })
    }
}

fn hash_line(config_hash: &str, model_hash: &str) -> String {
    format!("# config_hash={config_hash} model_hash={model_hash}\n")
}

/// `(config_hash, model_hash)` from a CSV's first line.
pub fn read_hashes(text: &str) -> Result<(String, String)> {
    let first = text.lines().next().unwrap_or("");
    let mut config = None;
    let mut model = None;
    for tok in first.trim_start_matches('#').split_whitespace() {
        if let Some(v) = tok.strip_prefix("config_hash=") {
            config = Some(v.to_string());
        } else if let Some(v) = tok.strip_prefix("model_hash=") {
            model = Some(v.to_string());
        }
    }
    match (config, model) {
        (Some(c), Some(m)) => Ok((c, m)),
        _ => Err(Error::Input(format!("missing hash header line, found '{first}'"))),
    }
}

fn write_csv(path: &Path, header: &str, columns: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = String::from(header);
    text.push_str(columns);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn run_dir_name(kind: StrategyKind, seed: u64) -> String {
    format!("{kind}_s{seed}")
}

/// The four figure data files for one run.
pub fn write_plot_data(dir: &Path, header: &str, ckpt: &Checkpoint, stream: &TaskStream) -> Result<()> {
    write_csv(
        &dir.join("loss_curves.csv"),
        header,
        "task,batch,loss",
        ckpt.loss_logs.iter().enumerate().flat_map(|(k, log)| {
            let id = ckpt.task_ids.get(k).cloned().unwrap_or_default();
            log.iter()
                .enumerate()
                .map(move |(b, l)| format!("{id},{b},{}", fmt6(*l)))
                .collect::<Vec<_>>()
        }),
    )?;

    let fisher: Vec<f64> = ckpt
        .records
        .last()
        .map(|r| r.fisher.flat_values().collect())
        .unwrap_or_default();
    write_csv(
        &dir.join("fisher_hist.csv"),
        header,
        "bin_left,count",
        histogram(&fisher, FISHER_BINS)
            .into_iter()
            .map(|(l, c)| format!("{},{c}", fmt6(l))),
    )?;

    let mut labels = Vec::new();
    let mut pairs = Vec::new();
    for t in &stream.tasks {
        for p in t.eval.iter().take(PCA_PER_TASK) {
            labels.push(t.spec.task_id.clone());
            pairs.push(p.clone());
        }
    }
    let emb = ckpt.model.embed_visual(&images_tensor(&pairs)?)?;
    let pca = pca_project(&emb, 2)?;
    write_csv(
        &dir.join("pca.csv"),
        header,
        "task,pc1,pc2",
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{l},{},{}", fmt6(pca.coords.at(i, 0)), fmt6(pca.coords.at(i, 1)))),
    )?;

    let cos_pairs: Vec<_> = stream
        .tasks
        .iter()
        .take(2)
        .flat_map(|t| t.eval.iter().take(COS_PER_TASK).cloned())
        .collect();
    let v = ckpt.model.embed_visual(&images_tensor(&cos_pairs)?)?;
    let s = similarity_matrix(&v, &v)?;
    let n = s.rows();
    write_csv(
        &dir.join("cosmatrix.csv"),
        header,
        "i,j,value",
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| format!("{i},{j},{}", fmt6(s.at(i, j)))),
    )?;
    Ok(())
}

fn write_constraints(dir: &Path, header: &str, ckpt: &Checkpoint, epsilon: f64) -> Result<()> {
    let last = ckpt.r.last().cloned().unwrap_or_default();
    write_csv(
        &dir.join("constraints.csv"),
        header,
        "task,final_acc,epsilon,violated",
        ckpt.task_ids
            .iter()
            .zip(&last)
            .map(|(id, &a)| format!("{id},{},{},{}", fmt6(a), fmt6(epsilon), a < epsilon)),
    )
}

fn write_accuracy(dir: &Path, header: &str, ckpt: &Checkpoint) -> Result<()> {
    let mut rows = Vec::new();
    for (k, row) in ckpt.r.iter().enumerate() {
        for (i, a) in row.iter().enumerate() {
            rows.push(format!("{},{},{}", ckpt.task_ids[k], ckpt.task_ids[i], fmt6(*a)));
        }
    }
    for (i, b) in ckpt.baseline.iter().enumerate() {
        rows.push(format!("init,{},{}", ckpt.task_ids[i], fmt6(*b)));
    }
    write_csv(&dir.join("accuracy.csv"), header, "after,task,accuracy", rows)
}

/// Result of a `run` invocation.
#[derive(Debug)]
pub struct RunSummary {
    pub out: PathBuf,
    pub rows: Vec<MetricsRow>,
    /// `(strategy, seed, seconds per task)` for every finished run.
    pub timing: Vec<(StrategyKind, u64, Vec<f64>)>,
    pub failures: Vec<(StrategyKind, u64, Error)>,
}

impl RunSummary {
    /// Total `ours` time over total `naive` time, over seeds where both finished.
    pub fn wallclock_ratio(&self) -> Option<f64> {
        let total = |k: StrategyKind| -> BTreeMap<u64, f64> {
            self.timing
                .iter()
                .filter(|(s, _, _)| *s == k)
                .map(|(_, seed, t)| (*seed, t.iter().sum()))
                .collect()
        };
        let (ours, naive) = (total(StrategyKind::Ours), total(StrategyKind::Naive));
        let (mut a, mut b) = (0.0, 0.0);
        for (seed, t) in &ours {
            if let Some(n) = naive.get(seed) {
                a += t;
                b += n;
            }
        }
        (b > 0.0).then(|| a / b)
    }
}

type Outcome = std::result::Result<RunArtifacts, crate::trainer::RunAbort>;

/// Execute the strategy × seed matrix of `cfg` and write every artifact under `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out)?;
    let header = hash_line(&cfg.config_hash(), &cfg.model_hash());
    fs::write(out.join("config.txt"), format!("{}{}", header, cfg.render()))?;
    let config_echo = serde_json::to_value(cfg)?;

    let mut streams = BTreeMap::new();
    for &seed in &cfg.seeds {
        let stream = cfg.build_stream(seed)?;
        let manifest = serde_json::to_string_pretty(&stream.manifest())?;
        fs::write(out.join(format!("stream_s{seed}.json")), manifest + "\n")?;
        streams.insert(seed, stream);
    }

    let matrix: Vec<(StrategyKind, u64)> = cfg
        .strategies
        .iter()
        .flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let slots: Vec<Mutex<Option<Outcome>>> = matrix.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(kind, seed)) = matrix.get(i) else { break };
        let res = run_sequence(&streams[&seed], &cfg.strategy(kind), &cfg.train, seed);
        *slots[i].lock().expect("slot lock") = Some(res);
    };
    let jobs = jobs.clamp(1, matrix.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }

    let mut summary = RunSummary {
        out: out.clone(),
        rows: Vec::new(),
        timing: Vec::new(),
        failures: Vec::new(),
    };
    let mut runs = Vec::new();
    for ((kind, seed), slot) in matrix.iter().zip(slots) {
        let outcome = slot.into_inner().expect("slot lock").expect("every slot filled");
        let dir = out.join(run_dir_name(*kind, *seed));
        fs::create_dir_all(&dir)?;
        match outcome {
            Ok(run) => {
                let ckpt = Checkpoint::from_run(config_echo.clone(), &run);
                ckpt.save(&dir.join("checkpoint.ckpt"))?;
                write_plot_data(&dir, &header, &ckpt, &streams[seed])?;
                write_constraints(&dir, &header, &ckpt, cfg.stream.epsilon)?;
                write_accuracy(&dir, &header, &ckpt)?;
                summary.timing.push((*kind, *seed, run.wallclock.clone()));
                runs.push((dir, MetricsRow::from_run(&run)?));
            }
            Err(abort) => {
                let ckpt = Checkpoint::from_run(config_echo.clone(), &abort.partial);
                ckpt.save(&dir.join("checkpoint.ckpt"))?;
                write_accuracy(&dir, &header, &ckpt)?;
                let mut diag = fs::File::create(dir.join("error.txt"))?;
                writeln!(diag, "{}", abort.error)?;
                summary.failures.push((*kind, *seed, abort.error));
            }
        }
    }

    let naive_time: BTreeMap<u64, f64> = summary
        .timing
        .iter()
        .filter(|(k, _, _)| *k == StrategyKind::Naive)
        .map(|(_, s, t)| (*s, t.iter().sum()))
        .collect();
    for (dir, mut row) in runs {
        if cfg.record_wallclock {
            let own: f64 = summary
                .timing
                .iter()
                .find(|(k, s, _)| *k == row.strategy && *s == row.seed)
                .map_or(0.0, |(_, _, t)| t.iter().sum());
            row.wallclock_ratio = naive_time.get(&row.seed).filter(|&&n| n > 0.0).map(|n| own / n);
        }
        write_csv(&dir.join("metrics.csv"), &header, METRICS_HEADER, [row.to_csv()])?;
        summary.rows.push(row);
    }
    write_csv(
        &out.join("metrics.csv"),
        &header,
        METRICS_HEADER,
        summary.rows.iter().map(MetricsRow::to_csv),
    )?;
    write_csv(
        &out.join("timing.csv"),
        &header,
        "strategy,seed,task,seconds",
        summary.timing.iter().flat_map(|(k, s, t)| {
            t.iter()
                .enumerate()
                .map(|(i, secs)| format!("{k},{s},{i},{}", fmt6(*secs)))
                .collect::<Vec<_>>()
        }),
    )?;
    let report = aggregate(&summary.rows, BTreeMap::new());
    let mut text = render_summary(&report);
    if let Some(r) = summary.wallclock_ratio() {
        let _ = writeln!(text, "\nWall-clock ratio ours/naive (total over seeds): {}", fmt6(r));
    }
    fs::write(out.join("summary.md"), &text)?;
    Ok(summary)
}

/// Parse `k=v` override strings.
pub fn parse_overrides(sets: &[String]) -> Result<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(vec![format!("--set expects key=value, got '{s}'")]))
        })
        .collect()
}

/// Load, override and run; `out` wins over `run.out`.
pub fn cmd_run(config: Option<&Path>, sets: &[String], out: Option<&Path>, jobs: usize) -> Result<RunSummary> {
    let overrides = parse_overrides(sets)?;
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p, &overrides)?,
        None => ExperimentConfig::parse("", &overrides)?,
    };
    cfg.apply_env()?;
    if let Some(o) = out {
        cfg.out = o.to_path_buf();
    }
    let summary = run_experiment(&cfg, jobs)?;
    if let Some((kind, seed, e)) = summary.failures.first() {
        return Err(match e {
            Error::Numeric(m) => Error::Numeric(format!("{kind} seed {seed}: {m}")),
            other => Error::Input(format!("{kind} seed {seed}: {other}")),
        });
    }
    Ok(summary)
}

/// Per-metric mean and range over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Stat {
    fn of(xs: impl IntoIterator<Item = f64>) -> Option<Self> {
        let xs: Vec<f64> = xs.into_iter().collect();
        if xs.is_empty() {
            return None;
        }
        Some(Self {
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            n: xs.len(),
        })
    }

    fn cell(s: &Option<Stat>) -> String {
        match s {
            Some(s) if s.n == 1 => fmt6(s.mean),
            Some(s) => format!("{} [{}, {}]", fmt6(s.mean), fmt6(s.min), fmt6(s.max)),
            None => "NA".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyStats {
    pub strategy: StrategyKind,
    pub seeds: Vec<u64>,
    pub bwt: Option<Stat>,
    pub fwt: Option<Stat>,
    pub forgetting: Option<Stat>,
    pub avg_acc: Option<Stat>,
    pub drift_cos: Option<Stat>,
    pub retention: Option<Stat>,
    pub wallclock_ratio: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<StrategyStats>,
    /// Run directory name to task labels below ε.
    pub violations: BTreeMap<String, Vec<String>>,
    pub config_hash: Option<String>,
    pub model_hash: Option<String>,
    pub budget: Option<String>,
}

fn aggregate(rows: &[MetricsRow], violations: BTreeMap<String, Vec<String>>) -> Report {
    let mut kinds: Vec<StrategyKind> = rows.iter().map(|r| r.strategy).collect();
    kinds.sort();
    kinds.dedup();
    let stats = kinds
        .into_iter()
        .map(|k| {
            let rs: Vec<&MetricsRow> = rows.iter().filter(|r| r.strategy == k).collect();
            StrategyStats {
                strategy: k,
                seeds: rs.iter().map(|r| r.seed).collect(),
                bwt: Stat::of(rs.iter().map(|r| r.bwt)),
                fwt: Stat::of(rs.iter().map(|r| r.fwt)),
                forgetting: Stat::of(rs.iter().map(|r| r.forgetting)),
                avg_acc: Stat::of(rs.iter().map(|r| r.avg_acc)),
                drift_cos: Stat::of(rs.iter().map(|r| r.drift_cos)),
                retention: Stat::of(rs.iter().filter_map(|r| r.retention)),
                wallclock_ratio: Stat::of(rs.iter().filter_map(|r| r.wallclock_ratio)),
            }
        })
        .collect();
    Report {
        rows: stats,
        violations,
        config_hash: None,
        model_hash: None,
        budget: None,
    }
}

fn render_summary(report: &Report) -> String {
    let mut s = String::new();
    s.push_str("| strategy | seeds | BWT | FWT | forgetting | avg_acc |\n|---|---|---|---|---|---|\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            r.strategy,
            r.seeds.len(),
            Stat::cell(&r.bwt),
            Stat::cell(&r.fwt),
            Stat::cell(&r.forgetting),
            Stat::cell(&r.avg_acc)
        );
    }
    s
}

const DEFINITIONS: &str = "\
Definitions (R[k][i]: accuracy on task i after training task k, b[i]: fresh-model accuracy):
- BWT = 1/(n-1) sum_{i<n} (R[n][i] - R[i][i])
- FWT = 1/(n-1) sum_{i>1} (R[i-1][i] - b[i])
- forgetting = 1/(n-1) sum_{i<n} (max_{k>=i} R[k][i] - R[n][i])
- avg_acc = mean_i R[n][i]
- drift_cos = mean cosine drop on task-1 probe pairs since the task-1 snapshot
- retention = task-1 retrieval accuracy now / at the task-1 snapshot
";

pub fn render_report(report: &Report) -> String {
    let mut s = String::from("# ModalAnchor report\n\n");
    if let (Some(c), Some(m)) = (&report.config_hash, &report.model_hash) {
        let _ = writeln!(s, "config_hash={c} model_hash={m}\n");
    }
    if let Some(b) = &report.budget {
        let _ = writeln!(s, "Training budget: {b}\n");
    }
    s.push_str(DEFINITIONS);
    s.push_str("\nValues are mean [min, max] over seeds.\n\n");
    s.push_str(&render_summary(report));
    s.push_str("\n| strategy | drift_cos | retention | wallclock_ratio |\n|---|---|---|---|\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            r.strategy,
            Stat::cell(&r.drift_cos),
            Stat::cell(&r.retention),
            Stat::cell(&r.wallclock_ratio)
        );
    }
    s.push_str("\n## Constraint violations (final accuracy below epsilon)\n\n");
    let flagged: Vec<_> = report.violations.iter().filter(|(_, v)| !v.is_empty()).collect();
    if flagged.is_empty() {
        s.push_str("none\n");
    }
    for (run, tasks) in flagged {
        let _ = writeln!(s, "- {run}: {}", tasks.join(", "));
    }
    s
}

fn read_violations(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f.len() == 4 && f[3] == "true").then(|| f[0].to_string())
        })
        .collect())
}

/// Merge every completed run under `dir` and write the report to `out`
/// (default `<dir>/report.md`). Missing plot files are regenerated from checkpoints.
pub fn cmd_report(dir: &Path, out: Option<&Path>) -> Result<Report> {
    let mut run_dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.csv").is_file())
        .collect();
    run_dirs.sort();
    if run_dirs.is_empty() {
        return Err(Error::Input(format!("no completed runs under {}", dir.display())));
    }
    let mut rows = Vec::new();
    let mut violations = BTreeMap::new();
    let mut hashes: Option<(String, String)> = None;
    let mut budget = None;
    for rd in &run_dirs {
        let name = rd
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let text = fs::read_to_string(rd.join("metrics.csv"))?;
        let (ch, mh) = read_hashes(&text)?;
        match &hashes {
            None => hashes = Some((ch.clone(), mh.clone())),
            Some((_, m)) if *m != mh => {
                return Err(Error::Input(format!(
                    "run {name} has model_hash {mh}, expected {m}; refusing to merge different models"
                )))
            }
            _ => {}
        }
        for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
            if !line.trim().is_empty() {
                rows.push(MetricsRow::parse_csv(line)?);
            }
        }
        let missing: Vec<&str> = PLOT_FILES.iter().copied().filter(|f| !rd.join(f).is_file()).collect();
        let need_constraints = !rd.join("constraints.csv").is_file();
        let ckpt_path = rd.join("checkpoint.ckpt");
        if (!missing.is_empty() || need_constraints || budget.is_none()) && ckpt_path.is_file() {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let cfg: ExperimentConfig = serde_json::from_value(ckpt.config.clone())?;
            let t = &cfg.train;
            budget = Some(format!(
                "epochs={} batch_size={} lr={} n_fisher={} eval_batch={}",
                t.epochs, t.batch_size, t.lr, t.n_fisher, t.eval_batch
            ));
            let header = hash_line(&ch, &mh);
            if !missing.is_empty() {
                let stream = cfg.build_stream(ckpt.seed)?;
                write_plot_data(rd, &header, &ckpt, &stream)?;
            }
            if need_constraints {
                write_constraints(rd, &header, &ckpt, cfg.stream.epsilon)?;
            }
        }
        let cpath = rd.join("constraints.csv");
        let v = if cpath.is_file() {
            read_violations(&cpath)?
        } else {
            Vec::new()
        };
        violations.insert(name, v);
    }
    let mut report = aggregate(&rows, violations);
    if let Some((c, m)) = hashes {
        report.config_hash = Some(c);
        report.model_hash = Some(m);
    }
    report.budget = budget;
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("report.md"));
    fs::write(target, render_report(&report))?;
    Ok(report)
}

/// Run the finite-difference suite and print one line per component.
pub fn cmd_gradcheck_with(make_graph: impl Fn() -> Graph, w: &mut dyn std::io::Write) -> Result<Vec<SuiteEntry>> {
    let entries = run_suite_with(make_graph)?;
    for e in &entries {
        writeln!(
            w,
            "{:<24} {:>12.3e} {}{}",
            e.component,
            e.max_rel_error,
            if e.passed() { "ok" } else { "FAIL" },
            e.worst_param.as_deref().map(|p| format!(" ({p})")).unwrap_or_default()
        )?;
    }
    let failed: Vec<&str> = entries
        .iter()
        .filter(|e| !e.passed())
        .map(|e| e.component.as_str())
        .collect();
    if failed.is_empty() {
        writeln!(w, "gradcheck passed: worst relative error <= {TOLERANCE:e} everywhere")?;
        Ok(entries)
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed (tolerance {TOLERANCE:e}) for: {}",
            failed.join(", ")
        )))
    }
}

pub fn cmd_gradcheck(w: &mut dyn std::io::Write) -> Result<Vec<SuiteEntry>> {
    cmd_gradcheck_with(Graph::new, w)
}
