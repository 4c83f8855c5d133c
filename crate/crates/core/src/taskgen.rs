//! Seeded synthetic task streams, JSON-Lines pair files and the replay buffer.
//!
//! A stream shares one base distribution across its tasks: `n_concepts`
//! concept centers and `n_attributes` attribute vectors in image-feature
//! space. A pair picks a concept and `attrs_per_pair` attributes; its image is
//!
//! ```text
//! x = R_k · c + attr_scale · mean(a_m) + N(0, noise²)
//! ```
//!
//! Its caption holds the concept token, the attribute tokens and distractor
//! tokens. Concept tokens of task k live in a band of width `band_width`
//! starting at `k · token_offset`; attribute and distractor tokens follow all
//! concept bands and are shared by every task. `R_k` composes one fresh
//! rotation of angle `rotation` per task boundary, so both knobs at zero give
//! identically distributed tasks.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{ModelConfig, Pair};
use crate::error::{Error, Result};

/// Per-task description, echoed in the stream manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_concepts: usize,
    /// Angle of the rotation applied on entering this task (0 for the first).
    pub rotation: f64,
    /// First token of this task's concept band.
    pub token_base: usize,
    pub seed: u64,
    pub epsilon: f64,
}

/// Generator knobs shared by every task of a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamTemplate {
    /// Training pairs per task; the last entry repeats for longer streams.
    pub n_train: Vec<usize>,
    pub n_eval: usize,
    pub n_concepts: usize,
    pub n_attributes: usize,
    pub attrs_per_pair: usize,
    pub attr_scale: f64,
    pub noise: f64,
    pub rotation: f64,
    pub token_offset: usize,
    pub band_width: usize,
    pub epsilon: f64,
}

impl Default for StreamTemplate {
    fn default() -> Self {
        Self {
            n_train: vec![2000, 1600, 2400, 3000],
            n_eval: 512,
            n_concepts: 8,
            n_attributes: 16,
            attrs_per_pair: 3,
            attr_scale: 1.0,
            noise: 0.3,
            rotation: 1.2,
            token_offset: 8,
            band_width: 8,
            epsilon: 0.5,
        }
    }
}

impl StreamTemplate {
    pub fn train_size(&self, k: usize) -> usize {
        self.n_train[k.min(self.n_train.len().saturating_sub(1))]
    }

    /// First token after every concept band: attributes, then distractors.
    pub fn shared_start(&self, n_tasks: usize) -> usize {
        (n_tasks - 1) * self.token_offset + self.band_width
    }

    pub fn validate(&self, n_tasks: usize, model: &ModelConfig) -> Result<()> {
        let mut bad = Vec::new();
        if n_tasks < 2 {
            bad.push(format!("n_tasks must be >= 2, got {n_tasks}"));
        }
        if self.n_train.is_empty() || self.n_train.contains(&0) {
            bad.push("n_train entries must be >= 1".to_string());
        }
        if self.n_eval == 0 {
            bad.push("n_eval must be >= 1".to_string());
        }
        if self.n_concepts == 0 {
            bad.push("n_concepts must be >= 1".to_string());
        }
        if self.attrs_per_pair > self.n_attributes {
            bad.push("attrs_per_pair exceeds n_attributes".to_string());
        }
        if self.attrs_per_pair + 1 > model.max_len {
            bad.push("concept plus attribute tokens exceed max_len".to_string());
        }
        if !(self.noise >= 0.0) || !(self.attr_scale >= 0.0) || !self.rotation.is_finite() {
            bad.push("noise and attr_scale must be >= 0, rotation finite".to_string());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            bad.push(format!("epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        if self.n_concepts > self.band_width {
            return Err(Error::Parameter(format!(
                "{} concepts do not fit a concept band of width {}",
                self.n_concepts, self.band_width
            )));
        }
        let distractors = model.max_len - 1 - self.attrs_per_pair;
        let need = self.shared_start(n_tasks) + self.n_attributes + usize::from(distractors > 0);
        if need > model.vocab {
            return Err(Error::Parameter(format!(
                "{n_tasks} concept bands plus {} attribute tokens need {need} tokens, vocab is {}",
                self.n_attributes, model.vocab
            )));
        }
        Ok(())
    }
}

/// One task of a stream with its materialized splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub spec: TaskSpec,
    pub train: Vec<Pair>,
    pub eval: Vec<Pair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub seed: u64,
    pub template: StreamTemplate,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    /// Manifest document: seed, template and task specs, without pair data.
    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "template": self.template,
            "tasks": self.tasks.iter().map(|t| &t.spec).collect::<Vec<_>>(),
        })
    }

    /// Write `manifest.json` plus `<task>_train.jsonl` / `<task>_eval.jsonl` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(dir.join("manifest.json"), text + "\n")?;
        for t in &self.tasks {
            save_pairs(&dir.join(format!("{}_train.jsonl", t.spec.task_id)), &t.train)?;
            save_pairs(&dir.join(format!("{}_eval.jsonl", t.spec.task_id)), &t.eval)?;
        }
        Ok(())
    }
}

pub fn task_label(k: usize) -> String {
    if k < 26 {
        ((b'A' + k as u8) as char).to_string()
    } else {
        format!("T{k}")
    }
}

/// Square rotation turning every vector by exactly `angle`: Givens rotations
/// in `d/2` disjoint random coordinate planes (one axis is fixed when `d` is odd).
pub fn plane_rotation(d: usize, angle: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(rng);
    let mut q = vec![0.0; d * d];
    for i in 0..d {
        q[i * d + i] = 1.0;
    }
    let (s, c) = angle.sin_cos();
    for pair in perm.chunks_exact(2) {
        let (p, r) = (pair[0], pair[1]);
        q[p * d + p] = c;
        q[p * d + r] = -s;
        q[r * d + p] = s;
        q[r * d + r] = c;
    }
    q
}

fn square_matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

struct Sampler<'a> {
    template: &'a StreamTemplate,
    model: &'a ModelConfig,
    centers: &'a [Vec<f64>],
    attributes: &'a [Vec<f64>],
    basis: &'a [f64],
    token_base: usize,
    shared_start: usize,
    task_id: &'a str,
}

impl Sampler<'_> {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Pair {
        let t = self.template;
        let d = self.model.d_v;
        let concept = rng.random_range(0..t.n_concepts);
        let attrs = index::sample(rng, t.n_attributes, t.attrs_per_pair).into_vec();

        let center = &self.centers[concept];
        let mut image = vec![0.0; d];
        for (i, x) in image.iter_mut().enumerate() {
            let row = &self.basis[i * d..(i + 1) * d];
            *x = row.iter().zip(center).map(|(r, c)| r * c).sum::<f64>();
        }
        if !attrs.is_empty() {
            let w = t.attr_scale / attrs.len() as f64;
            for &m in &attrs {
                for (x, &a) in image.iter_mut().zip(&self.attributes[m]) {
                    *x += w * a;
                }
            }
        }
        for x in image.iter_mut() {
            *x += t.noise * rng.sample::<f64, _>(StandardNormal);
        }

        let first_distractor = self.shared_start + t.n_attributes;
        let mut caption = Vec::with_capacity(self.model.max_len);
        caption.push(self.token_base + concept);
        caption.extend(attrs.iter().map(|&m| self.shared_start + m));
        while caption.len() < self.model.max_len {
            caption.push(rng.random_range(first_distractor..self.model.vocab));
        }
        Pair {
            image,
            caption,
            task_id: self.task_id.to_string(),
        }
    }
}

/// Materialize an `n_tasks` stream; fully determined by `seed` and the template.
pub fn generate_task_stream(
    seed: u64,
    n_tasks: usize,
    template: &StreamTemplate,
    model: &ModelConfig,
) -> Result<TaskStream> {
    template.validate(n_tasks, model)?;
    let d = model.d_v;
    let mut base_rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = gaussian_rows(&mut base_rng, template.n_concepts, d);
    let attributes = gaussian_rows(&mut base_rng, template.n_attributes, d);

    let mut basis = vec![0.0; d * d];
    for i in 0..d {
        basis[i * d + i] = 1.0;
    }
    let mut tasks = Vec::with_capacity(n_tasks);
    for k in 0..n_tasks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        let rotation = if k == 0 { 0.0 } else { template.rotation };
        if k > 0 {
            let q = plane_rotation(d, template.rotation, &mut rng);
            basis = square_matmul(&q, &basis, d);
        }
        let task_id = task_label(k);
        let spec = TaskSpec {
            task_id: task_id.clone(),
            n_train: template.train_size(k),
            n_eval: template.n_eval,
            n_concepts: template.n_concepts,
            rotation,
            token_base: k * template.token_offset,
            seed,
            epsilon: template.epsilon,
        };
        let sampler = Sampler {
            template,
            model,
            centers: &centers,
            attributes: &attributes,
            basis: &basis,
            token_base: spec.token_base,
            shared_start: template.shared_start(n_tasks),
            task_id: &task_id,
        };
        let train = (0..spec.n_train).map(|_| sampler.draw(&mut rng)).collect();
        let eval = (0..spec.n_eval).map(|_| sampler.draw(&mut rng)).collect();
        tasks.push(Task { spec, train, eval });
    }
    Ok(TaskStream {
        seed,
        template: template.clone(),
        tasks,
    })
}

/// A stream read from pair files, one train and one eval file per task.
///
/// Tasks are labelled A, B, ... in file order; pairs keep their file's task tags.
pub fn stream_from_files(train: &[PathBuf], eval: &[PathBuf], epsilon: f64, model: &ModelConfig) -> Result<TaskStream> {
    if train.len() != eval.len() {
        return Err(Error::Input(format!(
            "{} train files but {} eval files",
            train.len(),
            eval.len()
        )));
    }
    let mut tasks = Vec::with_capacity(train.len());
    for (k, (tp, ep)) in train.iter().zip(eval).enumerate() {
        let train = load_pairs(tp, model)?;
        let eval = load_pairs(ep, model)?;
        if train.is_empty() || eval.is_empty() {
            return Err(Error::Input(format!("task {} has an empty split", task_label(k))));
        }
        let spec = TaskSpec {
            task_id: task_label(k),
            n_train: train.len(),
            n_eval: eval.len(),
            n_concepts: 0,
            rotation: 0.0,
            token_base: 0,
            seed: 0,
            epsilon,
        };
        tasks.push(Task { spec, train, eval });
    }
    Ok(TaskStream {
        seed: 0,
        template: StreamTemplate {
            n_train: tasks.iter().map(|t| t.spec.n_train).collect(),
            n_eval: tasks.first().map_or(0, |t| t.spec.n_eval),
            epsilon,
            ..StreamTemplate::default()
        },
        tasks,
    })
}

#[derive(Serialize)]
struct LineOut<'a> {
    task: &'a str,
    image: &'a [f64],
    caption: &'a [usize],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LineIn {
    task: String,
    image: Vec<f64>,
    caption: Vec<usize>,
}

/// Write pairs as JSON Lines with keys `task`, `image`, `caption` in that order.
pub fn save_pairs(path: &Path, pairs: &[Pair]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        let line = LineOut {
            task: &p.task_id,
            image: &p.image,
            caption: &p.caption,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read and validate a JSON-Lines pair file; short captions are padded with token 0.
pub fn load_pairs(path: &Path, model: &ModelConfig) -> Result<Vec<Pair>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LineIn = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let invalid = |message: String| Error::Validation { line: lineno, message };
        if rec.image.len() != model.d_v {
            return Err(invalid(format!(
                "image has {} features, expected {}",
                rec.image.len(),
                model.d_v
            )));
        }
        if rec.image.iter().any(|x| !x.is_finite()) {
            return Err(invalid("image has non-finite features".into()));
        }
        if rec.caption.is_empty() || rec.caption.len() > model.max_len {
            return Err(invalid(format!(
                "caption length {} outside 1..={}",
                rec.caption.len(),
                model.max_len
            )));
        }
        if let Some(&tok) = rec.caption.iter().find(|&&t| t >= model.vocab) {
            return Err(invalid(format!("token {tok} >= vocab {}", model.vocab)));
        }
        let mut caption = rec.caption;
        caption.resize(model.max_len, 0);
        out.push(Pair {
            image: rec.image,
            caption,
            task_id: rec.task,
        });
    }
    Ok(out)
}

/// Rehearsal memory holding a fixed fraction of every completed task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub fraction: f64,
    pub pairs: Vec<Pair>,
}

impl ReplayBuffer {
    pub fn new(fraction: f64) -> Self {
        Self {
            fraction,
            pairs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn count_for(&self, task_id: &str) -> usize {
        self.pairs.iter().filter(|p| p.task_id == task_id).count()
    }

    pub fn quota(&self, n: usize) -> usize {
        (self.fraction * n as f64).ceil() as usize
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy k-center (farthest-point) selection. Starts from the point nearest
/// the centroid; ties go to the lower index.
pub fn k_center(points: &[&[f64]], k: usize) -> Vec<usize> {
    let n = points.len();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let d = points[0].len();
    let mut centroid = vec![0.0; d];
    for p in points {
        for (c, &x) in centroid.iter_mut().zip(p.iter()) {
            *c += x;
        }
    }
    for c in centroid.iter_mut() {
        *c /= n as f64;
    }
    let argbest = |score: &dyn Fn(usize) -> f64, better: &dyn Fn(f64, f64) -> bool| {
        let mut best = 0;
        let mut best_s = score(0);
        for i in 1..n {
            let s = score(i);
            if better(s, best_s) {
                best = i;
                best_s = s;
            }
        }
        best
    };
    let first = argbest(&|i| sq_dist(points[i], &centroid), &|a, b| a < b);
    let mut chosen = vec![first];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    while chosen.len() < k {
        let next = argbest(&|i| min_d[i], &|a, b| a > b);
        chosen.push(next);
        for (m, p) in min_d.iter_mut().zip(points) {
            *m = m.min(sq_dist(p, points[next]));
        }
    }
    chosen
}

/// Add `⌈fraction · n⌉` diverse pairs of a completed task to the buffer.
pub fn update_buffer(buffer: &mut ReplayBuffer, task: &[Pair]) -> Result<()> {
    if task.is_empty() {
        return Err(Error::Input(
            "cannot update the replay buffer from an empty task".into(),
        ));
    }
    let images: Vec<&[f64]> = task.iter().map(|p| p.image.as_slice()).collect();
    for i in k_center(&images, buffer.quota(task.len())) {
        buffer.pairs.push(task[i].clone());
    }
    Ok(())
}

/// Replace the tail of `current` with `⌊ratio · B⌋` pairs drawn uniformly
/// (with replacement) from the buffer. An empty buffer leaves the batch as is.
pub fn mix_batches(current: &[Pair], buffer: &ReplayBuffer, ratio: f64, rng: &mut impl Rng) -> Result<Vec<Pair>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Parameter(format!(
            "replay ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let n_replay = (ratio * current.len() as f64).floor() as usize;
    if buffer.is_empty() || n_replay == 0 {
        return Ok(current.to_vec());
    }
    let mut batch: Vec<Pair> = current[..current.len() - n_replay].to_vec();
    for _ in 0..n_replay {
        batch.push(buffer.pairs[rng.random_range(0..buffer.len())].clone());
    }
    Ok(batch)
}
