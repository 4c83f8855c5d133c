//! Grouped diagonal Fisher estimation, the per-modality EWC penalty and the
//! cross-modal consistency loss against frozen encoder snapshots.
//!
//! The EWC penalty for one consolidated task is
//!
//! ```text
//! Σ_g λ_g Σ_i F_g[i] · (θ_g[i] − θ*_g[i])²      g ∈ {visual, textual, cross_modal}
//! ```
//!
//! and the consistency loss compares the probe-batch similarity matrix under
//! the current encoders with the one recorded when the snapshot was taken:
//!
//! ```text
//! (1/N²) Σ_{i,j} | cos(φ_v(x_i), φ_t(y_j)) − cos(f_v(x_i), f_t(y_j)) |
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::encoder::{self, contrastive_terms_var, Bound, DualEncoder, Pair};
use crate::error::{Error, Result};
use crate::params::{BindMode, Group, ParamStore};
use crate::tensor::Tensor;

/// Diagonal empirical Fisher, one array per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherEstimate {
    pub values: BTreeMap<String, Arc<Tensor>>,
    pub groups: BTreeMap<String, Group>,
    pub sample_count: usize,
}

impl FisherEstimate {
    /// Mean Fisher value over every scalar of `group`; zero for an empty group.
    pub fn group_mean(&self, group: Group) -> f64 {
        let (sum, n) = self
            .values
            .iter()
            .filter(|(name, _)| self.groups.get(*name) == Some(&group))
            .fold((0.0, 0usize), |(s, n), (_, t)| {
                (s + t.data().iter().sum::<f64>(), n + t.len())
            });
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn flat_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.values().flat_map(|t| t.data().iter().copied())
    }
}

/// Running sum of squared per-sample gradients.
#[derive(Debug, Clone)]
pub struct FisherAccumulator {
    sums: BTreeMap<String, Tensor>,
    groups: BTreeMap<String, Group>,
    count: usize,
}

impl FisherAccumulator {
    pub fn new(params: &ParamStore) -> Self {
        let sums = params
            .iter()
            .map(|(n, p)| (n.clone(), Tensor::zeros(p.value.shape())))
            .collect();
        let groups = params.iter().map(|(n, p)| (n.clone(), p.group)).collect();
        Self { sums, groups, count: 0 }
    }

    /// Add one sample's gradient; parameters without a gradient contribute zero.
    pub fn add(&mut self, grads: &Gradients) {
        for (name, acc) in self.sums.iter_mut() {
            if let Some(g) = grads.by_name(name) {
                for (a, &gi) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += gi * gi;
                }
            }
        }
        self.count += 1;
    }

    pub fn finish(self) -> Result<FisherEstimate> {
        if self.count == 0 {
            return Err(Error::Input("Fisher estimate needs at least one sample".into()));
        }
        let inv = 1.0 / self.count as f64;
        let values = self
            .sums
            .into_iter()
            .map(|(n, t)| (n, Arc::new(t.map(|x| x * inv))))
            .collect();
        Ok(FisherEstimate {
            values,
            groups: self.groups,
            sample_count: self.count,
        })
    }
}

/// Fisher from an arbitrary per-sample scalar loss, one graph per sample.
pub fn estimate_fisher_with<F>(params: &ParamStore, n_samples: usize, mut sample_loss: F) -> Result<FisherEstimate>
where
    F: FnMut(&mut Graph, &BTreeMap<String, Var>, usize) -> Result<Var>,
{
    if n_samples == 0 {
        return Err(Error::Input("Fisher estimate needs n_samples >= 1".into()));
    }
    let mut acc = FisherAccumulator::new(params);
    for i in 0..n_samples {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, BindMode::All);
        let loss = sample_loss(&mut g, &vars, i)?;
        acc.add(&g.backward(loss)?);
    }
    acc.finish()
}

/// Empirical diagonal Fisher of the contrastive task loss.
///
/// A single pair has no negatives, so each sample's loss is its own
/// symmetric InfoNCE term evaluated inside a context batch of `context`
/// consecutive pairs. Samples cycle through `data` when `n_samples` exceeds it.
pub fn estimate_fisher(model: &DualEncoder, data: &[Pair], n_samples: usize, context: usize) -> Result<FisherEstimate> {
    if data.is_empty() {
        return Err(Error::Input("Fisher estimate needs a non-empty data source".into()));
    }
    if n_samples == 0 || context == 0 {
        return Err(Error::Input(
            "Fisher estimate needs n_samples >= 1 and context >= 1".into(),
        ));
    }
    let chosen: Vec<Pair> = (0..n_samples).map(|i| data[i % data.len()].clone()).collect();
    let mut acc = FisherAccumulator::new(&model.params);
    for chunk in chosen.chunks(context) {
        let mut g = Graph::new();
        let b = model.bind(&mut g, BindMode::All)?;
        let v = model.visual_forward(&mut g, &b, &encoder::images_tensor(chunk)?)?;
        let t = model.text_forward(&mut g, &b, &encoder::captions(chunk))?;
        let inv_tau = model.inverse_temperature(&mut g, &b);
        let terms = contrastive_terms_var(&mut g, v, t, inv_tau)?;
        for i in 0..chunk.len() {
            let li = g.select(terms, i)?;
            acc.add(&g.backward(li)?);
        }
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupLambdas {
    pub visual: f64,
    pub textual: f64,
    pub cross_modal: f64,
}

impl GroupLambdas {
    pub fn uniform(v: f64) -> Self {
        Self {
            visual: v,
            textual: v,
            cross_modal: v,
        }
    }

    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Visual => self.visual,
            Group::Textual => self.textual,
            Group::CrossModal => self.cross_modal,
        }
    }
}

/// `λ_g = λ_base · 3·m_g / (m_v + m_t + m_c)` with `m_g` the group's mean
/// Fisher value; every group gets `λ_base` when all means are zero.
pub fn adaptive_lambdas(fisher: &FisherEstimate, lambda_base: f64) -> GroupLambdas {
    let m = Group::ALL.map(|g| fisher.group_mean(g));
    let total: f64 = m.iter().sum();
    if !(total > 0.0) {
        return GroupLambdas::uniform(lambda_base);
    }
    let w = |x: f64| lambda_base * 3.0 * x / total;
    GroupLambdas {
        visual: w(m[0]),
        textual: w(m[1]),
        cross_modal: w(m[2]),
    }
}

/// How a record weights its Fisher terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyWeights {
    /// One λ per modality group.
    PerGroup(GroupLambdas),
    /// A single group spanning the whole model.
    Whole(f64),
}

impl PenaltyWeights {
    pub fn lambda(&self, g: Group) -> f64 {
        match self {
            PenaltyWeights::PerGroup(l) => l.get(g),
            PenaltyWeights::Whole(l) => *l,
        }
    }

    pub fn group_count(&self) -> usize {
        match self {
            PenaltyWeights::PerGroup(_) => 3,
            PenaltyWeights::Whole(_) => 1,
        }
    }
}

/// Anchor weights, Fisher and penalty weights for one completed task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationRecord {
    pub task_id: String,
    pub anchor: BTreeMap<String, Arc<Tensor>>,
    pub fisher: FisherEstimate,
    pub weights: PenaltyWeights,
}

impl ConsolidationRecord {
    pub fn new(task_id: &str, params: &ParamStore, fisher: FisherEstimate, weights: PenaltyWeights) -> Result<Self> {
        let mut anchor = BTreeMap::new();
        for (name, f) in &fisher.values {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("Fisher covers unknown parameter '{name}'")))?;
            if p.value.shape() != f.shape() {
                return Err(Error::Contract(format!("anchor/Fisher shape mismatch for '{name}'")));
            }
            anchor.insert(name.clone(), Arc::new(p.value.clone()));
        }
        Ok(Self {
            task_id: task_id.to_string(),
            anchor,
            fisher,
            weights,
        })
    }

    fn lambda_for(&self, name: &str) -> f64 {
        let g = self.fisher.groups.get(name).copied().unwrap_or(Group::CrossModal);
        self.weights.lambda(g)
    }
}

/// Sum of every record's penalty, as a graph scalar over the given weights.
pub fn ewc_penalty_var(g: &mut Graph, params: &BTreeMap<String, Var>, records: &[ConsolidationRecord]) -> Result<Var> {
    let mut terms = Vec::new();
    for rec in records {
        for (name, anchor) in &rec.anchor {
            let lambda = rec.lambda_for(name);
            if lambda == 0.0 {
                continue;
            }
            let v = *params.get(name).ok_or_else(|| {
                Error::Contract(format!("record '{}' anchors unknown parameter '{name}'", rec.task_id))
            })?;
            if g.value(v).shape() != anchor.shape() {
                return Err(Error::Contract(format!(
                    "record '{}' shape {:?} does not match parameter '{name}' {:?}",
                    rec.task_id,
                    anchor.shape(),
                    g.value(v).shape()
                )));
            }
            let fisher = &rec.fisher.values[name];
            terms.push(g.weighted_sq_dist(v, anchor.clone(), fisher.clone(), lambda)?);
        }
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => return Ok(g.constant(Tensor::scalar(0.0))),
    };
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Plain-value EWC penalty.
pub fn ewc_penalty(params: &ParamStore, records: &[ConsolidationRecord]) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, BindMode::Frozen);
    let p = ewc_penalty_var(&mut g, &vars, records)?;
    Ok(g.value(p).item())
}

/// Frozen copy of the encoders after a task, with its probe batch and the
/// probe similarity matrix it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSnapshot {
    pub task_id: String,
    pub encoder: DualEncoder,
    pub probe: Vec<Pair>,
    pub similarity: Tensor,
}

impl EncoderSnapshot {
    pub fn capture(model: &DualEncoder, probe: Vec<Pair>, task_id: &str) -> Result<Self> {
        if !model.adapters.is_empty() {
            return Err(Error::Contract("merge adapters before taking a snapshot".into()));
        }
        if probe.is_empty() {
            return Err(Error::Input("snapshot probe batch is empty".into()));
        }
        let mut encoder = model.clone();
        for (_, p) in encoder.params.iter_mut() {
            p.trainable = false;
        }
        let (v, t) = encoder.embed_pairs(&probe)?;
        let similarity = encoder::similarity_matrix(&v, &t)?;
        Ok(Self {
            task_id: task_id.to_string(),
            encoder,
            probe,
            similarity,
        })
    }

    pub fn len(&self) -> usize {
        self.probe.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probe.is_empty()
    }
}

/// `mean |S_cur − S_old|`.
pub fn similarity_consistency(g: &mut Graph, current: Var, old: &Tensor) -> Result<Var> {
    if g.value(current).shape() != old.shape() {
        return Err(Error::Contract(format!(
            "similarity shapes differ: {:?} vs {:?}",
            g.value(current).shape(),
            old.shape()
        )));
    }
    let o = g.constant(old.clone());
    let d = g.sub(current, o)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Consistency term on the probe pairs at `indices` (all pairs when `None`).
pub fn consistency_var(
    g: &mut Graph,
    model: &DualEncoder,
    bound: &Bound,
    snapshot: &EncoderSnapshot,
    indices: Option<&[usize]>,
) -> Result<Var> {
    if snapshot.probe.is_empty() {
        return Err(Error::Input("snapshot probe batch is empty".into()));
    }
    if snapshot.encoder.config.d_e != model.config.d_e {
        return Err(Error::Contract(format!(
            "embedding dims differ: snapshot {} vs current {}",
            snapshot.encoder.config.d_e, model.config.d_e
        )));
    }
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..snapshot.probe.len()).collect();
            &all
        }
    };
    let pairs: Vec<Pair> = idx.iter().map(|&i| snapshot.probe[i].clone()).collect();
    let v = model.visual_forward(g, bound, &encoder::images_tensor(&pairs)?)?;
    let t = model.text_forward(g, bound, &encoder::captions(&pairs))?;
    let s = g.matmul_t(v, t)?;
    let m = idx.len();
    let mut old = Vec::with_capacity(m * m);
    for &i in idx {
        for &j in idx {
            old.push(snapshot.similarity.at(i, j));
        }
    }
    similarity_consistency(g, s, &Tensor::new(vec![m, m], old)?)
}

/// Consistency loss over the full probe batch.
pub fn consistency_loss(current: &DualEncoder, snapshot: &EncoderSnapshot) -> Result<f64> {
    let mut g = Graph::new();
    let b = current.bind(&mut g, BindMode::Frozen)?;
    let c = consistency_var(&mut g, current, &b, snapshot, None)?;
    Ok(g.value(c).item())
}

/// `task + penalty + β · mean(consistency)`; returns `task` itself when nothing is added.
pub fn combine_losses(g: &mut Graph, task: Var, penalty: Option<Var>, consistency: &[Var], beta: f64) -> Result<Var> {
    if !(beta >= 0.0) {
        return Err(Error::Parameter(format!("beta must be >= 0, got {beta}")));
    }
    let mut total = task;
    if let Some(p) = penalty {
        total = g.add(total, p)?;
    }
    if beta > 0.0 && !consistency.is_empty() {
        let mut s = consistency[0];
        for &c in &consistency[1..] {
            s = g.add(s, c)?;
        }
        let weighted = g.scale(s, beta / consistency.len() as f64);
        total = g.add(total, weighted)?;
    }
    Ok(total)
}

/// Which probe pairs each snapshot contributes on one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeSelection {
    Full,
    /// `len` consecutive probe pairs starting at `start`, wrapping around.
    Window {
        start: usize,
        len: usize,
    },
}

impl ProbeSelection {
    fn indices(&self, probe_len: usize) -> Option<Vec<usize>> {
        match *self {
            ProbeSelection::Full => None,
            ProbeSelection::Window { len, .. } if len >= probe_len => None,
            ProbeSelection::Window { start, len } => Some((0..len).map(|k| (start + k) % probe_len).collect()),
        }
    }
}

/// Task loss plus EWC penalty over `bound.effective` plus the β-weighted
/// mean consistency over `snapshots`.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    g: &mut Graph,
    model: &DualEncoder,
    bound: &Bound,
    task: Var,
    records: &[ConsolidationRecord],
    snapshots: &[EncoderSnapshot],
    beta: f64,
    selection: ProbeSelection,
) -> Result<Var> {
    let penalty = if records.is_empty() {
        None
    } else {
        Some(ewc_penalty_var(g, &bound.effective, records)?)
    };
    let mut cons = Vec::new();
    if beta > 0.0 {
        for snap in snapshots {
            let idx = selection.indices(snap.probe.len());
            cons.push(consistency_var(g, model, bound, snap, idx.as_deref())?);
        }
    }
    combine_losses(g, task, penalty, &cons, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_group_record(f: Vec<f64>, anchor: Vec<f64>, lambda: f64) -> (ParamStore, ConsolidationRecord) {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(anchor.clone()), Group::Visual);
        let fisher = FisherEstimate {
            values: BTreeMap::from([("w".to_string(), Arc::new(Tensor::from_vec(f)))]),
            groups: BTreeMap::from([("w".to_string(), Group::Visual)]),
            sample_count: 1,
        };
        let rec = ConsolidationRecord::new("A", &s, fisher, PenaltyWeights::Whole(lambda)).unwrap();
        (s, rec)
    }

    #[test]
    fn penalty_zero_at_anchor() {
        let (s, rec) = one_group_record(vec![1.0, 2.0], vec![0.3, -0.4], 5.0);
        assert_eq!(ewc_penalty(&s, &[rec]).unwrap(), 0.0);
    }

    #[test]
    fn penalty_hand_case() {
        let (mut s, rec) = one_group_record(vec![1.0, 2.0], vec![0.0, 0.0], 0.5);
        s.get_mut("w").unwrap().value = Tensor::from_vec(vec![1.0, 1.0]);
        assert_eq!(ewc_penalty(&s, std::slice::from_ref(&rec)).unwrap(), 1.5);
        let mut doubled = rec;
        doubled.weights = PenaltyWeights::Whole(1.0);
        assert_eq!(ewc_penalty(&s, &[doubled]).unwrap(), 3.0);
    }

    #[test]
    fn penalty_shape_mismatch_is_contract_error() {
        let (_, rec) = one_group_record(vec![1.0, 2.0], vec![0.0, 0.0], 0.5);
        let mut other = ParamStore::new();
        other.insert("w", Tensor::from_vec(vec![0.0, 0.0, 0.0]), Group::Visual);
        assert!(matches!(ewc_penalty(&other, &[rec]), Err(Error::Contract(_))));
    }

    fn fisher_with_means(means: [f64; 3]) -> FisherEstimate {
        let mut values = BTreeMap::new();
        let mut groups = BTreeMap::new();
        for (g, m) in Group::ALL.iter().zip(means) {
            values.insert(g.to_string(), Arc::new(Tensor::from_vec(vec![m, m])));
            groups.insert(g.to_string(), *g);
        }
        FisherEstimate {
            values,
            groups,
            sample_count: 1,
        }
    }

    #[test]
    fn lambdas_from_group_means() {
        let l = adaptive_lambdas(&fisher_with_means([2.0, 1.0, 1.0]), 1.0);
        assert_eq!((l.visual, l.textual, l.cross_modal), (1.5, 0.75, 0.75));
        let l = adaptive_lambdas(&fisher_with_means([0.3, 0.3, 0.3]), 7.0);
        for g in Group::ALL {
            assert!((l.get(g) - 7.0).abs() < 1e-12);
        }
        let l = adaptive_lambdas(&fisher_with_means([0.0, 0.0, 0.0]), 4.0);
        assert_eq!(l, GroupLambdas::uniform(4.0));
    }

    #[test]
    fn empty_sample_source_is_input_error() {
        let s = ParamStore::new();
        let err = estimate_fisher_with(&s, 0, |g, _, _| Ok(g.constant(Tensor::scalar(0.0)))).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn constant_loss_has_zero_fisher() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![1.0, 2.0]), Group::Textual);
        let f = estimate_fisher_with(&s, 3, |g, _, _| Ok(g.constant(Tensor::scalar(2.0)))).unwrap();
        assert!(f.flat_values().all(|x| x == 0.0));
        assert_eq!(f.sample_count, 3);
    }

    #[test]
    fn one_parameter_linear_model() {
        // L_k = (w·x_k − y_k)², dL/dw = 2 x_k (w x_k − y_k)
        let samples = [(1.0, 3.0), (2.0, -1.0)];
        let w = 0.5;
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![w]), Group::Visual);
        let f = estimate_fisher_with(&s, 2, |g, v, k| {
            let (x, y) = samples[k];
            let xs = g.constant(Tensor::scalar(x));
            let ys = g.constant(Tensor::scalar(y));
            let p = g.mul(v["w"], xs)?;
            let r = g.sub(p, ys)?;
            let sq = g.mul(r, r)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        let g0: f64 = 2.0 * 1.0 * (0.5 - 3.0);
        let g1: f64 = 2.0 * 2.0 * (1.0 + 1.0);
        let expected = (g0 * g0 + g1 * g1) / 2.0;
        assert!((f.values["w"].item() - expected).abs() < 1e-12);
    }

    #[test]
    fn consistency_extreme_bound() {
        let mut g = Graph::new();
        let cur = g.constant(Tensor::full(&[3, 3], 1.0));
        let c = similarity_consistency(&mut g, cur, &Tensor::full(&[3, 3], -1.0)).unwrap();
        assert_eq!(g.value(c).item(), 2.0);
    }

    #[test]
    fn combined_on_first_task_is_task_loss() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::scalar(0.42));
        let c = combine_losses(&mut g, t, None, &[], 1.0).unwrap();
        assert_eq!(c, t);
    }

    #[test]
    fn combined_hand_case() {
        let (mut s, rec) = one_group_record(vec![1.0, 2.0], vec![0.0, 0.0], 0.5);
        s.get_mut("w").unwrap().value = Tensor::from_vec(vec![1.0, 1.0]);
        let beta = 0.25;
        let mut g = Graph::new();
        let vars = s.bind(&mut g, BindMode::Trainable);
        let task = g.constant(Tensor::scalar(0.7));
        let pen = ewc_penalty_var(&mut g, &vars, &[rec]).unwrap();
        let cur = g.constant(Tensor::full(&[2, 2], 1.0));
        let cons = similarity_consistency(&mut g, cur, &Tensor::full(&[2, 2], -1.0)).unwrap();
        let total = combine_losses(&mut g, task, Some(pen), &[cons], beta).unwrap();
        assert!((g.value(total).item() - (0.7 + 1.5 + beta * 2.0)).abs() < 1e-15);
        let no_cons = combine_losses(&mut g, task, Some(pen), &[cons], 0.0).unwrap();
        assert!((g.value(no_cons).item() - 2.2).abs() < 1e-15);
    }
}
