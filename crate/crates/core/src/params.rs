//! Named parameters, modality groups and the plain gradient-descent step.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Modality group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Visual,
    Textual,
    CrossModal,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Visual, Group::Textual, Group::CrossModal];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Visual => "visual",
            Group::Textual => "textual",
            Group::CrossModal => "cross_modal",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(Group::Visual),
            "textual" => Ok(Group::Textual),
            "cross_modal" => Ok(Group::CrossModal),
            other => Err(Error::Parameter(format!("unknown group '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub group: Group,
    pub trainable: bool,
}

/// Which parameters become differentiable leaves when a store is bound to a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Only parameters whose trainable flag is set.
    Trainable,
    /// Every parameter, regardless of the mask (Fisher estimation, gradient checks).
    All,
    /// No parameter; inference only.
    Frozen,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: Group) {
        self.params.insert(
            name.into(),
            Param {
                value,
                group,
                trainable: true,
            },
        );
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("no parameter named '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::Contract(format!("no parameter named '{name}'")))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn trainable_mask(&self) -> BTreeMap<String, bool> {
        self.params.iter().map(|(k, p)| (k.clone(), p.trainable)).collect()
    }

    /// Plain value copy of every parameter.
    pub fn values(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|(k, p)| (k.clone(), p.value.clone())).collect()
    }

    /// Record every parameter as a named leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph, mode: BindMode) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, p)| {
                let rg = match mode {
                    BindMode::Trainable => p.trainable,
                    BindMode::All => true,
                    BindMode::Frozen => false,
                };
                (name.clone(), graph.param(name, p.value.clone(), rg))
            })
            .collect()
    }
}

/// One plain gradient-descent step on every trainable parameter:
/// `θ ← θ − lr·(g + weight_decay·(θ − θ_ref))`, where `θ_ref` comes from
/// `reference` (the previous-task anchor) or is zero when absent.
/// Frozen parameters are left untouched even if a gradient is supplied.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    weight_decay: f64,
    reference: Option<&BTreeMap<String, Tensor>>,
) -> Result<()> {
    if !(lr >= 0.0) || !(weight_decay >= 0.0) {
        return Err(Error::Parameter(format!(
            "sgd_step needs lr >= 0 and weight_decay >= 0 (got {lr}, {weight_decay})"
        )));
    }
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing gradient for trainable parameter '{name}'")))?;
        if g.shape() != p.value.shape() {
            return Err(Error::dim("sgd_step", p.value.shape(), g.shape()));
        }
        let anchor = reference.and_then(|r| r.get(name));
        let theta = p.value.data_mut();
        match (weight_decay > 0.0, anchor) {
            (false, _) => {
                for (t, &gi) in theta.iter_mut().zip(g.data()) {
                    *t -= lr * gi;
                }
            }
            (true, Some(a)) => {
                for ((t, &gi), &ai) in theta.iter_mut().zip(g.data()).zip(a.data()) {
                    *t -= lr * (gi + weight_decay * (*t - ai));
                }
            }
            (true, None) => {
                for (t, &gi) in theta.iter_mut().zip(g.data()) {
                    *t -= lr * (gi + weight_decay * *t);
                }
            }
        }
    }
    Ok(())
}
