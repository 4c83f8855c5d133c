//! Low-rank adapters and hierarchical freezing.
//!
//! An adapter on host matrix `W` (`rows×cols`) adds trainable factors
//! `A` (`r×cols`) and `B` (`rows×r`); the forward pass uses
//! `W + (α/r)·B·A` while `W` stays frozen. `B` starts at zero, so attaching
//! an adapter does not change the model's outputs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{DualEncoder, TEXT_EMBED, VISUAL_B1, VISUAL_W1};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            rank: 6,
            alpha: 24.0,
            targets: Self::default_targets(),
        }
    }
}

impl AdapterSpec {
    /// The input layer of each encoder: first visual weight and token table.
    pub fn default_targets() -> Vec<String> {
        [VISUAL_W1, TEXT_EMBED].iter().map(|s| s.to_string()).collect()
    }
}

/// Bookkeeping for one attached adapter; the factors live in the parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    pub host: String,
    pub rank: usize,
    pub alpha: f64,
}

impl AdapterPair {
    pub fn a_name(&self) -> String {
        format!("adapter.{}.a", self.host)
    }

    pub fn b_name(&self) -> String {
        format!("adapter.{}.b", self.host)
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `W + (α/r)·B·A` in the graph.
    pub fn effective(&self, g: &mut Graph, base: Var, leaves: &BTreeMap<String, Var>) -> Result<Var> {
        let lookup = |n: String| {
            leaves
                .get(&n)
                .copied()
                .ok_or_else(|| Error::Contract(format!("adapter factor '{n}' is not bound")))
        };
        let a = lookup(self.a_name())?;
        let b = lookup(self.b_name())?;
        let ba = g.matmul(b, a)?;
        let ba = g.scale(ba, self.scaling());
        g.add(base, ba)
    }

    /// `(α/r)·B·A` as a plain tensor.
    pub fn delta(&self, params: &ParamStore) -> Result<Tensor> {
        let a = params.value(&self.a_name())?;
        let b = params.value(&self.b_name())?;
        Ok(b.matmul(a)?.map(|x| x * self.scaling()))
    }

    /// Create zero-`B` factors for `host` in `params` and freeze the host.
    pub fn attach(params: &mut ParamStore, host: &str, rank: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hp = params
            .get(host)
            .ok_or_else(|| Error::Parameter(format!("adapter target '{host}' does not exist")))?;
        if hp.value.shape().len() != 2 {
            return Err(Error::Parameter(format!("adapter target '{host}' is not a matrix")));
        }
        let (rows, cols) = (hp.value.rows(), hp.value.cols());
        if rank == 0 || rank > rows.min(cols) {
            return Err(Error::Parameter(format!(
                "adapter rank {rank} invalid for '{host}' ({rows}×{cols})"
            )));
        }
        let group = hp.group;
        let pair = AdapterPair {
            host: host.to_string(),
            rank,
            alpha,
        };
        let bound = 1.0 / (rank as f64).sqrt();
        let a: Vec<f64> = (0..rank * cols).map(|_| rng.random_range(-bound..bound)).collect();
        params.insert(pair.a_name(), Tensor::new(vec![rank, cols], a)?, group);
        params.insert(pair.b_name(), Tensor::zeros(&[rows, rank]), group);
        params.set_trainable(host, false)?;
        Ok(pair)
    }

    /// Fold the update into the host and drop the factors.
    pub fn merge_into(&self, params: &mut ParamStore) -> Result<()> {
        let delta = self.delta(params)?;
        let host = params
            .get_mut(&self.host)
            .ok_or_else(|| Error::Contract(format!("adapter host '{}' vanished", self.host)))?;
        for (w, d) in host.value.data_mut().iter_mut().zip(delta.data()) {
            *w += d;
        }
        params.remove(&self.a_name());
        params.remove(&self.b_name());
        Ok(())
    }
}

/// Attach adapters to every target of `spec`; targets become frozen, factors trainable.
pub fn attach_adapters(model: &mut DualEncoder, spec: &AdapterSpec, seed: u64) -> Result<()> {
    if !model.adapters.is_empty() {
        return Err(Error::Contract("adapters are already attached".into()));
    }
    let mask = model.params.trainable_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attached = BTreeMap::new();
    for host in &spec.targets {
        match AdapterPair::attach(&mut model.params, host, spec.rank, spec.alpha, &mut rng) {
            Ok(pair) => {
                attached.insert(host.clone(), pair);
            }
            Err(e) => {
                // roll back partial work
                for pair in attached.values() {
                    model.params.remove(&pair.a_name());
                    model.params.remove(&pair.b_name());
                }
                for (name, t) in &mask {
                    model.params.set_trainable(name, *t)?;
                }
                return Err(e);
            }
        }
    }
    model.adapters = attached;
    model.saved_mask = Some(mask);
    Ok(())
}

/// Bake `(α/r)·B·A` into the host weights, remove the adapters and restore
/// the trainable mask from before attachment.
pub fn merge_adapters(model: &mut DualEncoder) -> Result<()> {
    if model.adapters.is_empty() {
        return Err(Error::Contract("no adapters attached to merge".into()));
    }
    let adapters = std::mem::take(&mut model.adapters);
    for pair in adapters.values() {
        pair.merge_into(&mut model.params)?;
    }
    if let Some(mask) = model.saved_mask.take() {
        for (name, t) in mask {
            model.params.set_trainable(&name, t)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeLevel {
    None,
    Lower,
    AllButAdapters,
}

impl std::str::FromStr for FreezeLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FreezeLevel::None),
            "lower" => Ok(FreezeLevel::Lower),
            "all-but-adapters" | "all_but_adapters" => Ok(FreezeLevel::AllButAdapters),
            other => Err(Error::Parameter(format!("unknown freeze level '{other}'"))),
        }
    }
}

/// First layer of each stream.
pub const LOWER_LAYERS: [&str; 3] = [VISUAL_W1, VISUAL_B1, TEXT_EMBED];

/// Rewrite the trainable mask. Hosts of attached adapters stay frozen at every level.
pub fn freeze_hierarchy(model: &mut DualEncoder, level: FreezeLevel) -> Result<()> {
    let factor_names: Vec<String> = model.adapters.values().flat_map(|p| [p.a_name(), p.b_name()]).collect();
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in names {
        let is_factor = factor_names.contains(&name);
        let is_host = model.adapters.contains_key(&name);
        let trainable = match level {
            _ if is_host => false,
            FreezeLevel::None => true,
            FreezeLevel::Lower => !LOWER_LAYERS.contains(&name.as_str()),
            FreezeLevel::AllButAdapters => is_factor,
        };
        model.params.set_trainable(&name, trainable)?;
    }
    Ok(())
}
