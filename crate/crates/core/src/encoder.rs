//! Toy dual encoder: a visual MLP and a bag-of-tokens text encoder projected
//! into a shared unit-norm embedding space, trained with symmetric InfoNCE.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::AdapterPair;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{BindMode, Group, ParamStore};
use crate::tensor::Tensor;

pub const VISUAL_W1: &str = "visual.w1";
pub const VISUAL_B1: &str = "visual.b1";
pub const VISUAL_W2: &str = "visual.w2";
pub const VISUAL_B2: &str = "visual.b2";
pub const TEXT_EMBED: &str = "text.embed";
pub const TEXT_W: &str = "text.w";
pub const TEXT_B: &str = "text.b";
pub const PROJ_V: &str = "cross.proj_v";
pub const PROJ_T: &str = "cross.proj_t";
pub const LOG_TAU: &str = "cross.log_tau";

/// Bounds on the learnable temperature.
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_v: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub d_h: usize,
    pub d_e: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v: 64,
            vocab: 256,
            max_len: 16,
            d_h: 64,
            d_e: 32,
            temperature: 0.07,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("model.d_v", self.d_v),
            ("model.vocab", self.vocab),
            ("model.max_len", self.max_len),
            ("model.d_h", self.d_h),
            ("model.d_e", self.d_e),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        if !(self.temperature > 0.0) {
            problems.push(format!("model.temperature must be > 0 (got {})", self.temperature));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// One image-caption pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub image: Vec<f64>,
    pub caption: Vec<usize>,
    pub task_id: String,
}

impl Pair {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.image.len() != config.d_v {
            return Err(Error::dim("pair.image", &[self.image.len()], &[config.d_v]));
        }
        if self.caption.is_empty() || self.caption.len() > config.max_len {
            return Err(Error::dim("pair.caption", &[self.caption.len()], &[config.max_len]));
        }
        if let Some(&t) = self.caption.iter().find(|&&t| t >= config.vocab) {
            return Err(Error::Input(format!("token {t} >= vocab {}", config.vocab)));
        }
        Ok(())
    }
}

pub fn images_tensor(pairs: &[Pair]) -> Result<Tensor> {
    let d = pairs.first().map_or(0, |p| p.image.len());
    let mut data = Vec::with_capacity(pairs.len() * d);
    for p in pairs {
        if p.image.len() != d {
            return Err(Error::dim("images", &[p.image.len()], &[d]));
        }
        data.extend_from_slice(&p.image);
    }
    Tensor::new(vec![pairs.len(), d], data)
}

pub fn captions(pairs: &[Pair]) -> Vec<Vec<usize>> {
    pairs.iter().map(|p| p.caption.clone()).collect()
}

/// Graph handles for one forward pass.
///
/// `effective` maps every base parameter name to the weight actually used by
/// the forward pass: the leaf itself, or `W + (α/r)·B·A` when an adapter is
/// attached to it.
#[derive(Debug, Clone)]
pub struct Bound {
    pub leaves: BTreeMap<String, Var>,
    pub effective: BTreeMap<String, Var>,
}

impl Bound {
    fn get(&self, name: &str) -> Var {
        self.effective[name]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEncoder {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Attached adapters keyed by host matrix name.
    pub adapters: BTreeMap<String, AdapterPair>,
    /// Trainable mask from before adapters were attached.
    pub saved_mask: Option<BTreeMap<String, bool>>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

impl DualEncoder {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let ModelConfig {
            d_v, vocab, d_h, d_e, ..
        } = config;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let mut params = ParamStore::new();
        params.insert(VISUAL_W1, uniform(&mut rng, &[d_v, d_h], fan(d_v)), Group::Visual);
        params.insert(VISUAL_B1, uniform(&mut rng, &[d_h], fan(d_v)), Group::Visual);
        params.insert(VISUAL_W2, uniform(&mut rng, &[d_h, d_h], fan(d_h)), Group::Visual);
        params.insert(VISUAL_B2, uniform(&mut rng, &[d_h], fan(d_h)), Group::Visual);
        // an embedding row is a lookup (fan-in 1)
        params.insert(TEXT_EMBED, uniform(&mut rng, &[vocab, d_h], 1.0), Group::Textual);
        params.insert(TEXT_W, uniform(&mut rng, &[d_h, d_h], fan(d_h)), Group::Textual);
        params.insert(TEXT_B, uniform(&mut rng, &[d_h], fan(d_h)), Group::Textual);
        params.insert(PROJ_V, uniform(&mut rng, &[d_h, d_e], fan(d_h)), Group::CrossModal);
        params.insert(PROJ_T, uniform(&mut rng, &[d_h, d_e], fan(d_h)), Group::CrossModal);
        let log_tau = config.temperature.clamp(TAU_MIN, TAU_MAX).ln();
        params.insert(LOG_TAU, Tensor::scalar(log_tau), Group::CrossModal);
        Ok(Self {
            config,
            params,
            adapters: BTreeMap::new(),
            saved_mask: None,
        })
    }

    /// Names of the base (non-adapter) parameters.
    pub fn base_names() -> [&'static str; 10] {
        [
            VISUAL_W1, VISUAL_B1, VISUAL_W2, VISUAL_B2, TEXT_EMBED, TEXT_W, TEXT_B, PROJ_V, PROJ_T, LOG_TAU,
        ]
    }

    pub fn group_of(&self, name: &str) -> Option<Group> {
        self.params.get(name).map(|p| p.group)
    }

    pub fn temperature(&self) -> f64 {
        let lt = self.params.value(LOG_TAU).map(|t| t.item()).unwrap_or(0.0);
        lt.clamp(TAU_MIN.ln(), TAU_MAX.ln()).exp()
    }

    pub fn bind(&self, g: &mut Graph, mode: BindMode) -> Result<Bound> {
        let leaves = self.params.bind(g, mode);
        self.bind_leaves(g, leaves)
    }

    /// Build the forward handles from leaves already placed in `g`.
    pub fn bind_leaves(&self, g: &mut Graph, leaves: BTreeMap<String, Var>) -> Result<Bound> {
        let mut effective = BTreeMap::new();
        for name in Self::base_names() {
            let base = *leaves
                .get(name)
                .ok_or_else(|| Error::Contract(format!("model is missing '{name}'")))?;
            let w = match self.adapters.get(name) {
                Some(ad) => ad.effective(g, base, &leaves)?,
                None => base,
            };
            effective.insert(name.to_string(), w);
        }
        Ok(Bound { leaves, effective })
    }

    fn dense(&self, g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let z = g.matmul(x, w)?;
        let z = g.add_bias(z, b)?;
        Ok(g.tanh(z))
    }

    /// Unit-norm image embeddings `N×d_e`.
    pub fn visual_forward(&self, g: &mut Graph, b: &Bound, images: &Tensor) -> Result<Var> {
        if images.shape().len() != 2 || images.cols() != self.config.d_v || images.rows() == 0 {
            return Err(Error::dim("embed_visual", images.shape(), &[self.config.d_v]));
        }
        let x = g.constant(images.clone());
        let h = self.dense(g, x, b.get(VISUAL_W1), b.get(VISUAL_B1))?;
        let h = self.dense(g, h, b.get(VISUAL_W2), b.get(VISUAL_B2))?;
        let z = g.matmul(h, b.get(PROJ_V))?;
        Ok(g.l2_normalize(z))
    }

    /// Unit-norm caption embeddings `N×d_e`; tokens are mean-pooled.
    pub fn text_forward(&self, g: &mut Graph, b: &Bound, captions: &[Vec<usize>]) -> Result<Var> {
        if captions.is_empty() {
            return Err(Error::dim("embed_text", &[0], &[self.config.max_len]));
        }
        for c in captions {
            if c.is_empty() || c.len() > self.config.max_len {
                return Err(Error::dim("embed_text", &[c.len()], &[self.config.max_len]));
            }
        }
        let pooled = g.embedding_mean(b.get(TEXT_EMBED), captions.to_vec())?;
        let h = self.dense(g, pooled, b.get(TEXT_W), b.get(TEXT_B))?;
        let z = g.matmul(h, b.get(PROJ_T))?;
        Ok(g.l2_normalize(z))
    }

    /// `1/τ` with τ clamped to `[TAU_MIN, TAU_MAX]`.
    pub fn inverse_temperature(&self, g: &mut Graph, b: &Bound) -> Var {
        let lt = g.clamp(b.get(LOG_TAU), TAU_MIN.ln(), TAU_MAX.ln());
        let neg = g.scale(lt, -1.0);
        g.exp(neg)
    }

    /// Task loss on a batch of pairs.
    pub fn batch_loss(&self, g: &mut Graph, b: &Bound, pairs: &[Pair]) -> Result<Var> {
        let v = self.visual_forward(g, b, &images_tensor(pairs)?)?;
        let t = self.text_forward(g, b, &captions(pairs))?;
        let inv_tau = self.inverse_temperature(g, b);
        contrastive_loss_var(g, v, t, inv_tau)
    }

    pub fn embed_visual(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, BindMode::Frozen)?;
        let v = self.visual_forward(&mut g, &b, images)?;
        Ok(g.value(v).clone())
    }

    pub fn embed_text(&self, captions: &[Vec<usize>]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, BindMode::Frozen)?;
        let t = self.text_forward(&mut g, &b, captions)?;
        Ok(g.value(t).clone())
    }

    pub fn embed_pairs(&self, pairs: &[Pair]) -> Result<(Tensor, Tensor)> {
        Ok((
            self.embed_visual(&images_tensor(pairs)?)?,
            self.embed_text(&captions(pairs))?,
        ))
    }
}

/// `S[i][j] = V_i · T_j` for unit-norm rows.
pub fn similarity_matrix(v: &Tensor, t: &Tensor) -> Result<Tensor> {
    if v.shape().len() != 2 || t.shape().len() != 2 || v.cols() != t.cols() {
        return Err(Error::dim("similarity_matrix", v.shape(), t.shape()));
    }
    let mut g = Graph::new();
    let a = g.constant(v.clone());
    let b = g.constant(t.clone());
    let s = g.matmul_t(a, b)?;
    Ok(g.value(s).clone())
}

/// Per-pair symmetric InfoNCE terms `½(CE_row_i + CE_col_i)`; their mean is the batch loss.
pub fn contrastive_terms_var(g: &mut Graph, v: Var, t: Var, inv_tau: Var) -> Result<Var> {
    let (nv, nt) = (g.value(v).rows(), g.value(t).rows());
    if nv != nt {
        return Err(Error::dim("contrastive_loss", g.value(v).shape(), g.value(t).shape()));
    }
    let s = g.matmul_t(v, t)?;
    let logits = g.mul(s, inv_tau)?;
    let rows = g.log_softmax(logits);
    let lt = g.transpose(logits)?;
    let cols = g.log_softmax(lt);
    let dr = g.diag(rows)?;
    let dc = g.diag(cols)?;
    let both = g.add(dr, dc)?;
    Ok(g.scale(both, -0.5))
}

pub fn contrastive_loss_var(g: &mut Graph, v: Var, t: Var, inv_tau: Var) -> Result<Var> {
    let terms = contrastive_terms_var(g, v, t, inv_tau)?;
    Ok(g.mean(terms))
}

/// Symmetric image↔text cross-entropy over `S/τ` with diagonal targets.
pub fn contrastive_loss(v: &Tensor, t: &Tensor, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    if v.rows() == 0 {
        return Err(Error::dim("contrastive_loss", v.shape(), t.shape()));
    }
    if v.shape().len() != 2 || t.shape().len() != 2 || v.cols() != t.cols() {
        return Err(Error::dim("contrastive_loss", v.shape(), t.shape()));
    }
    let mut g = Graph::new();
    let a = g.constant(v.clone());
    let b = g.constant(t.clone());
    let inv = g.constant(Tensor::scalar(1.0 / tau));
    let l = contrastive_loss_var(&mut g, a, b, inv)?;
    Ok(g.value(l).item())
}
