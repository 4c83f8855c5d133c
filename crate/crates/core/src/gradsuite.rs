//! The finite-difference suite behind the `gradcheck` command: every graph
//! op, the contrastive loss, the EWC penalty, the consistency loss, the
//! combined objective and model forward passes with and without adapters.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::{attach_adapters, AdapterSpec};
use crate::autodiff::{Graph, Var};
use crate::encoder::{contrastive_loss_var, DualEncoder, ModelConfig, Pair, PROJ_V, TEXT_EMBED, VISUAL_W1};
use crate::error::Result;
use crate::gradcheck::check_gradient_in;
use crate::params::{Group, ParamStore};
use crate::regularize::{
    combined_loss, ewc_penalty_var, similarity_consistency, ConsolidationRecord, EncoderSnapshot, FisherEstimate,
    GroupLambdas, PenaltyWeights, ProbeSelection,
};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub component: String,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

type Loss = Box<dyn Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>>;

struct Case {
    component: String,
    params: ParamStore,
    loss: Loss,
}

/// Values in `±[lo, hi]`, away from the kinks of relu/abs at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    away_from_zero(rng, shape, 0.2, 1.5).map(f64::abs)
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(name, t, Group::Visual);
    }
    s
}

/// `Σ out ⊙ C` for a fixed coefficient tensor, so every output element matters.
fn reduce(g: &mut Graph, out: Var, coeffs: &Tensor) -> Result<Var> {
    let c = g.constant(coeffs.clone());
    let m = g.mul(out, c)?;
    Ok(g.sum(m))
}

fn op_case(
    name: &str,
    params: ParamStore,
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var> + 'static,
) -> Case {
    let coeffs = away_from_zero(rng, out_shape, 0.3, 1.0);
    Case {
        component: format!("op:{name}"),
        params,
        loss: Box::new(move |g, v| {
            let out = f(g, v)?;
            reduce(g, out, &coeffs)
        }),
    }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let m = |rng: &mut ChaCha8Rng, r: usize, c: usize| away_from_zero(rng, &[r, c], 0.1, 1.0);

    let p = store(vec![("a", m(rng, 3, 4)), ("b", m(rng, 3, 4))]);
    cases.push(op_case("add", p.clone(), &[3, 4], rng, |g, v| g.add(v["a"], v["b"])));
    cases.push(op_case("sub", p.clone(), &[3, 4], rng, |g, v| g.sub(v["a"], v["b"])));
    cases.push(op_case("mul", p.clone(), &[3, 4], rng, |g, v| g.mul(v["a"], v["b"])));
    cases.push(op_case("scale", p.clone(), &[3, 4], rng, |g, v| {
        Ok(g.scale(v["a"], -1.7))
    }));
    cases.push(op_case("matmul_t", p, &[3, 3], rng, |g, v| g.matmul_t(v["a"], v["b"])));

    let p = store(vec![("a", m(rng, 3, 4)), ("b", m(rng, 4, 2))]);
    cases.push(op_case("matmul", p, &[3, 2], rng, |g, v| g.matmul(v["a"], v["b"])));

    let p = store(vec![("a", m(rng, 3, 4)), ("bias", away_from_zero(rng, &[4], 0.1, 1.0))]);
    cases.push(op_case("transpose", p.clone(), &[4, 3], rng, |g, v| {
        g.transpose(v["a"])
    }));
    cases.push(op_case("add_bias", p, &[3, 4], rng, |g, v| {
        g.add_bias(v["a"], v["bias"])
    }));

    let p = store(vec![("a", m(rng, 3, 4))]);
    cases.push(Case {
        component: "op:sum".into(),
        params: p.clone(),
        loss: Box::new(|g, v| {
            let sq = g.mul(v["a"], v["a"])?;
            Ok(g.sum(sq))
        }),
    });
    cases.push(Case {
        component: "op:mean".into(),
        params: p.clone(),
        loss: Box::new(|g, v| {
            let sq = g.mul(v["a"], v["a"])?;
            Ok(g.mean(sq))
        }),
    });
    cases.push(op_case("relu", p.clone(), &[3, 4], rng, |g, v| Ok(g.relu(v["a"]))));
    cases.push(op_case("tanh", p.clone(), &[3, 4], rng, |g, v| Ok(g.tanh(v["a"]))));
    cases.push(op_case("exp", p.clone(), &[3, 4], rng, |g, v| Ok(g.exp(v["a"]))));
    cases.push(op_case("abs", p.clone(), &[3, 4], rng, |g, v| Ok(g.abs(v["a"]))));
    cases.push(op_case(
        "softmax",
        p.clone(),
        &[3, 4],
        rng,
        |g, v| Ok(g.softmax(v["a"])),
    ));
    cases.push(op_case("log_softmax", p.clone(), &[3, 4], rng, |g, v| {
        Ok(g.log_softmax(v["a"]))
    }));
    cases.push(op_case("l2_normalize", p.clone(), &[3, 4], rng, |g, v| {
        Ok(g.l2_normalize(v["a"]))
    }));
    cases.push(op_case("select", p, &[], rng, |g, v| g.select(v["a"], 5)));

    let p = store(vec![("a", positive(rng, &[3, 4]))]);
    cases.push(op_case("log", p, &[3, 4], rng, |g, v| Ok(g.log(v["a"]))));

    // bounds sit between the magnitude bands so no value is near a kink
    let p = store(vec![
        ("a", away_from_zero(rng, &[3, 4], 0.1, 0.4)),
        ("b", away_from_zero(rng, &[3, 4], 0.6, 1.0)),
    ]);
    cases.push(op_case("clamp", p, &[3, 4], rng, |g, v| {
        let s = g.add(v["a"], v["b"])?;
        let s = g.scale(s, 0.5);
        Ok(g.clamp(s, -0.45, 0.45))
    }));

    let p = store(vec![("a", m(rng, 2, 3)), ("b", m(rng, 3, 3))]);
    cases.push(op_case("concat", p.clone(), &[5, 3], rng, |g, v| {
        g.concat(&[v["a"], v["b"]])
    }));
    cases.push(op_case("diag", p, &[3], rng, |g, v| g.diag(v["b"])));

    let p = store(vec![("table", m(rng, 6, 3))]);
    cases.push(op_case("embedding_mean", p, &[3, 3], rng, |g, v| {
        g.embedding_mean(v["table"], vec![vec![0, 2, 2], vec![5], vec![1, 3, 4, 0]])
    }));

    let anchor = Arc::new(m(rng, 3, 4));
    let weight = Arc::new(positive(rng, &[3, 4]));
    let p = store(vec![("a", m(rng, 3, 4))]);
    cases.push(Case {
        component: "op:weighted_sq_dist".into(),
        params: p,
        loss: Box::new(move |g, v| g.weighted_sq_dist(v["a"], anchor.clone(), weight.clone(), 0.7)),
    });
    cases
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_v: 5,
        vocab: 9,
        max_len: 4,
        d_h: 6,
        d_e: 4,
        temperature: 0.3,
        seed: 11,
    }
}

fn tiny_pairs(rng: &mut ChaCha8Rng, config: &ModelConfig, n: usize) -> Vec<Pair> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=config.max_len);
            Pair {
                image: (0..config.d_v).map(|_| rng.random_range(-1.0..1.0)).collect(),
                caption: (0..len).map(|_| rng.random_range(0..config.vocab)).collect(),
                task_id: "A".into(),
            }
        })
        .collect()
}

fn component_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases = Vec::new();

    let p = {
        let mut s = store(vec![
            ("v", away_from_zero(rng, &[5, 3], 0.1, 1.0)),
            ("t", away_from_zero(rng, &[5, 3], 0.1, 1.0)),
        ]);
        s.insert("inv_tau", Tensor::scalar(2.5), Group::CrossModal);
        s
    };
    cases.push(Case {
        component: "contrastive_loss".into(),
        params: p,
        loss: Box::new(|g, v| {
            let a = g.l2_normalize(v["v"]);
            let b = g.l2_normalize(v["t"]);
            contrastive_loss_var(g, a, b, v["inv_tau"])
        }),
    });

    let mut p = ParamStore::new();
    p.insert("vis", away_from_zero(rng, &[3, 2], 0.1, 1.0), Group::Visual);
    p.insert("txt", away_from_zero(rng, &[4], 0.1, 1.0), Group::Textual);
    p.insert("cross", away_from_zero(rng, &[2, 2], 0.1, 1.0), Group::CrossModal);
    let fisher = FisherEstimate {
        values: p
            .iter()
            .map(|(n, q)| (n.clone(), Arc::new(positive(rng, q.value.shape()))))
            .collect(),
        groups: p.iter().map(|(n, q)| (n.clone(), q.group)).collect(),
        sample_count: 1,
    };
    let mut anchored = p.clone();
    for (_, q) in anchored.iter_mut() {
        q.value = q.value.map(|x| x - 0.3);
    }
    let lambdas = GroupLambdas {
        visual: 1.5,
        textual: 0.75,
        cross_modal: 0.75,
    };
    let records = vec![
        ConsolidationRecord::new("A", &anchored, fisher.clone(), PenaltyWeights::PerGroup(lambdas))?,
        ConsolidationRecord::new("B", &p, fisher, PenaltyWeights::Whole(2.0))?,
    ];
    cases.push(Case {
        component: "ewc_penalty".into(),
        params: p,
        loss: Box::new(move |g, v| ewc_penalty_var(g, v, &records)),
    });

    let old = away_from_zero(rng, &[4, 4], 0.3, 0.9);
    let p = store(vec![
        ("v", away_from_zero(rng, &[4, 3], 0.1, 1.0)),
        ("t", away_from_zero(rng, &[4, 3], 0.1, 1.0)),
    ]);
    cases.push(Case {
        component: "consistency_loss".into(),
        params: p,
        loss: Box::new(move |g, v| {
            let a = g.l2_normalize(v["v"]);
            let b = g.l2_normalize(v["t"]);
            let s = g.matmul_t(a, b)?;
            similarity_consistency(g, s, &old)
        }),
    });

    let config = tiny_config();
    let pairs = tiny_pairs(rng, &config, 6);
    let model = DualEncoder::new(config.clone())?;
    let fwd = model.clone();
    let batch = pairs.clone();
    cases.push(Case {
        component: "model_forward".into(),
        params: model.params.clone(),
        loss: Box::new(move |g, v| {
            let b = fwd.bind_leaves(g, v.clone())?;
            fwd.batch_loss(g, &b, &batch)
        }),
    });

    let mut moved = model.clone();
    let fisher = FisherEstimate {
        values: model
            .params
            .iter()
            .map(|(n, q)| (n.clone(), Arc::new(positive(rng, q.value.shape()))))
            .collect(),
        groups: model.params.iter().map(|(n, q)| (n.clone(), q.group)).collect(),
        sample_count: 1,
    };
    let record = ConsolidationRecord::new("A", &model.params, fisher, PenaltyWeights::PerGroup(lambdas))?;
    let snapshot = EncoderSnapshot::capture(&model, pairs[..4].to_vec(), "A")?;
    for (_, q) in moved.params.iter_mut() {
        let noise = away_from_zero(rng, q.value.shape(), 0.05, 0.2);
        q.value = Tensor::new(
            q.value.shape().to_vec(),
            q.value.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect(),
        )?;
    }
    let fwd = moved.clone();
    let batch = pairs.clone();
    cases.push(Case {
        component: "combined_loss".into(),
        params: moved.params.clone(),
        loss: Box::new(move |g, v| {
            let b = fwd.bind_leaves(g, v.clone())?;
            let task = fwd.batch_loss(g, &b, &batch)?;
            combined_loss(
                g,
                &fwd,
                &b,
                task,
                std::slice::from_ref(&record),
                std::slice::from_ref(&snapshot),
                0.7,
                ProbeSelection::Full,
            )
        }),
    });

    let mut adapted = model;
    let spec = AdapterSpec {
        rank: 2,
        alpha: 3.0,
        targets: vec![VISUAL_W1.into(), TEXT_EMBED.into(), PROJ_V.into()],
    };
    attach_adapters(&mut adapted, &spec, 5)?;
    // zero-initialized B would hide errors in the A path
    let b_names: Vec<String> = adapted.adapters.values().map(|a| a.b_name()).collect();
    for name in b_names {
        let p = adapted.params.get_mut(&name).expect("attached");
        p.value = away_from_zero(rng, p.value.shape(), 0.1, 0.5);
    }
    let fwd = adapted.clone();
    cases.push(Case {
        component: "adapter_forward".into(),
        params: adapted.params.clone(),
        loss: Box::new(move |g, v| {
            let b = fwd.bind_leaves(g, v.clone())?;
            fwd.batch_loss(g, &b, &pairs)
        }),
    });
    Ok(cases)
}

/// Run every case, building analytic graphs with `make_graph`.
pub fn run_suite_with(make_graph: impl Fn() -> Graph) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a09e667);
    let mut cases = op_cases(&mut rng);
    cases.extend(component_cases(&mut rng)?);
    cases
        .into_iter()
        .map(|c| {
            let r = check_gradient_in(&make_graph, &c.loss, &c.params, STEP)?;
            Ok(SuiteEntry {
                component: c.component,
                max_rel_error: r.max_rel_error,
                worst_param: r.worst_param,
            })
        })
        .collect()
}

pub fn run_suite() -> Result<Vec<SuiteEntry>> {
    run_suite_with(Graph::new)
}
