#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use modalanchor_core::adapt::{attach_adapters, merge_adapters, AdapterSpec};
use modalanchor_core::autodiff::Graph;
use modalanchor_core::encoder::{contrastive_terms_var, DualEncoder, ModelConfig, Pair, PROJ_T, TEXT_W, VISUAL_W2};
use modalanchor_core::gradsuite;
use modalanchor_core::metrics::{self, pca_project};
use modalanchor_core::params::{BindMode, Group, ParamStore};
use modalanchor_core::regularize::{
    estimate_fisher, estimate_fisher_with, ewc_penalty, similarity_consistency, ConsolidationRecord, FisherEstimate,
    PenaltyWeights,
};
use modalanchor_core::taskgen::StreamTemplate;
use modalanchor_core::tensor::Tensor;
use modalanchor_core::trainer::TrainConfig;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_v: 3,
        vocab: 5,
        max_len: 3,
        d_h: 2,
        d_e: 2,
        temperature: 0.5,
        seed: 3,
    }
}

pub fn random_pairs(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize) -> Vec<Pair> {
    (0..n)
        .map(|_| Pair {
            image: (0..cfg.d_v).map(|_| rng.random_range(-1.0..1.0)).collect(),
            caption: (0..cfg.max_len).map(|_| rng.random_range(0..cfg.vocab)).collect(),
            task_id: "A".into(),
        })
        .collect()
}

/// A short 2-task stream and budget for trainer tests.
pub fn small_setup() -> (StreamTemplate, TrainConfig) {
    let template = StreamTemplate {
        n_train: vec![400, 400],
        n_eval: 128,
        ..StreamTemplate::default()
    };
    let config = TrainConfig {
        epochs: 2,
        n_fisher: 64,
        probe_size: 32,
        ..TrainConfig::default()
    };
    (template, config)
}

type SampleLoss = Box<dyn Fn(&ParamStore) -> f64>;

fn central(f: &dyn Fn(&ParamStore) -> f64, params: &ParamStore, step: f64) -> BTreeMap<String, Vec<f64>> {
    let mut probe = params.clone();
    let mut out = BTreeMap::new();
    for (name, p) in params.iter() {
        let mut g = Vec::with_capacity(p.value.len());
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            probe.get_mut(name).unwrap().value.data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.get_mut(name).unwrap().value.data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.get_mut(name).unwrap().value.data_mut()[i] = orig;
            g.push((up - down) / (2.0 * step));
        }
        out.insert(name.clone(), g);
    }
    out
}

fn fd_fisher(per_sample: &[SampleLoss], params: &ParamStore) -> BTreeMap<String, Vec<f64>> {
    let mut sums: BTreeMap<String, Vec<f64>> = params
        .iter()
        .map(|(n, p)| (n.clone(), vec![0.0; p.value.len()]))
        .collect();
    for f in per_sample {
        for (name, g) in central(f.as_ref(), params, 1e-6) {
            for (s, gi) in sums.get_mut(&name).unwrap().iter_mut().zip(g) {
                *s += gi * gi;
            }
        }
    }
    let n = per_sample.len() as f64;
    sums.into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|x| x / n).collect()))
        .collect()
}

fn max_fisher_diff(est: &FisherEstimate, oracle: &BTreeMap<String, Vec<f64>>) -> f64 {
    oracle
        .iter()
        .flat_map(|(name, o)| {
            est.values[name]
                .data()
                .iter()
                .zip(o)
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Max |estimate − oracle| on an 8-parameter regression model, where the
/// oracle squares central-difference gradients of a plain-f64 loss.
pub fn fisher_small_model_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut params = ParamStore::new();
    let mut r = |n: usize| Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    params.insert("w", Tensor::new(vec![2, 2], r(4).into_data()).unwrap(), Group::Visual);
    params.insert("b", r(2), Group::Textual);
    params.insert(
        "c",
        Tensor::new(vec![1, 2], r(2).into_data()).unwrap(),
        Group::CrossModal,
    );
    let xs: Vec<([f64; 2], f64)> = (0..7)
        .map(|i| {
            let t = i as f64;
            ([(0.7 * t).sin(), (1.3 * t).cos()], 0.3 * t - 1.0)
        })
        .collect();
    assert!(params.scalar_count() <= 10);

    let est = estimate_fisher_with(&params, xs.len(), |g, v, i| {
        let (x, y) = xs[i];
        let xv = g.constant(Tensor::new(vec![1, 2], x.to_vec()).unwrap());
        let h = g.matmul(xv, v["w"])?;
        let h = g.add_bias(h, v["b"])?;
        let h = g.tanh(h);
        let out = g.mul(h, v["c"])?;
        let out = g.sum(out);
        let yv = g.constant(Tensor::scalar(y));
        let d = g.sub(out, yv)?;
        g.mul(d, d)
    })
    .unwrap();

    let per_sample: Vec<SampleLoss> = xs
        .iter()
        .map(|&(x, y)| {
            Box::new(move |p: &ParamStore| {
                let w = p.value("w").unwrap().data();
                let b = p.value("b").unwrap().data();
                let c = p.value("c").unwrap().data();
                let h0 = (x[0] * w[0] + x[1] * w[2] + b[0]).tanh();
                let h1 = (x[0] * w[1] + x[1] * w[3] + b[1]).tanh();
                let d = h0 * c[0] + h1 * c[1] - y;
                d * d
            }) as SampleLoss
        })
        .collect();
    max_fisher_diff(&est, &fd_fisher(&per_sample, &params))
}

/// Max |estimate − oracle| for the contrastive Fisher of a tiny dual encoder.
pub fn fisher_encoder_error() -> f64 {
    let cfg = tiny_model_config();
    let model = DualEncoder::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = random_pairs(&mut rng, &cfg, 6);
    let context = 3;
    let est = estimate_fisher(&model, &data, 6, context).unwrap();

    let mut per_sample: Vec<SampleLoss> = Vec::new();
    for chunk in data.chunks(context) {
        for i in 0..chunk.len() {
            let chunk = chunk.to_vec();
            let base = model.clone();
            per_sample.push(Box::new(move |p: &ParamStore| {
                let mut m = base.clone();
                m.params = p.clone();
                let mut g = Graph::new();
                let b = m.bind(&mut g, BindMode::Frozen).unwrap();
                let imgs = Tensor::from_rows(&chunk.iter().map(|q| q.image.clone()).collect::<Vec<_>>()).unwrap();
                let caps: Vec<Vec<usize>> = chunk.iter().map(|q| q.caption.clone()).collect();
                let v = m.visual_forward(&mut g, &b, &imgs).unwrap();
                let t = m.text_forward(&mut g, &b, &caps).unwrap();
                let it = m.inverse_temperature(&mut g, &b);
                let terms = contrastive_terms_var(&mut g, v, t, it).unwrap();
                g.value(terms).data()[i]
            }));
        }
    }
    max_fisher_diff(&est, &fd_fisher(&per_sample, &model.params))
}

/// Max coordinate difference between `pca_project` and a dense symmetric
/// eigendecomposition of the covariance, for a random 20×8 matrix.
pub fn pca_oracle_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (20, 8);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..d)
                .map(|j| rng.random_range(-1.0..1.0) * (1.0 + j as f64 * 0.5))
                .collect()
        })
        .collect();
    let x = Tensor::from_rows(&rows).unwrap();
    let got = pca_project(&x, 2).unwrap();

    let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let total: f64 = eig.eigenvalues.iter().sum();
    let mut worst: f64 = 0.0;
    for (c, &k) in order.iter().take(2).enumerate() {
        let mut vec = eig.eigenvectors.column(k).into_owned();
        let big = (0..d)
            .max_by(|&a, &b| vec[a].abs().partial_cmp(&vec[b].abs()).unwrap())
            .unwrap();
        if vec[big] < 0.0 {
            vec = -vec;
        }
        let proj = &centered * &vec;
        for i in 0..n {
            worst = worst.max((proj[i] - got.coords.at(i, c)).abs());
        }
        worst = worst.max((eig.eigenvalues[k] / total - got.explained[c]).abs());
    }
    worst
}

/// Single group, F = [1, 2], θ* = 0, θ = 1, λ = 0.5.
pub fn penalty_hand_case() -> f64 {
    let mut params = ParamStore::new();
    params.insert("p", Tensor::from_vec(vec![0.0, 0.0]), Group::Visual);
    let fisher = FisherEstimate {
        values: [("p".to_string(), Arc::new(Tensor::from_vec(vec![1.0, 2.0])))].into(),
        groups: [("p".to_string(), Group::Visual)].into(),
        sample_count: 1,
    };
    let rec = ConsolidationRecord::new("A", &params, fisher, PenaltyWeights::Whole(0.5)).unwrap();
    params.get_mut("p").unwrap().value = Tensor::from_vec(vec![1.0, 1.0]);
    ewc_penalty(&params, &[rec]).unwrap()
}

/// 2-pair case: V = I, T = [[1,0],[0.6,0.8]] now against S_old = I; returns (loss, hand value).
pub fn consistency_hand_case() -> (f64, f64) {
    let mut g = Graph::new();
    let v = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let t = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap());
    let s = g.matmul_t(v, t).unwrap();
    let old = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let l = similarity_consistency(&mut g, s, &old).unwrap();
    // S_now = [[1, 0.6], [0, 0.8]]; |S_now − I| = [0, 0.6, 0, 0.2]
    (g.value(l).item(), (0.0 + 0.6 + 0.0 + 0.2) / 4.0)
}

/// (attach transparency, merge identity) max abs output differences.
pub fn adapter_identity_errors() -> (f64, f64) {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pairs = random_pairs(&mut rng, &cfg, 16);
    let base = DualEncoder::new(cfg).unwrap();
    let (v0, t0) = base.embed_pairs(&pairs).unwrap();

    let mut m = base.clone();
    let spec = AdapterSpec {
        rank: 4,
        alpha: 8.0,
        targets: vec![VISUAL_W2.into(), TEXT_W.into(), PROJ_T.into()],
    };
    attach_adapters(&mut m, &spec, 1).unwrap();
    let (v1, t1) = m.embed_pairs(&pairs).unwrap();
    let transparency = v0.max_abs_diff(&v1).max(t0.max_abs_diff(&t1));

    let names: Vec<String> = m.adapters.values().map(|a| a.b_name()).collect();
    for n in names {
        let p = m.params.get_mut(&n).unwrap();
        for x in p.value.data_mut() {
            *x = rng.random_range(-0.3..0.3);
        }
    }
    let (va, ta) = m.embed_pairs(&pairs).unwrap();
    merge_adapters(&mut m).unwrap();
    let (vm, tm) = m.embed_pairs(&pairs).unwrap();
    (transparency, va.max_abs_diff(&vm).max(ta.max_abs_diff(&tm)))
}

/// Every hand matrix from the metric definitions; returns the worst absolute error.
pub fn metric_hand_error() -> f64 {
    let cases = [
        (
            metrics::backward_transfer(&[vec![0.9, 0.0], vec![0.8, 0.85]]).unwrap(),
            -0.1,
        ),
        (
            metrics::forward_transfer(&[vec![0.9, 0.10], vec![0.8, 0.85]], &[0.0, 0.03]).unwrap(),
            0.07,
        ),
        (
            metrics::forgetting_rate(&[vec![0.9, 0.0], vec![0.6, 0.5]]).unwrap(),
            0.3,
        ),
        (
            metrics::average_accuracy(&[vec![0.9, 0.0], vec![0.8, 0.85]]).unwrap(),
            0.825,
        ),
        (
            metrics::backward_transfer(&[vec![0.7, 0.1], vec![0.7, 0.9]]).unwrap(),
            0.0,
        ),
        (
            metrics::average_accuracy(&[vec![0.4, 0.4], vec![0.4, 0.4]]).unwrap(),
            0.4,
        ),
    ];
    cases.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Worst relative error over the whole finite-difference suite.
pub fn gradcheck_worst() -> f64 {
    gradsuite::run_suite()
        .unwrap()
        .iter()
        .map(|e| e.max_rel_error)
        .fold(0.0, f64::max)
}
