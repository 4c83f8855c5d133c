mod common;

use modalanchor_core::autodiff::Graph;
use modalanchor_core::config::ExperimentConfig;
use modalanchor_core::encoder::{DualEncoder, ModelConfig, Pair};
use modalanchor_core::metrics::{self, pca_project, retrieval_from_embeddings};
use modalanchor_core::regularize::{estimate_fisher, similarity_consistency};
use modalanchor_core::taskgen::{k_center, load_pairs, mix_batches, save_pairs, update_buffer, ReplayBuffer};
use modalanchor_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn acc_matrix(max_n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2..=max_n).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(0.0..=1.0f64, n), n))
}

fn pair(task: &str, image: Vec<f64>) -> Pair {
    Pair {
        image,
        caption: vec![0, 1, 2],
        task_id: task.into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forgetting_is_nonnegative(r in acc_matrix(6)) {
        prop_assert!(metrics::forgetting_rate(&r).unwrap() >= 0.0);
    }

    #[test]
    fn bwt_and_average_stay_in_range(r in acc_matrix(6)) {
        let b = metrics::backward_transfer(&r).unwrap();
        prop_assert!((-1.0..=1.0).contains(&b));
        let a = metrics::average_accuracy(&r).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn forgetting_is_negative_bwt_when_columns_peak_on_diagonal(r in acc_matrix(6)) {
        let n = r.len();
        let peaks: Vec<f64> = (0..n).map(|i| (i..n).map(|k| r[k][i]).fold(0.0, f64::max)).collect();
        let mut r = r;
        for (i, p) in peaks.into_iter().enumerate() {
            r[i][i] = p;
        }
        let f = metrics::forgetting_rate(&r).unwrap();
        let b = metrics::backward_transfer(&r).unwrap();
        prop_assert!((f + b).abs() < 1e-12);
    }

    #[test]
    fn retrieval_accuracy_is_a_fraction(seed in any::<u64>(), n in 1usize..80, batch in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig::default();
        let pairs = common::random_pairs(&mut rng, &cfg, n);
        let v = Tensor::from_rows(&pairs.iter().map(|p| p.image[..4].to_vec()).collect::<Vec<_>>()).unwrap();
        let t = v.map(|x| x * 0.5 + 0.1);
        let r = retrieval_from_embeddings(&v, &t, batch).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.accuracy));
        prop_assert!(r.batches >= 1);
    }

    #[test]
    fn pca_components_are_orthonormal(seed in any::<u64>(), n in 6usize..20, d in 3usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { d_v: d, ..ModelConfig::default() };
        let rows: Vec<Vec<f64>> = common::random_pairs(&mut rng, &cfg, n).into_iter().map(|p| p.image).collect();
        let p = pca_project(&Tensor::from_rows(&rows).unwrap(), 2).unwrap();
        let c = &p.components;
        for a in 0..2 {
            for b in 0..2 {
                let dot: f64 = c.row(a).iter().zip(c.row(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-6, "<c{a}, c{b}> = {dot}");
            }
        }
        prop_assert!(p.explained[0] >= p.explained[1] - 1e-9);
        prop_assert!(p.explained.iter().sum::<f64>() <= 1.0 + 1e-9);
    }

    #[test]
    fn mixing_keeps_batch_size_and_prefix(b in 1usize..64, ratio in 0.0..=1.0f64, buf in 0usize..10, seed in any::<u64>()) {
        let current: Vec<Pair> = (0..b).map(|i| pair("B", vec![i as f64])).collect();
        let buffer = ReplayBuffer {
            fraction: 0.1,
            pairs: (0..buf).map(|i| pair("A", vec![-(i as f64)])).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mixed = mix_batches(&current, &buffer, ratio, &mut rng).unwrap();
        prop_assert_eq!(mixed.len(), b);
        let replayed = mixed.iter().filter(|p| p.task_id == "A").count();
        let want = if buf == 0 { 0 } else { (ratio * b as f64).floor() as usize };
        prop_assert_eq!(replayed, want);
        prop_assert_eq!(&mixed[..b - want], &current[..b - want]);
    }

    #[test]
    fn buffer_holds_its_quota_per_task(sizes in prop::collection::vec(1usize..60, 1..5), fraction in 0.01..=1.0f64) {
        let mut buffer = ReplayBuffer::new(fraction);
        let mut expected = 0;
        for (k, &n) in sizes.iter().enumerate() {
            let id = format!("T{k}");
            let task: Vec<Pair> = (0..n).map(|i| pair(&id, vec![i as f64, (i * i) as f64])).collect();
            update_buffer(&mut buffer, &task).unwrap();
            let quota = ((fraction * n as f64).ceil() as usize).min(n);
            prop_assert_eq!(buffer.count_for(&id), quota);
            expected += quota;
        }
        prop_assert_eq!(buffer.len(), expected);
    }

    #[test]
    fn k_center_picks_distinct_points(n in 1usize..40, k in 0usize..50, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { d_v: 3, ..ModelConfig::default() };
        let pts: Vec<Vec<f64>> = common::random_pairs(&mut rng, &cfg, n).into_iter().map(|p| p.image).collect();
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let mut idx = k_center(&refs, k);
        prop_assert_eq!(idx.len(), k.min(n));
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), k.min(n));
    }

    #[test]
    fn consistency_is_permutation_invariant(seed in any::<u64>(), n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { d_v: n, ..ModelConfig::default() };
        let rows = |rng: &mut ChaCha8Rng| {
            common::random_pairs(rng, &cfg, n).into_iter().map(|p| p.image).collect::<Vec<_>>()
        };
        let (now, old) = (rows(&mut rng), rows(&mut rng));
        let perm: Vec<usize> = (0..n).rev().collect();
        let permute = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
            perm.iter().map(|&i| perm.iter().map(|&j| m[i][j]).collect()).collect()
        };
        let loss = |now: Vec<Vec<f64>>, old: Vec<Vec<f64>>| {
            let mut g = Graph::new();
            let s = g.constant(Tensor::from_rows(&now).unwrap());
            let l = similarity_consistency(&mut g, s, &Tensor::from_rows(&old).unwrap()).unwrap();
            g.value(l).item()
        };
        let a = loss(now.clone(), old.clone());
        let b = loss(permute(&now), permute(&old));
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn config_round_trips_through_text(
        lr in 1e-4..1.0f64,
        epochs in 1usize..9,
        lambda in 0.0..50.0f64,
        beta in 0.0..5.0f64,
        seeds in prop::collection::vec(0u64..1000, 1..4),
    ) {
        let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
        let sets = vec![
            ("trainer.lr".to_string(), lr.to_string()),
            ("trainer.epochs".to_string(), epochs.to_string()),
            ("ours.lambda_base".to_string(), lambda.to_string()),
            ("ours.beta".to_string(), beta.to_string()),
            ("run.seeds".to_string(), seeds.join(",")),
        ];
        let cfg = ExperimentConfig::parse("", &sets).unwrap();
        let again = ExperimentConfig::parse(&cfg.render(), &[]).unwrap();
        prop_assert_eq!(&again, &cfg);
        prop_assert_eq!(again.config_hash(), cfg.config_hash());
    }

    #[test]
    fn jsonl_round_trips(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig::default();
        let pairs = common::random_pairs(&mut rng, &cfg, n);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        save_pairs(&path, &pairs).unwrap();
        prop_assert_eq!(load_pairs(&path, &cfg).unwrap(), pairs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fisher_is_nonnegative_and_deterministic(seed in any::<u64>(), n in 1usize..12) {
        let cfg = common::tiny_model_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = common::random_pairs(&mut rng, &cfg, n);
        let model = DualEncoder::new(cfg).unwrap();
        let a = estimate_fisher(&model, &data, n + 3, 4).unwrap();
        prop_assert!(a.flat_values().all(|x| x >= 0.0 && x.is_finite()));
        let b = estimate_fisher(&model, &data, n + 3, 4).unwrap();
        prop_assert_eq!(a, b);
    }
}
