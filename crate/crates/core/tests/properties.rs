use proptest::prelude::*;
use rand::SeedableRng;
use stg_core::analysis::{bin_counts, build_histogram, continuity_from_embeddings, pca};
use stg_core::env::{generate_expert_dataset, load_dataset, save_dataset, EnvConfig, Task};
use stg_core::models::{clip_critic_weights, init_transformer, stg_forward, symlog_distance, ModelConfig};
use stg_core::numerics::{Checkpoint, OptimizerConfig, OptimizerState};
use stg_core::rl::{gae, normalize_advantages, PolicyNet, RunningNormalizer};
use stg_core::{DType, Graph, ParameterSet, Rng, Tensor};

fn param_set(values: &[f64], dtype: DType) -> ParameterSet {
    let mut s = ParameterSet::new(dtype);
    s.insert("w", Tensor::new(vec![values.len()], values.to_vec(), dtype).unwrap()).unwrap();
    s
}

proptest! {
    #[test]
    fn symlog_is_antisymmetric_and_monotone(i in 0usize..500, gap in 1usize..200) {
        let j = i + gap;
        prop_assert_eq!(symlog_distance(i, i), 0.0);
        prop_assert_eq!(symlog_distance(i, j), -symlog_distance(j, i));
        prop_assert!(symlog_distance(i, j + 1) > symlog_distance(i, j));
        prop_assert!(symlog_distance(i, j) > 0.0);
        prop_assert!((symlog_distance(i, i + 1) - 2f64.ln()).abs() <= 1e-12);
        // Only the gap matters.
        prop_assert_eq!(symlog_distance(i, j), symlog_distance(0, gap));
    }

    #[test]
    fn clipping_bounds_and_is_idempotent(values in prop::collection::vec(-1.0f64..1.0, 1..64), c in 1e-3f64..0.5) {
        let mut s = param_set(&values, DType::F64);
        clip_critic_weights(&mut s, -c, c);
        prop_assert!(s.max_abs() <= c);
        let once = s.get("w").unwrap().data().to_vec();
        clip_critic_weights(&mut s, -c, c);
        prop_assert_eq!(s.get("w").unwrap().data(), &once[..]);
        for (v, o) in values.iter().zip(&once) {
            if v.abs() <= c {
                prop_assert_eq!(v, o);
            }
        }
    }

    #[test]
    fn gae_is_linear_in_rewards(
        rewards in prop::collection::vec(-5.0f64..5.0, 1..64),
        c in 0.01f64..100.0,
        cut in 1usize..16,
    ) {
        let n = rewards.len();
        let zero = vec![0.0; n];
        let end: Vec<bool> = (0..n).map(|t| t % cut == cut - 1 || t == n - 1).collect();
        let term: Vec<bool> = end.iter().enumerate().map(|(t, &e)| e && t % 2 == 0).collect();
        let (a, _) = gae(&rewards, &zero, &zero, &term, &end, 0.99, 0.95).unwrap();
        let scaled: Vec<f64> = rewards.iter().map(|r| c * r).collect();
        let (b, _) = gae(&scaled, &zero, &zero, &term, &end, 0.99, 0.95).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((c * x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{} vs {}", c * x, y);
        }
    }

    #[test]
    fn normalized_advantages_are_standardized(adv in prop::collection::vec(-100.0f64..100.0, 2..128)) {
        let mut a = adv.clone();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        let spread = adv.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - adv.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-3 {
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalizer_output_is_bounded(xs in prop::collection::vec(-1e6f64..1e6, 1..200)) {
        let mut norm = RunningNormalizer::default();
        for &x in &xs {
            let y = norm.observe(x);
            prop_assert!((-1.0..=1.0).contains(&y));
            prop_assert!(norm.variance() >= 0.0);
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        prop_assert!((norm.mean - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
        prop_assert_eq!(norm.count, xs.len() as u64);
    }

    #[test]
    fn optimizer_steps_stay_finite(
        values in prop::collection::vec(-10.0f64..10.0, 1..16),
        grads in prop::collection::vec(-1e3f64..1e3, 16),
        which in 0usize..3,
        steps in 1usize..10,
    ) {
        let mut s = param_set(&values, DType::F64);
        let cfg = [OptimizerConfig::adam(1e-2), OptimizerConfig::adamw(1e-2), OptimizerConfig::rmsprop(1e-2)][which].clone();
        let mut opt = OptimizerState::new(cfg, &s);
        for k in 0..steps {
            let g: Vec<f64> = grads[..values.len()].iter().map(|v| v * (k as f64 - 3.0)).collect();
            s.set_grad("w", Tensor::new(vec![values.len()], g, DType::F64).unwrap()).unwrap();
            opt.step(&mut s).unwrap();
            prop_assert!(s.get("w").unwrap().data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn causal_softmax_rows_are_distributions(n in 1usize..8, scores in prop::collection::vec(-20.0f64..20.0, 64)) {
        let mut g = Graph::<f64>::new();
        let x = g.input_f64(&[n, n], &scores[..n * n]).unwrap();
        let p = g.causal_softmax(x).unwrap();
        let v = g.values_f64(p);
        for i in 0..n {
            let row = &v[i * n..(i + 1) * n];
            prop_assert!((row[..=i].iter().sum::<f64>() - 1.0).abs() < 1e-5);
            prop_assert!(row[i + 1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn histogram_conserves_samples(
        e in prop::collection::vec(-50.0f64..50.0, 1..100),
        p in prop::collection::vec(-50.0f64..50.0, 1..100),
        s in prop::collection::vec(-50.0f64..50.0, 1..100),
        bins in 1usize..40,
    ) {
        let h = build_histogram(e.clone(), p.clone(), s.clone(), bins).unwrap();
        prop_assert_eq!(h.expert_counts.iter().sum::<usize>(), e.len());
        prop_assert_eq!(h.predicted_counts.iter().sum::<usize>(), p.len());
        prop_assert_eq!(h.shuffled_counts.iter().sum::<usize>(), s.len());
        prop_assert_eq!(bin_counts(&e, &h.edges), h.expert_counts);
        prop_assert!(h.edges.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn continuity_is_isometry_invariant(
        seed in 0u64..1000,
        angle in 0.0f64..std::f64::consts::TAU,
        shift in prop::collection::vec(-5.0f64..5.0, 4),
        reflect in any::<bool>(),
    ) {
        use rand::Rng as _;
        let mut rng = Rng::seed_from_u64(seed);
        let emb: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|_| (0..12).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
            .collect();
        // Rotation in the (0, 2) plane, optional reflection of axis 3, then translation.
        let (c, s) = (angle.cos(), angle.sin());
        let moved: Vec<Vec<Vec<f64>>> = emb
            .iter()
            .map(|t| {
                t.iter()
                    .map(|x| {
                        let mut y = vec![c * x[0] - s * x[2], x[1], s * x[0] + c * x[2], if reflect { -x[3] } else { x[3] }];
                        y.iter_mut().zip(&shift).for_each(|(v, d)| *v += d);
                        y
                    })
                    .collect()
            })
            .collect();
        let a = continuity_from_embeddings(&emb, 1000, 7).unwrap();
        let b = continuity_from_embeddings(&moved, 1000, 7).unwrap();
        prop_assert!((a.ratio - b.ratio).abs() < 1e-6, "{} vs {}", a.ratio, b.ratio);
    }

    #[test]
    fn pca_is_deterministic_with_sign_convention(seed in 0u64..1000, n in 3usize..30) {
        use rand::Rng as _;
        let mut rng = Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let a = pca(&rows, 2).unwrap();
        let b = pca(&rows, 2).unwrap();
        prop_assert_eq!(&a, &b);
        for comp in &a.components {
            let first = comp.iter().find(|v| v.abs() > 1e-12);
            prop_assert!(first.map_or(true, |v| *v > 0.0));
        }
        prop_assert!(a.explained.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        for k in 0..2 {
            let m = a.coords.iter().map(|c| c[k]).sum::<f64>() / n as f64;
            prop_assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact(values in prop::collection::vec(-1e3f64..1e3, 1..64), f32_set in any::<bool>()) {
        let dtype = if f32_set { DType::F32 } else { DType::F64 };
        let mut s = ParameterSet::new(dtype);
        s.insert("a.w", Tensor::new(vec![values.len()], values.clone(), dtype).unwrap()).unwrap();
        s.insert("a.b", Tensor::new(vec![1], vec![values[0] * 0.5], dtype).unwrap()).unwrap();
        let ck = Checkpoint::from_sets("{}", [&s]);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        // Payloads are 32-bit, so a 64-bit set comes back at its f32 rounding.
        let restored = back.to_set("a.", DType::F32).unwrap();
        prop_assert_eq!(restored.fingerprint(), s.to_dtype(DType::F32).fingerprint());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn future_tokens_never_change_past_predictions(seed in 0u64..500, j in 0usize..8, delta in -5.0f64..5.0) {
        prop_assume!(delta.abs() > 1e-3);
        use rand::Rng as _;
        let cfg = ModelConfig { d: 8, block_size: 8, layers: 2, heads: 2, ..ModelConfig::default() };
        let mut rng = Rng::seed_from_u64(seed);
        let set = init_transformer(&cfg, &mut rng, DType::F64).unwrap();
        let n = 8;
        let e: Vec<f64> = (0..n * cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |e: &[f64]| {
            let mut g = Graph::<f64>::new();
            let x = g.input_f64(&[1, n, cfg.d], e).unwrap();
            let y = stg_forward(&mut g, &set, &cfg, x).unwrap();
            g.values_f64(y)
        };
        let base = run(&e);
        let mut pert = e.clone();
        pert[j * cfg.d..(j + 1) * cfg.d].iter_mut().for_each(|v| *v += delta);
        let out = run(&pert);
        prop_assert_eq!(&out[..j * cfg.d], &base[..j * cfg.d]);
    }

    #[test]
    fn policy_outputs_are_distributions(seed in 0u64..1000, scale in 0.0f64..255.0) {
        use rand::Rng as _;
        let env = EnvConfig { grid: 4, scale: 2, frame_stack: 2, ..EnvConfig::default() };
        let net = PolicyNet::init(env.geometry(), seed, DType::F32).unwrap();
        let mut rng = Rng::seed_from_u64(seed ^ 1);
        let n = 5;
        let per = 2 * 8 * 8;
        let px: Vec<f64> = (0..n * per).map(|_| rng.gen_range(0.0..1.0) * scale / 255.0).collect();
        let (probs, values) = net.evaluate(&px, n).unwrap();
        prop_assert_eq!(probs.len(), n);
        prop_assert_eq!(values.len(), n);
        for p in probs {
            prop_assert_eq!(p.len(), 5);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn frame_stacks_overlap_and_datasets_round_trip(seed in 0u64..1000, k in 1usize..5, corridor in any::<bool>()) {
        let env = EnvConfig {
            task: if corridor { Task::Corridor } else { Task::Chase },
            grid: 6,
            scale: 2,
            frame_stack: k,
            seed,
            ..EnvConfig::default()
        };
        let (ds, _) = generate_expert_dataset(&env, 3).unwrap();
        for t in &ds.trajectories {
            for i in 0..t.len() - 1 {
                let (a, b) = (t.state(i), t.state(i + 1));
                for f in 0..k - 1 {
                    prop_assert_eq!(a.frame(f + 1), b.frame(f));
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        prop_assert_eq!(&back, &ds);
        let (again, _) = generate_expert_dataset(&env, 3).unwrap();
        prop_assert_eq!(again, ds);
    }
}
