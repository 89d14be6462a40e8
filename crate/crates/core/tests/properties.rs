use fdilsim_core::datagen::{
    generate_sequence, partition_task, DomainShiftSpec, PartitionSpec, ProportionMode,
};
use fdilsim_core::model::{loss, Minibatch, ModelSpec, ParamVector};
use fdilsim_core::rng::derive_stream;
use fdilsim_core::server::{aggregate, proximal_blend, sample_clients};
use proptest::prelude::*;

fn batch_strategy(d: usize, c: usize) -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (1usize..8).prop_flat_map(move |n| {
        (
            prop::collection::vec(-3.0f64..3.0, n * d),
            prop::collection::vec(0..c, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_non_negative(
        (x, y) in batch_strategy(3, 3),
        p in prop::collection::vec(-5.0f64..5.0, 12),
    ) {
        let spec = ModelSpec::logreg(3, 3).unwrap();
        let b = Minibatch::new(3, x, y).unwrap();
        prop_assert!(loss(&spec, &ParamVector::new(p).unwrap(), &b).unwrap() >= 0.0);
    }

    #[test]
    fn loss_ignores_row_order(
        (x, y) in batch_strategy(2, 3),
        p in prop::collection::vec(-2.0f64..2.0, 9),
        rot in 0usize..8,
    ) {
        let spec = ModelSpec::logreg(2, 3).unwrap();
        let b = Minibatch::new(2, x, y).unwrap();
        let n = b.len();
        let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let shuffled = b.select(&order);
        let p = ParamVector::new(p).unwrap();
        let (l1, l2) = (loss(&spec, &p, &b).unwrap(), loss(&spec, &p, &shuffled).unwrap());
        prop_assert!((l1 - l2).abs() <= 1e-12 * l1.max(1.0));
    }

    #[test]
    fn aggregation_ignores_arrival_order(
        vals in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..6),
        rot in 0usize..6,
    ) {
        let updates: Vec<(usize, ParamVector)> = vals
            .into_iter()
            .enumerate()
            .map(|(i, v)| (i * 3, ParamVector::new(v).unwrap()))
            .collect();
        let mut rotated = updates.clone();
        let len = rotated.len();
        rotated.rotate_left(rot % len);
        prop_assert_eq!(aggregate(&updates).unwrap(), aggregate(&rotated).unwrap());
    }

    #[test]
    fn blend_is_a_convex_combination(
        a in prop::collection::vec(-10.0f64..10.0, 5),
        b in prop::collection::vec(-10.0f64..10.0, 5),
        lambda in 0.0f64..100.0,
    ) {
        let u = proximal_blend(
            &ParamVector::new(a.clone()).unwrap(),
            &ParamVector::new(b.clone()).unwrap(),
            lambda,
        )
        .unwrap();
        for ((ui, ai), bi) in u.as_slice().iter().zip(&a).zip(&b) {
            let (lo, hi) = (ai.min(*bi), ai.max(*bi));
            prop_assert!(*ui >= lo - 1e-12 && *ui <= hi + 1e-12);
        }
    }

    #[test]
    fn sampler_returns_sorted_distinct_ids(m in 1usize..40, seed in any::<u64>(), frac in 0.0f64..1.0) {
        let n = 1 + ((m - 1) as f64 * frac) as usize;
        let ids = sample_clients(m, n, &mut derive_stream(seed, &[5])).unwrap();
        prop_assert_eq!(ids.len(), n);
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ids.iter().all(|&i| i < m));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn partition_conserves_samples(
        seed in any::<u64>(),
        m in 1usize..7,
        alpha in 0.05f64..10.0,
        train in 60usize..200,
    ) {
        let shift = DomainShiftSpec {
            num_tasks: 1,
            base_class_means: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]],
            class_cov_scale: 1.0,
            rotation_angle: 0.0,
            mean_drift: 0.0,
            train_per_task: train,
            test_per_task: 3,
        };
        let seq = generate_sequence(&shift, seed).unwrap();
        let part = PartitionSpec {
            num_clients: m,
            dirichlet_alpha: alpha,
            min_samples_per_client: 5,
            mode: ProportionMode::PerTask,
        };
        let shards = partition_task(&seq.tasks[0], &part, 3, seed).unwrap();
        let mut ids: Vec<u64> = shards.iter().flat_map(|s| s.data.ids().to_vec()).collect();
        prop_assert_eq!(ids.len(), train);
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), train);
        prop_assert!(shards.iter().all(|s| s.data.len() >= 5));
    }
}
