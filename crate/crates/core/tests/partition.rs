use std::f64::consts::FRAC_PI_2;

use fdilsim_core::datagen::{
    generate_sequence, partition_sequence, partition_task, DomainShiftSpec, PartitionSpec,
    ProportionMode, TaskSequence,
};

fn spec(classes: usize, dim: usize, train: usize) -> DomainShiftSpec {
    DomainShiftSpec {
        num_tasks: 2,
        base_class_means: (0..classes)
            .map(|c| {
                (0..dim)
                    .map(|j| if j == c % dim { 2.0 } else { 0.0 })
                    .collect()
            })
            .collect(),
        class_cov_scale: 1.0,
        rotation_angle: 0.3,
        mean_drift: 0.5,
        train_per_task: train,
        test_per_task: 4 * classes,
    }
}

fn part(m: usize, alpha: f64, floor: usize) -> PartitionSpec {
    PartitionSpec {
        num_clients: m,
        dirichlet_alpha: alpha,
        min_samples_per_client: floor,
        mode: ProportionMode::PerTask,
    }
}

fn sequence(classes: usize, train: usize, seed: u64) -> TaskSequence {
    generate_sequence(&spec(classes, 4, train), seed).unwrap()
}

#[test]
fn near_uniform_dirichlet_gives_equal_shards() {
    for seed in 0..100 {
        let seq = sequence(4, 400, seed);
        let shards = partition_task(&seq.tasks[0], &part(4, 1e6, 1), 4, seed).unwrap();
        for s in &shards {
            let n = s.data.len() as i64;
            assert!((n - 100).abs() <= 2, "seed {seed}: shard of {n}");
        }
    }
}

#[test]
fn small_alpha_skews_label_histograms() {
    let classes = 10;
    let mut total = 0.0;
    for seed in 0..100 {
        let seq = sequence(classes, 1000, seed);
        let shards = partition_task(&seq.tasks[0], &part(8, 0.1, 1), classes, seed).unwrap();
        let mut share = 0.0;
        for s in &shards {
            let mut hist = vec![0usize; classes];
            for &y in s.data.labels() {
                hist[y] += 1;
            }
            share += *hist.iter().max().unwrap() as f64 / s.data.len() as f64;
        }
        total += share / shards.len() as f64;
    }
    let mean = total / 100.0;
    assert!(mean >= 0.5, "average max-label share {mean}");
}

#[test]
fn shards_conserve_and_never_duplicate() {
    let seq = sequence(3, 300, 9);
    let all = partition_sequence(&seq, &part(5, 0.2, 12), 9).unwrap();
    for (task, shards) in seq.tasks.iter().zip(&all) {
        let mut ids: Vec<u64> = shards.iter().flat_map(|s| s.data.ids().to_vec()).collect();
        assert_eq!(ids.len(), task.train.len());
        ids.sort_unstable();
        let mut pool = task.train.ids().to_vec();
        pool.sort_unstable();
        assert_eq!(ids, pool);
        assert!(shards.iter().all(|s| s.data.len() >= 12));
        assert!(shards.iter().enumerate().all(|(m, s)| s.client_index == m));
    }
}

#[test]
fn single_client_takes_the_pool() {
    let seq = sequence(3, 90, 4);
    let shards = partition_task(&seq.tasks[1], &part(1, 0.1, 1), 3, 4).unwrap();
    assert_eq!(shards.len(), 1);
    assert_eq!(shards[0].data, seq.tasks[1].train);
}

#[test]
fn generation_and_partition_are_deterministic() {
    let a = sequence(3, 120, 77);
    let b = sequence(3, 120, 77);
    for (x, y) in a.tasks.iter().zip(&b.tasks) {
        assert_eq!(x.train, y.train);
        assert_eq!(x.test, y.test);
    }
    let pa = partition_sequence(&a, &part(4, 0.3, 5), 77).unwrap();
    let pb = partition_sequence(&b, &part(4, 0.3, 5), 77).unwrap();
    for (x, y) in pa.iter().flatten().zip(pb.iter().flatten()) {
        assert_eq!(x.data, y.data);
    }
    assert_ne!(sequence(3, 120, 78).tasks[0].train, a.tasks[0].train);
}

#[test]
fn zero_shift_repeats_the_distribution() {
    let mut s = spec(3, 4, 60);
    s.rotation_angle = 0.0;
    s.mean_drift = 0.0;
    let seq = generate_sequence(&s, 1).unwrap();
    assert_eq!(seq.tasks[0].class_means, seq.tasks[1].class_means);
}

#[test]
fn quarter_turn_moves_first_axis_to_second() {
    let s = DomainShiftSpec {
        num_tasks: 2,
        base_class_means: vec![vec![1.0, 0.0], vec![0.0, 0.0]],
        class_cov_scale: 1.0,
        rotation_angle: FRAC_PI_2,
        mean_drift: 0.0,
        train_per_task: 2,
        test_per_task: 2,
    };
    let m = s.task_means(1);
    assert!(m[0][0].abs() < 1e-15 && (m[0][1] - 1.0).abs() < 1e-15);
}

#[test]
fn single_task_sequence() {
    let mut s = spec(2, 3, 20);
    s.num_tasks = 1;
    assert_eq!(generate_sequence(&s, 0).unwrap().len(), 1);
}

#[test]
fn train_and_test_pools_are_independent_draws() {
    let seq = sequence(3, 60, 2);
    for t in &seq.tasks {
        let ids: std::collections::HashSet<_> = t.train.ids().iter().collect();
        assert_eq!(ids.len(), t.train.len());
        assert_ne!(t.train.row(0), t.test.row(0));
    }
}
