#![allow(dead_code)]

use fdilsim_core::config::{parse_config_str, ExperimentConfig};
use fdilsim_core::experiment::{build_setup, Setup};
use fdilsim_core::server::{RunLog, Simulator};

pub const SMALL: &str = r#"
seed = 3

[model]
kind = "logreg"
input_dim = 6
num_classes = 3

[data]
num_tasks = 2
class_separation = 3.0
class_cov_scale = 1.0
rotation_angle = 0.6
mean_drift = 0.5
train_per_task = 480
test_per_task = 300

[partition]
num_clients = 8
dirichlet_alpha = 0.5
min_samples_per_client = 10

[protocol]
algorithm = "special"
participants_per_round = 4
rounds_per_task = 10
local_epochs = 5
local_lr = 0.05
batch_size = 16
global_lr_schedule = "task_decay"
prox_lambda = 0.5

[probe]
random_points = 4
random_scale = 0.5
minibatch_draws = 2

[eval]
per_round_accuracy = true
per_round_joint = true
"#;

pub fn small(seed: u64) -> ExperimentConfig {
    let mut cfg = parse_config_str(SMALL).unwrap();
    cfg.seed = seed;
    cfg
}

pub fn setup(cfg: &ExperimentConfig) -> Setup {
    cfg.validate().unwrap();
    build_setup(cfg).unwrap()
}

pub fn run(cfg: &ExperimentConfig) -> RunLog {
    let s = setup(cfg);
    Simulator::new(&s.spec, &s.sequence, &s.shards, &s.hp)
        .unwrap()
        .run()
        .unwrap()
}
