//! One full experiment: data, partition, protocol run, constant estimation
//! and bound evaluation, driven by a parsed config.

use crate::config::{parse_config_str, ExperimentConfig};
use crate::datagen::{generate_sequence, partition_sequence, ClientShard, TaskSequence};
use crate::error::Result;
use crate::model::ModelSpec;
use crate::server::{HyperParams, RunLog, Simulator};
use crate::theory::{estimate_constants, evaluate_run, BoundReport, ConstantEstimates, Probes};

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    /// Verbatim text of the input config.
    pub config_text: String,
    pub config: ExperimentConfig,
    pub log: RunLog,
    pub constants: ConstantEstimates,
    pub bounds: Vec<BoundReport>,
}

/// Data and partition for a config, without running anything.
pub struct Setup {
    pub spec: ModelSpec,
    pub sequence: TaskSequence,
    pub shards: Vec<Vec<ClientShard>>,
    pub hp: HyperParams,
}

pub fn build_setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let spec = cfg.model_spec();
    spec.validate()?;
    let sequence = generate_sequence(&cfg.shift_spec(), cfg.seed)?;
    let shards = partition_sequence(&sequence, &cfg.partition_spec(), cfg.seed)?;
    Ok(Setup {
        spec,
        sequence,
        shards,
        hp: cfg.hyper_params(),
    })
}

pub fn run_experiment(config_text: &str) -> Result<RunArtifacts> {
    let config = parse_config_str(config_text)?;
    run_parsed(config, config_text.to_string())
}

pub fn run_parsed(config: ExperimentConfig, config_text: String) -> Result<RunArtifacts> {
    let setup = build_setup(&config)?;
    let sim = Simulator::new(&setup.spec, &setup.sequence, &setup.shards, &setup.hp)?;
    let log = sim.run()?;

    let k = log.final_models.len();
    let mut trajectory = vec![log.initial.clone()];
    trajectory.extend(log.final_models.iter().cloned());
    let probes = Probes {
        center: log.final_models.last(),
        trajectory: &trajectory,
        bkt_reference: (k >= 2).then(|| &log.final_models[k - 2]),
    };
    let constants = estimate_constants(
        &setup.spec,
        &setup.shards,
        &config.probe_config(),
        &probes,
        config.seed,
    )?;
    let bounds = evaluate_run(&setup.spec, &setup.shards, &setup.hp, &log, &constants)?;
    Ok(RunArtifacts {
        config_text,
        config,
        log,
        constants,
        bounds,
    })
}
