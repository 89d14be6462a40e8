//! Experiment configuration: a TOML file with one flat section per module.
//!
//! Unknown keys are rejected and every invariant of the embedded types is
//! checked at parse time, with errors naming the offending key path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{generate_base_means, DomainShiftSpec, PartitionSpec, ProportionMode};
use crate::error::{Error, Result};
use crate::model::{Activation, ModelKind, ModelSpec};
use crate::server::{Algorithm, GlobalLrSchedule, HyperParams};
use crate::theory::ProbeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub partition: PartitionSection,
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKindName {
    Logreg,
    Mlp1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKindName,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub num_tasks: usize,
    /// Explicit class means (`num_classes` rows of `input_dim`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_class_means: Option<Vec<Vec<f64>>>,
    /// Norm of seeded random class means, used when no explicit means are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_separation: Option<f64>,
    pub class_cov_scale: f64,
    pub rotation_angle: f64,
    pub mean_drift: f64,
    pub train_per_task: usize,
    pub test_per_task: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
    pub min_samples_per_client: usize,
    #[serde(default)]
    pub proportions: ProportionMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    TaskDecay,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub algorithm: Algorithm,
    pub participants_per_round: usize,
    pub rounds_per_task: usize,
    pub local_epochs: usize,
    pub local_lr: f64,
    pub batch_size: usize,
    pub global_lr_schedule: ScheduleName,
    /// Required for the constant schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_lr: Option<f64>,
    pub prox_lambda: f64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub random_points: usize,
    pub random_scale: f64,
    pub minibatch_draws: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            random_points: 8,
            random_scale: 0.5,
            minibatch_draws: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub per_round_accuracy: bool,
    pub per_round_joint: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            per_round_accuracy: false,
            per_round_joint: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(
            key,
            format!("must be a positive number, got {v}"),
        ))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(config_err(key, format!("must be at least {min}, got {v}")))
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let key = match e.span() {
            Some(span) => locate_key(text, span.start),
            None => "<document>".to_string(),
        };
        config_err(&key, e.message().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Best-effort `section.key` path for a byte offset in a TOML document.
fn locate_key(text: &str, offset: usize) -> String {
    let mut section = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') && trimmed.ends_with(']') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        pos += line.len();
        if pos > offset {
            break;
        }
    }
    match (section.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    }
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        at_least("model.input_dim", m.input_dim, 1)?;
        at_least("model.num_classes", m.num_classes, 2)?;
        match m.kind {
            ModelKindName::Mlp1 => {
                let h = m.hidden_dim.ok_or_else(|| {
                    config_err("model.hidden_dim", "required for kind = \"mlp1\"")
                })?;
                at_least("model.hidden_dim", h, 1)?;
            }
            ModelKindName::Logreg => {
                if m.hidden_dim.is_some() || m.activation.is_some() {
                    return Err(config_err(
                        "model.hidden_dim",
                        "hidden_dim/activation only apply to kind = \"mlp1\"",
                    ));
                }
            }
        }

        let d = &self.data;
        at_least("data.num_tasks", d.num_tasks, 1)?;
        match (&d.base_class_means, d.class_separation) {
            (Some(_), Some(_)) => {
                return Err(config_err(
                    "data.class_separation",
                    "give either base_class_means or class_separation, not both",
                ))
            }
            (None, None) => {
                return Err(config_err(
                    "data.base_class_means",
                    "one of base_class_means or class_separation is required",
                ))
            }
            (Some(means), None) => {
                if means.len() != m.num_classes {
                    return Err(config_err(
                        "data.base_class_means",
                        format!(
                            "expected {} rows (num_classes), got {}",
                            m.num_classes,
                            means.len()
                        ),
                    ));
                }
                if means.iter().any(|r| r.len() != m.input_dim) {
                    return Err(config_err(
                        "data.base_class_means",
                        format!("every row needs input_dim = {} entries", m.input_dim),
                    ));
                }
                if means.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(config_err(
                        "data.base_class_means",
                        "entries must be finite",
                    ));
                }
            }
            (None, Some(sep)) => positive("data.class_separation", sep)?,
        }
        positive("data.class_cov_scale", d.class_cov_scale)?;
        if !(0.0..=std::f64::consts::PI).contains(&d.rotation_angle) {
            return Err(config_err("data.rotation_angle", "must lie in [0, pi]"));
        }
        if !(d.mean_drift >= 0.0 && d.mean_drift.is_finite()) {
            return Err(config_err("data.mean_drift", "must be >= 0"));
        }
        at_least("data.train_per_task", d.train_per_task, m.num_classes)?;
        at_least("data.test_per_task", d.test_per_task, m.num_classes)?;

        let p = &self.partition;
        at_least("partition.num_clients", p.num_clients, 1)?;
        positive("partition.dirichlet_alpha", p.dirichlet_alpha)?;
        at_least(
            "partition.min_samples_per_client",
            p.min_samples_per_client,
            1,
        )?;
        let required = p.num_clients * p.min_samples_per_client;
        if d.train_per_task < required {
            return Err(config_err(
                "partition.min_samples_per_client",
                format!(
                    "num_clients x min_samples_per_client = {required} exceeds data.train_per_task = {}",
                    d.train_per_task
                ),
            ));
        }

        let pr = &self.protocol;
        at_least(
            "protocol.participants_per_round",
            pr.participants_per_round,
            1,
        )?;
        if pr.participants_per_round > p.num_clients {
            return Err(config_err(
                "protocol.participants_per_round",
                format!(
                    "participants_per_round ≤ num_clients violated ({} > {})",
                    pr.participants_per_round, p.num_clients
                ),
            ));
        }
        at_least("protocol.rounds_per_task", pr.rounds_per_task, 1)?;
        at_least("protocol.local_epochs", pr.local_epochs, 1)?;
        positive("protocol.local_lr", pr.local_lr)?;
        at_least("protocol.batch_size", pr.batch_size, 1)?;
        match (pr.global_lr_schedule, pr.global_lr) {
            (ScheduleName::Constant, None) => {
                return Err(config_err(
                    "protocol.global_lr",
                    "required when global_lr_schedule = \"constant\"",
                ))
            }
            (ScheduleName::Constant, Some(g)) => positive("protocol.global_lr", g)?,
            (ScheduleName::TaskDecay, Some(_)) => {
                return Err(config_err(
                    "protocol.global_lr",
                    "only used with global_lr_schedule = \"constant\"",
                ))
            }
            (ScheduleName::TaskDecay, None) => {}
        }
        if !(pr.prox_lambda >= 0.0 && pr.prox_lambda.is_finite()) {
            return Err(config_err(
                "protocol.prox_lambda",
                format!("must be >= 0, got {}", pr.prox_lambda),
            ));
        }
        if !(pr.init_scale >= 0.0 && pr.init_scale.is_finite()) {
            return Err(config_err("protocol.init_scale", "must be >= 0"));
        }

        if !(self.probe.random_scale >= 0.0 && self.probe.random_scale.is_finite()) {
            return Err(config_err("probe.random_scale", "must be >= 0"));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        let m = &self.model;
        let kind = match m.kind {
            ModelKindName::Logreg => ModelKind::LogReg,
            ModelKindName::Mlp1 => ModelKind::Mlp1 {
                hidden: m.hidden_dim.unwrap_or(1),
                activation: m.activation.unwrap_or(Activation::Tanh),
            },
        };
        ModelSpec {
            kind,
            input_dim: m.input_dim,
            num_classes: m.num_classes,
        }
    }

    pub fn shift_spec(&self) -> DomainShiftSpec {
        let d = &self.data;
        let means = match &d.base_class_means {
            Some(m) => m.clone(),
            None => generate_base_means(
                self.model.num_classes,
                self.model.input_dim,
                d.class_separation.unwrap_or(1.0),
                self.seed,
            ),
        };
        DomainShiftSpec {
            num_tasks: d.num_tasks,
            base_class_means: means,
            class_cov_scale: d.class_cov_scale,
            rotation_angle: d.rotation_angle,
            mean_drift: d.mean_drift,
            train_per_task: d.train_per_task,
            test_per_task: d.test_per_task,
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let p = &self.partition;
        PartitionSpec {
            num_clients: p.num_clients,
            dirichlet_alpha: p.dirichlet_alpha,
            min_samples_per_client: p.min_samples_per_client,
            mode: p.proportions,
        }
    }

    pub fn hyper_params(&self) -> HyperParams {
        let pr = &self.protocol;
        HyperParams {
            num_clients: self.partition.num_clients,
            participants_per_round: pr.participants_per_round,
            rounds_per_task: pr.rounds_per_task,
            local_epochs: pr.local_epochs,
            local_lr: pr.local_lr,
            batch_size: pr.batch_size,
            global_lr: match pr.global_lr_schedule {
                ScheduleName::TaskDecay => GlobalLrSchedule::TaskDecay,
                ScheduleName::Constant => GlobalLrSchedule::Constant(pr.global_lr.unwrap_or(1.0)),
            },
            prox_lambda: pr.prox_lambda,
            algorithm: pr.algorithm,
            master_seed: self.seed,
            init_scale: pr.init_scale,
            eval_every_round: self.eval.per_round_accuracy,
            joint_every_round: self.eval.per_round_joint,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            random_points: self.probe.random_points,
            random_scale: self.probe.random_scale,
            minibatch_draws: self.probe.minibatch_draws,
            batch_size: self.protocol.batch_size,
        }
    }
}
