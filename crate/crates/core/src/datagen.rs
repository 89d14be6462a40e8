//! Synthetic domain-incremental task sequences and Dirichlet client partitions.
//!
//! Every task shares one label space. Task `k` (0-based) draws class `c`
//! from an isotropic Gaussian centred on `R^k mu_c + k * drift * u`, where `R`
//! rotates each consecutive coordinate pair by the per-task angle and `u` is
//! the normalised all-ones direction.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Minibatch;
use crate::rng::{derive_stream, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct DomainShiftSpec {
    pub num_tasks: usize,
    /// `num_classes` rows of `input_dim` entries.
    pub base_class_means: Vec<Vec<f64>>,
    /// Isotropic covariance is `class_cov_scale * I`.
    pub class_cov_scale: f64,
    pub rotation_angle: f64,
    pub mean_drift: f64,
    pub train_per_task: usize,
    pub test_per_task: usize,
}

impl DomainShiftSpec {
    pub fn num_classes(&self) -> usize {
        self.base_class_means.len()
    }

    pub fn input_dim(&self) -> usize {
        self.base_class_means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("domain shift spec", reason));
        if self.num_tasks == 0 {
            return bad("num_tasks must be at least 1".into());
        }
        let c = self.num_classes();
        let d = self.input_dim();
        if c < 2 {
            return bad("need at least 2 class means".into());
        }
        if d == 0 || self.base_class_means.iter().any(|m| m.len() != d) {
            return bad("class means must share a positive input_dim".into());
        }
        if self
            .base_class_means
            .iter()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return bad("class means must be finite".into());
        }
        if !(self.class_cov_scale > 0.0 && self.class_cov_scale.is_finite()) {
            return bad("class_cov_scale must be positive".into());
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.rotation_angle) {
            return bad("rotation_angle must lie in [0, pi]".into());
        }
        if !(self.mean_drift >= 0.0 && self.mean_drift.is_finite()) {
            return bad("mean_drift must be non-negative".into());
        }
        if self.train_per_task < c || self.test_per_task < c {
            return bad(format!(
                "train/test samples per task must be at least num_classes ({c})"
            ));
        }
        Ok(())
    }

    /// Class means of task `task` (0-based).
    pub fn task_means(&self, task: usize) -> Vec<Vec<f64>> {
        let d = self.input_dim();
        let angle = task as f64 * self.rotation_angle;
        let (sin, cos) = angle.sin_cos();
        let shift = task as f64 * self.mean_drift / (d as f64).sqrt();
        self.base_class_means
            .iter()
            .map(|mu| {
                let mut out = mu.clone();
                if task > 0 && self.rotation_angle != 0.0 {
                    for pair in out.chunks_exact_mut(2) {
                        let (a, b) = (pair[0], pair[1]);
                        pair[0] = cos * a - sin * b;
                        pair[1] = sin * a + cos * b;
                    }
                }
                if shift != 0.0 {
                    out.iter_mut().for_each(|v| *v += shift);
                }
                out
            })
            .collect()
    }
}

/// Class means with norm `separation` in random directions.
pub fn generate_base_means(
    num_classes: usize,
    input_dim: usize,
    separation: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = derive_stream(seed, &[Purpose::BaseMeans.label()]);
    (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            v.into_iter().map(|x| separation * x / norm).collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TaskData {
    /// 0-based position in the sequence.
    pub index: usize,
    pub class_means: Vec<Vec<f64>>,
    pub train: Minibatch,
    pub test: Minibatch,
}

#[derive(Debug, Clone)]
pub struct TaskSequence {
    pub tasks: Vec<TaskData>,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

fn draw_pool(means: &[Vec<f64>], std: f64, n: usize, rng: &mut impl Rng) -> Result<Minibatch> {
    let c = means.len();
    let d = means[0].len();
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let y = k % c;
        for &m in &means[y] {
            let z: f64 = rng.sample(StandardNormal);
            inputs.push(m + std * z);
        }
        labels.push(y);
    }
    Minibatch::new(d, inputs, labels)
}

pub fn generate_sequence(shift: &DomainShiftSpec, seed: u64) -> Result<TaskSequence> {
    shift.validate()?;
    let std = shift.class_cov_scale.sqrt();
    let tasks = (0..shift.num_tasks)
        .map(|k| {
            let means = shift.task_means(k);
            let mut train_rng = derive_stream(seed, &[Purpose::TaskData.label(), k as u64, 0]);
            let mut test_rng = derive_stream(seed, &[Purpose::TaskData.label(), k as u64, 1]);
            let train = draw_pool(&means, std, shift.train_per_task, &mut train_rng)?;
            let test = draw_pool(&means, std, shift.test_per_task, &mut test_rng)?;
            Ok(TaskData {
                index: k,
                class_means: means,
                train,
                test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSequence {
        tasks,
        num_classes: shift.num_classes(),
        input_dim: shift.input_dim(),
    })
}

/// Whether Dirichlet proportions are redrawn for every task or drawn once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProportionMode {
    #[default]
    PerTask,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
    pub min_samples_per_client: usize,
    pub mode: ProportionMode,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::invalid(
                "partition spec",
                "num_clients must be at least 1",
            ));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::invalid(
                "partition spec",
                "dirichlet_alpha must be positive",
            ));
        }
        if self.min_samples_per_client == 0 {
            return Err(Error::invalid(
                "partition spec",
                "min_samples_per_client must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClientShard {
    pub task_index: usize,
    pub client_index: usize,
    pub data: Minibatch,
}

fn dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        // Every gamma underflowed (tiny alpha): the limit is a one-hot draw.
        let hot = rng.gen_range(0..k);
        (0..k).map(|m| if m == hot { 1.0 } else { 0.0 }).collect()
    }
}

/// Integer counts summing to `total`, proportional to `props`.
fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    while assigned > total {
        let (big, _) = counts
            .iter()
            .enumerate()
            .fold((0, 0), |acc, (i, &c)| if c > acc.1 { (i, c) } else { acc });
        counts[big] -= 1;
        assigned -= 1;
    }
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &m in order.iter().cycle().take(total - assigned) {
        counts[m] += 1;
    }
    counts
}

/// Per-class client proportions for one task: `num_classes` rows of `M`.
pub fn class_proportions(
    part: &PartitionSpec,
    num_classes: usize,
    task_index: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = match part.mode {
        ProportionMode::PerTask => {
            derive_stream(seed, &[Purpose::Proportions.label(), task_index as u64])
        }
        ProportionMode::Fixed => derive_stream(seed, &[Purpose::Proportions.label()]),
    };
    (0..num_classes)
        .map(|_| dirichlet(part.dirichlet_alpha, part.num_clients, &mut rng))
        .collect()
}

pub fn partition_task(
    task: &TaskData,
    part: &PartitionSpec,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    part.validate()?;
    let m = part.num_clients;
    let pool = task.train.len();
    let required = m * part.min_samples_per_client;
    if pool < required {
        return Err(Error::InfeasiblePartition {
            clients: m,
            floor: part.min_samples_per_client,
            required,
            available: pool,
        });
    }

    let props = class_proportions(part, num_classes, task.index, seed);
    let mut rng = derive_stream(seed, &[Purpose::Assignment.label(), task.index as u64]);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (class, class_props) in props.iter().enumerate() {
        let mut rows: Vec<usize> = (0..pool)
            .filter(|&r| task.train.label(r) == class)
            .collect();
        rows.shuffle(&mut rng);
        let counts = largest_remainder(class_props, rows.len());
        let mut start = 0;
        for (client, &n) in counts.iter().enumerate() {
            shards[client].extend_from_slice(&rows[start..start + n]);
            start += n;
        }
    }

    // Floor repair: lowest-index deficient client first, donor is the
    // currently largest shard (lowest index on ties), giving its last row.
    while let Some(needy) = shards
        .iter()
        .position(|s| s.len() < part.min_samples_per_client)
    {
        let donor = (0..m)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("m >= 1");
        let (pos, _) = shards[donor]
            .iter()
            .enumerate()
            .max_by_key(|&(_, r)| *r)
            .expect("donor shard is non-empty");
        let row = shards[donor].swap_remove(pos);
        shards[needy].push(row);
    }

    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(client, mut rows)| {
            rows.sort_unstable();
            ClientShard {
                task_index: task.index,
                client_index: client,
                data: task.train.select(&rows),
            }
        })
        .collect())
}

/// Partition every task of a sequence; `result[task][client]`.
pub fn partition_sequence(
    sequence: &TaskSequence,
    part: &PartitionSpec,
    seed: u64,
) -> Result<Vec<Vec<ClientShard>>> {
    sequence
        .tasks
        .iter()
        .map(|t| partition_task(t, part, sequence.num_classes, seed))
        .collect()
}

/// Write a sequence and its partition in the plain-text dataset format
/// documented in the README.
pub fn write_dataset(
    sequence: &TaskSequence,
    shards: &[Vec<ClientShard>],
    out: &mut impl Write,
) -> std::io::Result<()> {
    let clients = shards.first().map_or(0, Vec::len);
    writeln!(out, "fdilsim-dataset v1")?;
    writeln!(
        out,
        "tasks={} clients={} input_dim={} num_classes={}",
        sequence.len(),
        clients,
        sequence.input_dim,
        sequence.num_classes
    )?;
    for (task, task_shards) in sequence.tasks.iter().zip(shards) {
        let sizes: Vec<String> = task_shards
            .iter()
            .map(|s| s.data.len().to_string())
            .collect();
        writeln!(
            out,
            "task={} train={} test={} shards={}",
            task.index + 1,
            task.train.len(),
            task.test.len(),
            sizes.join(",")
        )?;
    }
    for (task, task_shards) in sequence.tasks.iter().zip(shards) {
        for shard in task_shards {
            writeln!(
                out,
                "block task={} client={}",
                task.index + 1,
                shard.client_index
            )?;
            write_rows(&shard.data, out)?;
        }
        writeln!(out, "block task={} test", task.index + 1)?;
        write_rows(&task.test, out)?;
    }
    Ok(())
}

fn write_rows(batch: &Minibatch, out: &mut impl Write) -> std::io::Result<()> {
    for i in 0..batch.len() {
        write!(out, "{},{}", batch.id(i), batch.label(i))?;
        for v in batch.row(i) {
            write!(out, ",{}", crate::runlog::fmt_f64(*v))?;
        }
        writeln!(out)?;
    }
    Ok(())
}
