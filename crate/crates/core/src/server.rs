//! The protocol engine: client sampling, aggregation, the global step, the
//! server-side proximal blend, and the task/sequence loops.
//!
//! Per round on task `i` (1-based):
//!
//! ```text
//! S      = N of M clients, uniformly without replacement
//! Δ      = (1/N) Σ_{m∈S} local_update_m(θ)
//! θ̄      = θ + γ_G(i) Δ
//! θ_next = θ̄                                   if i = 1 or algorithm ≠ special
//!        = θ̄/(1+λ) + λ/(1+λ) · θ_{i-1}          otherwise
//! ```

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{local_update, ClientUpdate, LocalConfig, LocalMode};
use crate::datagen::{ClientShard, TaskSequence};
use crate::error::{Error, Result};
use crate::metrics::{joint_grad_norm_sq, joint_loss, AccuracyMatrix};
use crate::model::{accuracy, param_count, ModelSpec, ParamVector};
use crate::rng::{derive_stream, Purpose, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Server-side proximal anchor.
    Special,
    /// Client-side proximal SGD, plain server averaging.
    SpecialC,
    #[serde(rename = "fedavg")]
    FedAvg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GlobalLrSchedule {
    Constant(f64),
    /// `γ_G = 1 / i` on task `i`.
    TaskDecay,
}

impl GlobalLrSchedule {
    pub fn rate(&self, task: usize) -> f64 {
        match *self {
            GlobalLrSchedule::Constant(g) => g,
            GlobalLrSchedule::TaskDecay => 1.0 / task as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub num_clients: usize,
    pub participants_per_round: usize,
    pub rounds_per_task: usize,
    pub local_epochs: usize,
    pub local_lr: f64,
    pub batch_size: usize,
    pub global_lr: GlobalLrSchedule,
    pub prox_lambda: f64,
    pub algorithm: Algorithm,
    pub master_seed: u64,
    pub init_scale: f64,
    /// Evaluate every seen task's test accuracy after each round.
    pub eval_every_round: bool,
    /// Record `‖∇f_{1:i}‖²` and `f_{1:i}` after each round.
    pub joint_every_round: bool,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("hyper-parameters", r.to_string()));
        if self.num_clients == 0 {
            return bad("num_clients must be at least 1");
        }
        if self.participants_per_round == 0 || self.participants_per_round > self.num_clients {
            return bad("participants_per_round must satisfy 1 <= N <= num_clients");
        }
        if self.rounds_per_task == 0 {
            return bad("rounds_per_task must be at least 1");
        }
        if !(self.prox_lambda >= 0.0 && self.prox_lambda.is_finite()) {
            return bad("prox_lambda must be >= 0");
        }
        if let GlobalLrSchedule::Constant(g) = self.global_lr {
            if !(g > 0.0 && g.is_finite()) {
                return bad("global_lr must be positive");
            }
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be >= 0");
        }
        LocalConfig {
            epochs: self.local_epochs,
            local_lr: self.local_lr,
            batch_size: self.batch_size,
            mode: LocalMode::Plain,
        }
        .validate()
    }

    /// Whether the server blends with the previous task's model.
    pub fn uses_server_blend(&self) -> bool {
        self.algorithm == Algorithm::Special
    }
}

/// `N` distinct ids from `[0, M)`, each subset equally likely, sorted.
pub fn sample_clients(m: usize, n: usize, rng: &mut Stream) -> Result<Vec<usize>> {
    if n == 0 || n > m {
        return Err(Error::invalid(
            "client sampling",
            format!("need 1 <= N <= M, got N = {n}, M = {m}"),
        ));
    }
    let mut ids: Vec<usize> = (0..m).collect();
    if n < m {
        // Partial Fisher-Yates: the first n slots end up a uniform subset.
        for k in 0..n {
            let j = rng.gen_range(k..m);
            ids.swap(k, j);
        }
        ids.truncate(n);
        ids.sort_unstable();
    }
    Ok(ids)
}

/// Mean of the updates, summed in ascending client-id order.
pub fn aggregate(updates: &[(usize, ParamVector)]) -> Result<ParamVector> {
    let first = updates.first().ok_or(Error::Empty("update list"))?;
    let d = first.1.len();
    let mut order: Vec<&(usize, ParamVector)> = updates.iter().collect();
    order.sort_by_key(|(id, _)| *id);
    let mut sum = vec![0.0; d];
    for (_, delta) in order {
        delta.check_len(d, "aggregated update")?;
        for (s, v) in sum.iter_mut().zip(delta.as_slice()) {
            *s += v;
        }
    }
    let n = updates.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(ParamVector::from_raw(sum))
}

/// Minimiser of `‖u − θ̄‖² + λ‖u − anchor‖²`.
pub fn proximal_blend(
    theta_bar: &ParamVector,
    anchor: &ParamVector,
    lambda: f64,
) -> Result<ParamVector> {
    anchor.check_len(theta_bar.len(), "proximal blend anchor")?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("proximal blend", "lambda must be >= 0"));
    }
    if lambda == 0.0 {
        return Ok(theta_bar.clone());
    }
    let w_bar = 1.0 / (1.0 + lambda);
    let w_anchor = lambda / (1.0 + lambda);
    Ok(ParamVector::from_raw(
        theta_bar
            .as_slice()
            .iter()
            .zip(anchor.as_slice())
            .map(|(b, a)| w_bar * b + w_anchor * a)
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// 1-based task index.
    pub task: usize,
    /// Rounds completed on the current task.
    pub round: usize,
    pub params: ParamVector,
    /// `θ_i^0`, the model the current task started from.
    pub task_start: ParamVector,
    /// `θ_{i-1}`; for the first task this is the initial model.
    pub anchor: ParamVector,
}

impl ServerState {
    pub fn new(init: ParamVector) -> Self {
        ServerState {
            task: 0,
            round: 0,
            task_start: init.clone(),
            anchor: init.clone(),
            params: init,
        }
    }

    /// Move on to task `task`, starting from the current model.
    pub fn begin_task(&mut self, task: usize) {
        self.task = task;
        self.round = 0;
        self.anchor = self.params.clone();
        self.task_start = self.params.clone();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based task.
    pub task: usize,
    /// 1-based: the record describes `θ_i^round`.
    pub round: usize,
    pub selected: Vec<usize>,
    pub delta_norm: f64,
    /// `‖θ_i^round − θ_i^0‖²`.
    pub drift_sq: f64,
    pub joint_grad_sq: Option<f64>,
    pub joint_loss: Option<f64>,
    /// Test accuracy on tasks `1..=task`.
    pub accuracies: Option<Vec<f64>>,
    pub grad_norm_max: f64,
    pub grad_norm_sq_mean: f64,
}

/// Hooks into the server loop, used by tests to check the anchor chain.
pub trait RoundObserver {
    fn on_blend(&mut self, _task: usize, _round: usize, _anchor: &ParamVector) {}
    fn on_task_end(&mut self, _task: usize, _params: &ParamVector) {}
}

pub struct NoObserver;

impl RoundObserver for NoObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub rounds: Vec<RoundRecord>,
    pub initial: ParamVector,
    /// `θ_i` for `i = 1..=K`.
    pub final_models: Vec<ParamVector>,
    pub accuracy: AccuracyMatrix,
}

pub struct Simulator<'a> {
    pub spec: &'a ModelSpec,
    pub sequence: &'a TaskSequence,
    /// `shards[task][client]`, tasks 0-based.
    pub shards: &'a [Vec<ClientShard>],
    pub hp: &'a HyperParams,
}

impl<'a> Simulator<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        sequence: &'a TaskSequence,
        shards: &'a [Vec<ClientShard>],
        hp: &'a HyperParams,
    ) -> Result<Self> {
        hp.validate()?;
        spec.validate()?;
        if sequence.is_empty() {
            return Err(Error::Empty("task sequence"));
        }
        if shards.len() != sequence.len() {
            return Err(Error::DimensionMismatch {
                context: "tasks with shards",
                expected: sequence.len(),
                actual: shards.len(),
            });
        }
        if let Some(bad) = shards.iter().find(|s| s.len() != hp.num_clients) {
            return Err(Error::DimensionMismatch {
                context: "shards per task",
                expected: hp.num_clients,
                actual: bad.len(),
            });
        }
        if sequence.input_dim != spec.input_dim || sequence.num_classes != spec.num_classes {
            return Err(Error::invalid(
                "simulator",
                "model spec does not match the task sequence dimensions",
            ));
        }
        Ok(Simulator {
            spec,
            sequence,
            shards,
            hp,
        })
    }

    /// `θ_0`: small uniform values derived from the master seed.
    pub fn initial_params(&self) -> ParamVector {
        let mut rng = derive_stream(self.hp.master_seed, &[Purpose::Init.label()]);
        ParamVector::random_init(self.spec, self.hp.init_scale, &mut rng)
    }

    fn local_config<'s>(&self, state: &'s ServerState) -> LocalConfig<'s> {
        let mode = match self.hp.algorithm {
            Algorithm::SpecialC if state.task >= 2 => LocalMode::ClientProx {
                lambda: self.hp.prox_lambda,
                anchor: &state.anchor,
            },
            _ => LocalMode::Plain,
        };
        LocalConfig {
            epochs: self.hp.local_epochs,
            local_lr: self.hp.local_lr,
            batch_size: self.hp.batch_size,
            mode,
        }
    }

    pub fn run_round(
        &self,
        state: &mut ServerState,
        observer: &mut dyn RoundObserver,
    ) -> Result<RoundRecord> {
        let task = state.task;
        if task == 0 || task > self.sequence.len() {
            return Err(Error::invalid(
                "run_round",
                format!("no task {task} in sequence"),
            ));
        }
        let t = state.round;
        let seed = self.hp.master_seed;
        let mut sampler = derive_stream(
            seed,
            &[Purpose::ClientSampling.label(), task as u64, t as u64],
        );
        let selected = sample_clients(
            self.hp.num_clients,
            self.hp.participants_per_round,
            &mut sampler,
        )?;

        let cfg = self.local_config(state);
        let task_shards = &self.shards[task - 1];
        let params = &state.params;
        let updates: Vec<(usize, ClientUpdate)> = selected
            .par_iter()
            .map(|&m| {
                let mut rng = derive_stream(
                    seed,
                    &[
                        Purpose::LocalMinibatch.label(),
                        task as u64,
                        t as u64,
                        m as u64,
                    ],
                );
                local_update(self.spec, params, &task_shards[m].data, &cfg, &mut rng)
                    .map(|u| (m, u))
            })
            .collect::<Result<_>>()?;

        let grad_norm_max = updates
            .iter()
            .map(|(_, u)| u.grad_norm_max)
            .fold(0.0, f64::max);
        let grad_norm_sq_mean = updates
            .iter()
            .map(|(_, u)| u.grad_norm_sq_mean)
            .sum::<f64>()
            / updates.len() as f64;
        let deltas: Vec<(usize, ParamVector)> =
            updates.into_iter().map(|(m, u)| (m, u.delta)).collect();
        let delta = aggregate(&deltas)?;

        self.apply_update(state, &delta, observer)?;

        let (joint_grad_sq, joint_loss_value) = if self.hp.joint_every_round {
            let seen = &self.shards[..task];
            (
                Some(joint_grad_norm_sq(self.spec, &state.params, seen)?),
                Some(joint_loss(self.spec, &state.params, seen)?),
            )
        } else {
            (None, None)
        };
        let accuracies = if self.hp.eval_every_round {
            Some(self.evaluate(&state.params, task)?)
        } else {
            None
        };

        Ok(RoundRecord {
            task,
            round: state.round,
            selected,
            delta_norm: delta.norm(),
            drift_sq: state.params.dist_sq(&state.task_start),
            joint_grad_sq,
            joint_loss: joint_loss_value,
            accuracies,
            grad_norm_max,
            grad_norm_sq_mean,
        })
    }

    /// Server half of a round: global step, then the blend when it applies.
    pub fn apply_update(
        &self,
        state: &mut ServerState,
        delta: &ParamVector,
        observer: &mut dyn RoundObserver,
    ) -> Result<()> {
        delta.check_len(state.params.len(), "aggregated update")?;
        let task = state.task;
        let gamma_g = self.hp.global_lr.rate(task);
        let theta_bar = ParamVector::from_raw(
            state
                .params
                .as_slice()
                .iter()
                .zip(delta.as_slice())
                .map(|(p, d)| p + gamma_g * d)
                .collect(),
        );
        let next = if self.hp.uses_server_blend() && task >= 2 {
            observer.on_blend(task, state.round + 1, &state.anchor);
            proximal_blend(&theta_bar, &state.anchor, self.hp.prox_lambda)?
        } else {
            theta_bar
        };
        next.check_finite("global model")?;
        state.params = next;
        state.round += 1;
        Ok(())
    }

    /// Test accuracy on tasks `1..=upto`.
    pub fn evaluate(&self, params: &ParamVector, upto: usize) -> Result<Vec<f64>> {
        self.sequence.tasks[..upto]
            .iter()
            .map(|t| accuracy(self.spec, params, &t.test))
            .collect()
    }

    /// Run all `T` rounds of task `task`, leaving `θ_task` in `state.params`.
    pub fn run_task(
        &self,
        state: &mut ServerState,
        task: usize,
        observer: &mut dyn RoundObserver,
    ) -> Result<Vec<RoundRecord>> {
        if task != state.task + 1 {
            return Err(Error::invalid(
                "run_task",
                format!("task {task} requested after task {}", state.task),
            ));
        }
        state.begin_task(task);
        let mut records = Vec::with_capacity(self.hp.rounds_per_task);
        for _ in 0..self.hp.rounds_per_task {
            records.push(self.run_round(state, observer)?);
        }
        observer.on_task_end(task, &state.params);
        Ok(records)
    }

    pub fn run(&self) -> Result<RunLog> {
        self.run_observed(&mut NoObserver)
    }

    pub fn run_observed(&self, observer: &mut dyn RoundObserver) -> Result<RunLog> {
        let k = self.sequence.len();
        let initial = self.initial_params();
        debug_assert_eq!(initial.len(), param_count(self.spec));
        let mut state = ServerState::new(initial.clone());
        let mut rounds = Vec::with_capacity(k * self.hp.rounds_per_task);
        let mut final_models = Vec::with_capacity(k);
        let mut accuracy_matrix = AccuracyMatrix::new(k);
        for task in 1..=k {
            rounds.extend(self.run_task(&mut state, task, observer)?);
            for (j, a) in self.evaluate(&state.params, task)?.into_iter().enumerate() {
                accuracy_matrix.set(task, j + 1, a)?;
            }
            final_models.push(state.params.clone());
        }
        Ok(RunLog {
            rounds,
            initial,
            final_models,
            accuracy: accuracy_matrix,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_participation_takes_everyone() {
        let mut rng = derive_stream(1, &[]);
        assert_eq!(sample_clients(4, 4, &mut rng).unwrap(), vec![0, 1, 2, 3]);
        assert!(sample_clients(4, 5, &mut rng).is_err());
        assert!(sample_clients(4, 0, &mut rng).is_err());
    }

    #[test]
    fn sampled_ids_sorted_and_distinct() {
        let mut rng = derive_stream(3, &[]);
        for _ in 0..200 {
            let ids = sample_clients(10, 4, &mut rng).unwrap();
            assert_eq!(ids.len(), 4);
            assert!(ids.windows(2).all(|w| w[0] < w[1]));
            assert!(ids.iter().all(|&i| i < 10));
        }
    }

    #[test]
    fn single_client_frequency() {
        let mut rng = derive_stream(11, &[5]);
        let draws = 100_000;
        let mut hits = [0usize; 8];
        for _ in 0..draws {
            hits[sample_clients(8, 1, &mut rng).unwrap()[0]] += 1;
        }
        for h in hits {
            let f = h as f64 / draws as f64;
            assert!((0.115..=0.135).contains(&f), "{f}");
        }
    }

    #[test]
    fn aggregate_examples() {
        let a = ParamVector::new(vec![1.0, 3.0]).unwrap();
        let b = ParamVector::new(vec![3.0, 1.0]).unwrap();
        assert_eq!(
            aggregate(&[(0, a.clone()), (1, b)]).unwrap().as_slice(),
            &[2.0, 2.0]
        );
        assert_eq!(aggregate(&[(5, a.clone())]).unwrap(), a);
        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[(0, a), (1, ParamVector::zeros(3))]).is_err());
    }

    #[test]
    fn aggregate_is_order_invariant() {
        let v = |x: f64| ParamVector::new(vec![x, 0.1 * x, 1e16 * x]).unwrap();
        let arrival = [(3, v(0.3)), (1, v(1e-8)), (2, v(-7.1))];
        let sorted = [(1, v(1e-8)), (2, v(-7.1)), (3, v(0.3))];
        let a = aggregate(&arrival).unwrap();
        let b = aggregate(&sorted).unwrap();
        let bits = |p: &ParamVector| p.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn blend_examples() {
        let bar = ParamVector::new(vec![2.0, 2.0]).unwrap();
        let anchor = ParamVector::zeros(2);
        assert_eq!(proximal_blend(&bar, &anchor, 0.0).unwrap(), bar);
        assert_eq!(proximal_blend(&bar, &bar, 3.0).unwrap(), bar);
        assert_eq!(
            proximal_blend(&bar, &anchor, 1.0).unwrap().as_slice(),
            &[1.0, 1.0]
        );
        assert!(proximal_blend(&bar, &ParamVector::zeros(3), 1.0).is_err());
        assert!(proximal_blend(&bar, &anchor, -1.0).is_err());
    }

    #[test]
    fn task_decay_schedule() {
        assert_eq!(GlobalLrSchedule::TaskDecay.rate(1), 1.0);
        assert_eq!(GlobalLrSchedule::TaskDecay.rate(4), 0.25);
        assert_eq!(GlobalLrSchedule::Constant(0.7).rate(9), 0.7);
    }
}
