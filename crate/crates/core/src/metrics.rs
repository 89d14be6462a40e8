//! Continual-learning metrics and joint-objective instrumentation.

use crate::datagen::ClientShard;
use crate::error::{Error, Result};
use crate::model::{loss, loss_and_grad, param_count, ModelSpec, ParamVector};

/// Lower-triangular accuracy table: `get(i, j)` is the accuracy on task `j`
/// after finishing task `i` (both 1-based, `j <= i`).
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        AccuracyMatrix {
            rows: (1..=num_tasks).map(|i| vec![None; i]).collect(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        self.check_index(i, j)?;
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(
                "accuracy entry",
                format!("A[{i}][{j}] = {value} outside [0, 1]"),
            ));
        }
        self.rows[i - 1][j - 1] = Some(value);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i == 0 || j == 0 || j > i || i > self.rows.len() {
            return None;
        }
        self.rows[i - 1][j - 1]
    }

    fn check_index(&self, i: usize, j: usize) -> Result<()> {
        if i == 0 || j == 0 || i > self.rows.len() || j > i {
            return Err(Error::invalid(
                "accuracy index",
                format!(
                    "({i}, {j}) outside the lower triangle of a {0}x{0} matrix",
                    self.rows.len()
                ),
            ));
        }
        Ok(())
    }

    fn require(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j)
            .ok_or_else(|| Error::invalid("accuracy matrix", format!("missing entry A[{i}][{j}]")))
    }
}

/// Mean final accuracy over all tasks.
pub fn acc(a: &AccuracyMatrix) -> Result<f64> {
    let k = a.num_tasks();
    if k == 0 {
        return Err(Error::Empty("accuracy matrix"));
    }
    let mut sum = 0.0;
    for j in 1..=k {
        sum += a.require(k, j)?;
    }
    Ok(sum / k as f64)
}

/// Mean change in earlier-task accuracy between learning a task and the end.
pub fn bwt(a: &AccuracyMatrix) -> Result<f64> {
    let k = a.num_tasks();
    if k < 2 {
        return Err(Error::invalid(
            "bwt",
            "backward transfer needs at least 2 tasks",
        ));
    }
    let mut sum = 0.0;
    for i in 1..k {
        sum += a.require(k, i)? - a.require(i, i)?;
    }
    Ok(sum / (k - 1) as f64)
}

/// `∇f_i(θ) = (1/M) Σ_m ∇f_{i,m}(θ)` on full shards.
pub fn task_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    shards: &[ClientShard],
) -> Result<ParamVector> {
    if shards.is_empty() {
        return Err(Error::Empty("shard list"));
    }
    let mut sum = vec![0.0; param_count(spec)];
    for shard in shards {
        let (_, g) = loss_and_grad(spec, params, &shard.data)?;
        for (s, v) in sum.iter_mut().zip(g.as_slice()) {
            *s += v;
        }
    }
    let m = shards.len() as f64;
    sum.iter_mut().for_each(|s| *s /= m);
    Ok(ParamVector::from_raw(sum))
}

/// `∇f_{1:K}(θ) = Σ_i ∇f_i(θ)` over the given tasks' shards.
pub fn joint_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    shards: &[Vec<ClientShard>],
) -> Result<ParamVector> {
    if shards.is_empty() {
        return Err(Error::Empty("task list"));
    }
    let mut sum = vec![0.0; param_count(spec)];
    for task in shards {
        let g = task_gradient(spec, params, task)?;
        for (s, v) in sum.iter_mut().zip(g.as_slice()) {
            *s += v;
        }
    }
    Ok(ParamVector::from_raw(sum))
}

/// `‖∇f_{1:K}(θ)‖²` on full shards. Evaluation-only instrumentation.
pub fn joint_grad_norm_sq(
    spec: &ModelSpec,
    params: &ParamVector,
    shards: &[Vec<ClientShard>],
) -> Result<f64> {
    Ok(joint_gradient(spec, params, shards)?.norm_sq())
}

/// `f_{1:K}(θ) = Σ_i (1/M) Σ_m f_{i,m}(θ)` on full shards.
pub fn joint_loss(
    spec: &ModelSpec,
    params: &ParamVector,
    shards: &[Vec<ClientShard>],
) -> Result<f64> {
    let mut total = 0.0;
    for task in shards {
        if task.is_empty() {
            return Err(Error::Empty("shard list"));
        }
        let mut sum = 0.0;
        for shard in task {
            sum += loss(spec, params, &shard.data)?;
        }
        total += sum / task.len() as f64;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(entries: &[(usize, usize, f64)], k: usize) -> AccuracyMatrix {
        let mut a = AccuracyMatrix::new(k);
        for &(i, j, v) in entries {
            a.set(i, j, v).unwrap();
        }
        a
    }

    #[test]
    fn acc_examples() {
        let a = matrix(&[(1, 1, 0.9), (2, 1, 0.8), (2, 2, 0.7)], 2);
        assert!((acc(&a).unwrap() - 0.75).abs() < 1e-15);
        let one = matrix(&[(1, 1, 0.42)], 1);
        assert_eq!(acc(&one).unwrap(), 0.42);
        let ones = matrix(&[(1, 1, 1.0), (2, 1, 1.0), (2, 2, 1.0)], 2);
        assert_eq!(acc(&ones).unwrap(), 1.0);
    }

    #[test]
    fn bwt_examples() {
        let a = matrix(&[(1, 1, 0.9), (2, 1, 0.8), (2, 2, 0.7)], 2);
        assert!((bwt(&a).unwrap() + 0.1).abs() < 1e-15);
        let flat = matrix(&[(1, 1, 0.6), (2, 2, 0.5), (2, 1, 0.6)], 2);
        assert_eq!(bwt(&flat).unwrap(), 0.0);
        let three = matrix(
            &[
                (1, 1, 0.5),
                (2, 2, 0.8),
                (3, 1, 0.6),
                (3, 2, 0.5),
                (3, 3, 0.9),
                (2, 1, 0.5),
            ],
            3,
        );
        assert!((bwt(&three).unwrap() + 0.1).abs() < 1e-12);
    }

    #[test]
    fn error_paths() {
        assert!(bwt(&matrix(&[(1, 1, 0.5)], 1)).is_err());
        assert!(acc(&AccuracyMatrix::new(2)).is_err());
        let mut a = AccuracyMatrix::new(2);
        assert!(a.set(1, 2, 0.5).is_err());
        assert!(a.set(2, 1, 1.5).is_err());
        assert_eq!(a.get(1, 2), None);
    }
}
