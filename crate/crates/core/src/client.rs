//! One client's local training for one round.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{loss_and_grad, param_count, Minibatch, ModelSpec, ParamVector};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LocalMode<'a> {
    Plain,
    /// Proximal SGD toward `anchor`: each step is followed by
    /// `prox(x) = argmin ½‖θ − x‖² + λ‖θ − anchor‖²`.
    ClientProx {
        lambda: f64,
        anchor: &'a ParamVector,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig<'a> {
    /// Number of minibatch SGD steps per round.
    pub epochs: usize,
    pub local_lr: f64,
    pub batch_size: usize,
    pub mode: LocalMode<'a>,
}

impl LocalConfig<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("local config", "epochs must be at least 1"));
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return Err(Error::invalid("local config", "local_lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid(
                "local config",
                "batch_size must be at least 1",
            ));
        }
        if let LocalMode::ClientProx { lambda, .. } = self.mode {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::invalid("local config", "prox lambda must be >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub delta: ParamVector,
    pub steps_taken: usize,
    pub grad_norm_max: f64,
    pub grad_norm_sq_mean: f64,
}

/// Closed-form client proximal mapping, `(x + 2λ·anchor) / (1 + 2λ)`.
pub fn client_prox(x: &[f64], anchor: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if x.len() != anchor.len() {
        return Err(Error::DimensionMismatch {
            context: "client prox",
            expected: x.len(),
            actual: anchor.len(),
        });
    }
    let mut out = x.to_vec();
    prox_in_place(&mut out, anchor, lambda);
    Ok(out)
}

fn prox_in_place(x: &mut [f64], anchor: &[f64], lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    let two_l = 2.0 * lambda;
    let denom = 1.0 + two_l;
    for (v, a) in x.iter_mut().zip(anchor) {
        *v = (*v + two_l * a) / denom;
    }
}

/// Draw one minibatch: the whole shard when `batch_size` covers it, otherwise
/// `batch_size` rows uniformly with replacement.
pub fn draw_minibatch(shard: &Minibatch, batch_size: usize, rng: &mut Stream, out: &mut Minibatch) {
    out.clear();
    if batch_size >= shard.len() {
        for i in 0..shard.len() {
            out.push(shard.row(i), shard.label(i), shard.id(i));
        }
        return;
    }
    let mut rows: Vec<usize> = (0..batch_size)
        .map(|_| rng.gen_range(0..shard.len()))
        .collect();
    rows.sort_unstable();
    for r in rows {
        out.push(shard.row(r), shard.label(r), shard.id(r));
    }
}

pub fn local_update(
    spec: &ModelSpec,
    global_params: &ParamVector,
    shard: &Minibatch,
    cfg: &LocalConfig<'_>,
    rng: &mut Stream,
) -> Result<ClientUpdate> {
    cfg.validate()?;
    if shard.is_empty() {
        return Err(Error::Empty("client shard"));
    }
    let d = param_count(spec);
    global_params.check_len(d, "global parameters")?;
    if let LocalMode::ClientProx { anchor, .. } = cfg.mode {
        anchor.check_len(d, "prox anchor")?;
    }

    let mut theta = global_params.clone();
    let mut batch = Minibatch::empty(shard.input_dim());
    let mut grad_norm_max = 0.0f64;
    let mut grad_sq_sum = 0.0;
    for _ in 0..cfg.epochs {
        draw_minibatch(shard, cfg.batch_size, rng, &mut batch);
        let (_, grad) = loss_and_grad(spec, &theta, &batch)?;
        let g_sq = grad.norm_sq();
        grad_norm_max = grad_norm_max.max(g_sq.sqrt());
        grad_sq_sum += g_sq;
        let lr = cfg.local_lr;
        for (t, g) in theta.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *t -= lr * g;
        }
        if let LocalMode::ClientProx { lambda, anchor } = cfg.mode {
            prox_in_place(theta.as_mut_slice(), anchor.as_slice(), lambda);
        }
    }
    let delta = theta.sub(global_params);
    delta.check_finite("client update")?;
    Ok(ClientUpdate {
        delta,
        steps_taken: cfg.epochs,
        grad_norm_max,
        grad_norm_sq_mean: grad_sq_sum / cfg.epochs as f64,
    })
}
