//! Estimation of the gradient, smoothness and variance constants, and the
//! drift, backward-transfer and convergence bounds evaluated against logged
//! runs.
//!
//! Constants are empirical maxima (or minima, for alignment) over a finite
//! probe set, so every estimate is a lower bound on the true supremum and
//! growing the probe set can only move it outward.

use rand::Rng;

use crate::client::draw_minibatch;
use crate::datagen::ClientShard;
use crate::error::{Error, Result};
use crate::metrics::{joint_gradient, joint_loss};
use crate::model::{loss_and_grad, param_count, Minibatch, ModelSpec, ParamVector};
use crate::rng::{derive_stream, Purpose};
use crate::server::{Algorithm, HyperParams, RunLog};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub random_points: usize,
    /// Random probes are uniform in a box of this half-width.
    pub random_scale: f64,
    pub minibatch_draws: usize,
    pub batch_size: usize,
}

/// Where to probe.
#[derive(Debug, Clone, Copy, Default)]
pub struct Probes<'a> {
    /// Centre of the random probe box (origin when absent).
    pub center: Option<&'a ParamVector>,
    /// Extra probe points, typically per-task final models.
    pub trajectory: &'a [ParamVector],
    /// `θ_K^0`, reference point for the backward-transfer alignment.
    pub bkt_reference: Option<&'a ParamVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantEstimates {
    pub b: f64,
    pub l: f64,
    pub sigma_l: f64,
    pub sigma_g: f64,
    pub sigma_t: f64,
    /// Min cosine between `∇f_{1:K-1}(θ_K^0)` and last-task client gradients.
    pub eps_bkt: Option<f64>,
    /// Min cosine between task gradients at a common point.
    pub eps_corr: Option<f64>,
    pub probe_points: usize,
    pub minibatch_draws: usize,
}

fn cosine(a: &ParamVector, b: &ParamVector) -> Option<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

fn fold_min(acc: Option<f64>, v: Option<f64>) -> Option<f64> {
    match (acc, v) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

pub fn probe_points(
    spec: &ModelSpec,
    cfg: &ProbeConfig,
    probes: &Probes<'_>,
    seed: u64,
) -> Vec<(u64, ParamVector)> {
    let d = param_count(spec);
    let mut rng = derive_stream(seed, &[Purpose::Probe.label(), 0]);
    let center = probes.center.map(|c| c.as_slice().to_vec());
    let mut out = Vec::with_capacity(cfg.random_points + probes.trajectory.len());
    for k in 0..cfg.random_points {
        let v: Vec<f64> = (0..d)
            .map(|j| {
                let c = center.as_ref().map_or(0.0, |c| c[j]);
                c + rng.gen_range(-cfg.random_scale..=cfg.random_scale)
            })
            .collect();
        out.push((k as u64, ParamVector::from_raw(v)));
    }
    for (k, p) in probes.trajectory.iter().enumerate() {
        out.push(((1u64 << 32) + k as u64, p.clone()));
    }
    out
}

/// Estimate B, L, σ_L, σ_G, σ_T and the alignment constants.
///
/// `shards[task][client]` covers every task of interest; the last task is the
/// one whose client gradients enter the backward-transfer alignment.
pub fn estimate_constants(
    spec: &ModelSpec,
    shards: &[Vec<ClientShard>],
    cfg: &ProbeConfig,
    probes: &Probes<'_>,
    seed: u64,
) -> Result<ConstantEstimates> {
    if shards.is_empty() || shards.iter().any(Vec::is_empty) {
        return Err(Error::Empty("shards for constant estimation"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid(
            "probe config",
            "batch_size must be at least 1",
        ));
    }
    let points = probe_points(spec, cfg, probes, seed);
    if points.len() < 2 {
        return Err(Error::invalid(
            "probe config",
            format!(
                "smoothness needs at least 2 probe points, got {}",
                points.len()
            ),
        ));
    }
    let k = shards.len();
    let d = param_count(spec);

    let mut b = 0.0f64;
    let mut sigma_l_sq = 0.0f64;
    let mut sigma_g_sq = 0.0f64;
    let mut sigma_t_sq = 0.0f64;
    let mut eps_bkt = None;
    let mut eps_corr = None;
    // client_grads[probe][task][client]
    let mut client_grads: Vec<Vec<Vec<ParamVector>>> = Vec::with_capacity(points.len());

    let bkt_ref = match (k >= 2, probes.bkt_reference) {
        (true, Some(r)) => Some(joint_gradient(spec, r, &shards[..k - 1])?),
        _ => None,
    };

    let mut batch = Minibatch::empty(spec.input_dim);
    for (probe_id, theta) in &points {
        theta.check_len(d, "probe point")?;
        let mut per_task = Vec::with_capacity(k);
        let mut task_grads = Vec::with_capacity(k);
        for (i, task) in shards.iter().enumerate() {
            let mut per_client = Vec::with_capacity(task.len());
            for shard in task {
                let (_, full) = loss_and_grad(spec, theta, &shard.data)?;
                b = b.max(full.norm());
                let mut rng = derive_stream(
                    seed,
                    &[
                        Purpose::Probe.label(),
                        1,
                        *probe_id,
                        i as u64,
                        shard.client_index as u64,
                    ],
                );
                if cfg.minibatch_draws > 0 {
                    let mut var = 0.0;
                    for _ in 0..cfg.minibatch_draws {
                        draw_minibatch(&shard.data, cfg.batch_size, &mut rng, &mut batch);
                        let (_, g) = loss_and_grad(spec, theta, &batch)?;
                        b = b.max(g.norm());
                        var += g.dist_sq(&full);
                    }
                    sigma_l_sq = sigma_l_sq.max(var / cfg.minibatch_draws as f64);
                }
                per_client.push(full);
            }
            let mut mean = vec![0.0; d];
            for g in &per_client {
                for (s, v) in mean.iter_mut().zip(g.as_slice()) {
                    *s += v;
                }
            }
            let inv = task.len() as f64;
            let mean = ParamVector::from_raw(mean.into_iter().map(|s| s / inv).collect());
            for g in &per_client {
                sigma_g_sq = sigma_g_sq.max(g.dist_sq(&mean));
            }
            if i == k - 1 {
                if let Some(r) = &bkt_ref {
                    for g in &per_client {
                        eps_bkt = fold_min(eps_bkt, cosine(r, g));
                    }
                }
            }
            per_task.push(per_client);
            task_grads.push(mean);
        }
        for i in 0..k {
            for j in i + 1..k {
                sigma_t_sq = sigma_t_sq.max(task_grads[i].dist_sq(&task_grads[j]));
                eps_corr = fold_min(eps_corr, cosine(&task_grads[i], &task_grads[j]));
            }
        }
        client_grads.push(per_task);
    }

    let mut l = 0.0f64;
    for p in 0..points.len() {
        for q in p + 1..points.len() {
            let dist = points[p].1.dist_sq(&points[q].1).sqrt();
            if dist == 0.0 {
                continue;
            }
            for (gp, gq) in client_grads[p]
                .iter()
                .flatten()
                .zip(client_grads[q].iter().flatten())
            {
                l = l.max(gp.dist_sq(gq).sqrt() / dist);
            }
        }
    }

    Ok(ConstantEstimates {
        b,
        l,
        sigma_l: sigma_l_sq.sqrt(),
        sigma_g: sigma_g_sq.sqrt(),
        sigma_t: sigma_t_sq.sqrt(),
        eps_bkt,
        eps_corr,
        probe_points: points.len(),
        minibatch_draws: cfg.minibatch_draws,
    })
}

/// Within-task drift cap `γ_G² γ_L² E² B² / λ²`; infinite (vacuous) at λ = 0.
pub fn drift_bound(gamma_g: f64, gamma_l: f64, epochs: usize, b: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return f64::INFINITY;
    }
    let e = epochs as f64;
    gamma_g * gamma_g * gamma_l * gamma_l * e * e * b * b / (lambda * lambda)
}

/// Inputs of the backward-transfer correction term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BktInputs {
    pub eps: f64,
    pub sigma_l: f64,
    /// `‖∇f_{1:K-1}(θ_K^0)‖`
    pub grad_norm_prev: f64,
    pub k: usize,
    pub t: usize,
    pub epochs: usize,
    pub num_clients: usize,
    pub participants: usize,
    pub l: f64,
    pub b: f64,
}

/// Vanishing correction `2ε²σ_L²‖∇f_{1:K-1}(θ_K^0)‖² / ((K−1) t E M N L B²)`
/// under partial participation.
pub fn bkt_bound(x: &BktInputs) -> Result<f64> {
    if x.k < 2 {
        return Err(Error::invalid("bkt bound", "needs K >= 2"));
    }
    if x.t == 0 || x.epochs == 0 || x.num_clients == 0 || x.participants == 0 {
        return Err(Error::invalid(
            "bkt bound",
            "t, E, M and N must be positive",
        ));
    }
    if x.l <= 0.0 || x.b <= 0.0 {
        return Err(Error::invalid("bkt bound", "L and B must be positive"));
    }
    let denom = (x.k - 1) as f64
        * x.t as f64
        * x.epochs as f64
        * x.num_clients as f64
        * x.participants as f64
        * x.l
        * x.b
        * x.b;
    Ok(2.0 * x.eps * x.eps * x.sigma_l * x.sigma_l * x.grad_norm_prev * x.grad_norm_prev / denom)
}

/// Full-participation form of the correction, with `M²` in the denominator.
pub fn bkt_bound_full(x: &BktInputs) -> Result<f64> {
    if x.k < 2 {
        return Err(Error::invalid("bkt bound", "needs K >= 2"));
    }
    if x.t == 0 || x.epochs == 0 || x.num_clients == 0 {
        return Err(Error::invalid("bkt bound", "t, E and M must be positive"));
    }
    if x.l <= 0.0 || x.b <= 0.0 {
        return Err(Error::invalid("bkt bound", "L and B must be positive"));
    }
    let m = x.num_clients as f64;
    let denom = (x.k - 1) as f64 * x.t as f64 * x.epochs as f64 * (m * m) * x.l * x.b * x.b;
    Ok(2.0 * x.eps * x.eps * x.sigma_l * x.sigma_l * x.grad_norm_prev * x.grad_norm_prev / denom)
}

/// Rates and participation as seen by the convergence bound on one task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateParams {
    pub gamma_g: f64,
    pub gamma_l: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub num_clients: usize,
    pub participants: usize,
}

impl RateParams {
    pub fn from_hp(hp: &HyperParams, task: usize) -> Self {
        RateParams {
            gamma_g: hp.global_lr.rate(task),
            gamma_l: hp.local_lr,
            epochs: hp.local_epochs,
            lambda: hp.prox_lambda,
            num_clients: hp.num_clients,
            participants: hp.participants_per_round,
        }
    }
}

/// The residual of the task-uniform convergence bound, term by term. The
/// bracketed terms are listed before the `2/(1 − 1/K)` scale is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiTerms {
    pub scale: f64,
    pub b_term: f64,
    pub sigma_g_term: f64,
    pub noise_term: f64,
    pub sigma_l_term: f64,
    pub sigma_t_term: f64,
    pub grad_prev_term: f64,
    pub total: f64,
}

fn check_psi_inputs(r: &RateParams, k: usize) -> Result<()> {
    if r.participants == 0 || r.participants > r.num_clients {
        return Err(Error::invalid(
            "psi residual",
            format!(
                "need 1 <= N <= M, got N = {}, M = {}",
                r.participants, r.num_clients
            ),
        ));
    }
    if k < 2 {
        return Err(Error::invalid("psi residual", "needs K >= 2"));
    }
    Ok(())
}

/// Partial-participation residual Ψ.
pub fn psi_residual(
    c: &ConstantEstimates,
    r: &RateParams,
    k: usize,
    grad_norm_prev: f64,
) -> Result<PsiTerms> {
    check_psi_inputs(r, k)?;
    let (gg, gl, lam) = (r.gamma_g, r.gamma_l, r.lambda);
    let e = r.epochs as f64;
    let kf = k as f64;
    let (m, n) = (r.num_clients as f64, r.participants as f64);
    let (l, b) = (c.l, c.b);
    let (sl2, sg2, st2) = (
        c.sigma_l * c.sigma_l,
        c.sigma_g * c.sigma_g,
        c.sigma_t * c.sigma_t,
    );
    // (M − N) / (N (M − 1)); zero under full participation (and for M = 1).
    let partial = if r.participants == r.num_clients {
        0.0
    } else {
        (m - n) / (n * (m - 1.0))
    };

    let scale = 2.0 / (1.0 - 1.0 / kf);
    let b_term = (gl * gl * e * e * l * l / (lam * lam)
        + kf
        + 3.0 * gg * gl * e * kf * l * partial / (1.0 + lam))
        * b
        * b;
    let sigma_g_term = 12.0 * gg * gl * e * kf * l * partial * sg2 / (1.0 + lam);
    let noise_term = (5.0 * gl * gl * kf * e * l * l
        + 60.0 * gg * gl * gl * gl * e * e * kf * l * l * l * partial / (1.0 + lam))
        * (sl2 + 6.0 * e * sg2);
    let sigma_l_term = 3.0 * gg * gl * l * sl2 / (2.0 * n * (1.0 + lam));
    let sigma_t_term = (kf - 1.0) * (kf - 1.0) * e / kf
        * (3.0 * gg * gl * l / (1.0 + lam))
        * (0.5 + 4.0 * partial)
        * st2;
    let grad_prev_term = grad_norm_prev * grad_norm_prev;
    let total =
        scale * (b_term + sigma_g_term + noise_term + sigma_l_term + sigma_t_term + grad_prev_term);
    Ok(PsiTerms {
        scale,
        b_term,
        sigma_g_term,
        noise_term,
        sigma_l_term,
        sigma_t_term,
        grad_prev_term,
        total,
    })
}

/// Full-participation residual Ψ′ (uses `M` for both counts).
pub fn psi_full_participation(
    c: &ConstantEstimates,
    r: &RateParams,
    k: usize,
    grad_norm_prev: f64,
) -> Result<f64> {
    if k < 2 {
        return Err(Error::invalid("psi residual", "needs K >= 2"));
    }
    let (gg, gl, lam) = (r.gamma_g, r.gamma_l, r.lambda);
    let e = r.epochs as f64;
    let kf = k as f64;
    let m = r.num_clients as f64;
    let (l, b) = (c.l, c.b);
    let (sl2, sg2, st2) = (
        c.sigma_l * c.sigma_l,
        c.sigma_g * c.sigma_g,
        c.sigma_t * c.sigma_t,
    );
    let bracket = (gl * gl * e * e * l * l / (lam * lam) + kf) * b * b
        + 5.0 * gl * gl * kf * e * l * l * (sl2 + 6.0 * e * sg2)
        + 3.0 * gg * gl * l * sl2 / (2.0 * m * (1.0 + lam))
        + (kf - 1.0) * (kf - 1.0) * e / kf * (3.0 * gg * gl * l / (1.0 + lam)) * st2 / 2.0
        + grad_norm_prev * grad_norm_prev;
    Ok(2.0 / (1.0 - 1.0 / kf) * bracket)
}

/// Vanishing part of the convergence bound:
/// `(f⁰ − f*) / ((1 − 1/K) / (2(1+λ)) · E γ_G γ_L T)`.
pub fn convergence_vanishing_term(
    gap: f64,
    r: &RateParams,
    k: usize,
    rounds: usize,
) -> Result<f64> {
    if k < 2 || rounds == 0 {
        return Err(Error::invalid(
            "convergence bound",
            "needs K >= 2 and T >= 1",
        ));
    }
    let kf = k as f64;
    let denom = (1.0 - 1.0 / kf) / (2.0 * (1.0 + r.lambda))
        * r.epochs as f64
        * r.gamma_g
        * r.gamma_l
        * rounds as f64;
    Ok(gap / denom)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Condition {
    pub cap: f64,
    pub value: f64,
    pub holds: bool,
}

impl Condition {
    fn new(value: f64, cap: f64) -> Self {
        Condition {
            cap,
            value,
            holds: value <= cap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizeReport {
    /// `γ_G ≤ 1/(K−1)`
    pub uniform_gamma_g: Condition,
    /// `γ_L ≤ 1/(8EL)`
    pub uniform_gamma_l: Condition,
    /// `γ_G γ_L ≤ (1+λ)/(3EL)`
    pub uniform_product: Condition,
    /// `γ_L ≤ 2ε‖∇f_{1:K-1}‖ / (B L E t √(ME/(λ²+2λ)))`, evaluated at `t = T`.
    pub bkt_gamma_l: Condition,
    /// First round at which the backward-transfer γ_L cap is violated.
    pub bkt_first_violation: Option<usize>,
    /// `γ_G ≤ 1/(√N (K−1))`
    pub bkt_gamma_g: Condition,
    pub suggested_gamma_l: f64,
    pub suggested_gamma_g: f64,
}

/// Backward-transfer γ_L cap at round `t`.
pub fn bkt_gamma_l_cap(
    eps: f64,
    grad_norm_prev: f64,
    c: &ConstantEstimates,
    r: &RateParams,
    t: usize,
) -> f64 {
    let lam = r.lambda;
    let e = r.epochs as f64;
    let m = r.num_clients as f64;
    2.0 * eps * grad_norm_prev
        / (c.b * c.l * e * t as f64 * (m * e * (1.0 / (lam * lam + 2.0 * lam))).sqrt())
}

/// Schedule `γ_L = λ/(√(KT) E L)`, `γ_G = √(NE)/((K−1) λ L)`.
pub fn suggested_schedule(
    lambda: f64,
    k: usize,
    rounds: usize,
    epochs: usize,
    participants: usize,
    l: f64,
) -> (f64, f64) {
    let e = epochs as f64;
    let gamma_l = lambda / ((k as f64 * rounds as f64).sqrt() * e * l);
    let gamma_g = (participants as f64 * e).sqrt() / ((k as f64 - 1.0) * lambda * l);
    (gamma_l, gamma_g)
}

pub fn check_step_sizes(
    r: &RateParams,
    c: &ConstantEstimates,
    k: usize,
    rounds: usize,
    grad_norm_prev: f64,
) -> StepSizeReport {
    let e = r.epochs as f64;
    let kf = k as f64;
    let eps = c.eps_bkt.unwrap_or(0.0);
    let cap_at = |t: usize| bkt_gamma_l_cap(eps, grad_norm_prev, c, r, t);
    let bkt_first_violation = (1..=rounds).find(|&t| !(r.gamma_l <= cap_at(t)));
    let (suggested_gamma_l, suggested_gamma_g) =
        suggested_schedule(r.lambda, k, rounds, r.epochs, r.participants, c.l);
    StepSizeReport {
        uniform_gamma_g: Condition::new(r.gamma_g, 1.0 / (kf - 1.0)),
        uniform_gamma_l: Condition::new(r.gamma_l, 1.0 / (8.0 * e * c.l)),
        uniform_product: Condition::new(r.gamma_g * r.gamma_l, (1.0 + r.lambda) / (3.0 * e * c.l)),
        bkt_gamma_l: Condition::new(r.gamma_l, cap_at(rounds.max(1))),
        bkt_first_violation,
        bkt_gamma_g: Condition::new(
            r.gamma_g,
            1.0 / ((r.participants as f64).sqrt() * (kf - 1.0)),
        ),
        suggested_gamma_l,
        suggested_gamma_g,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaTBounds {
    /// `max(B², 2(1−ε)B²)`, the value the derivation actually reaches.
    pub proof_form: f64,
    /// `(3 − 2ε) B²`, the value as stated.
    pub stated_form: f64,
    pub discrepancy: bool,
}

pub fn sigma_t_alignment_bounds(eps: f64, b: f64) -> SigmaTBounds {
    let b2 = b * b;
    let proof_form = b2.max(2.0 * (1.0 - eps) * b2);
    let stated_form = (3.0 - 2.0 * eps) * b2;
    let discrepancy = (proof_form - stated_form).abs() > 1e-12 * stated_form.abs().max(1.0);
    SigmaTBounds {
        proof_form,
        stated_form,
        discrepancy,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub name: String,
    pub analytical: f64,
    pub empirical: f64,
    pub satisfied: bool,
    pub inputs: String,
}

impl BoundReport {
    pub fn new(name: impl Into<String>, analytical: f64, empirical: f64, inputs: String) -> Self {
        BoundReport {
            name: name.into(),
            analytical,
            empirical,
            satisfied: empirical <= analytical,
            inputs,
        }
    }
}

/// Largest stochastic gradient norm logged during task `task`.
pub fn observed_gradient_bound(log: &RunLog, task: usize) -> f64 {
    log.rounds
        .iter()
        .filter(|r| r.task == task)
        .map(|r| r.grad_norm_max)
        .fold(0.0, f64::max)
}

/// Drift-cap records for every task after the first (server blend with λ > 0).
pub fn drift_reports(log: &RunLog, hp: &HyperParams) -> Vec<BoundReport> {
    // At λ = 0 the cap is infinite and the report would carry no information.
    if hp.algorithm != Algorithm::Special || hp.prox_lambda == 0.0 {
        return Vec::new();
    }
    let k = log.final_models.len();
    (2..=k)
        .map(|task| {
            let b_hat = observed_gradient_bound(log, task);
            let gamma_g = hp.global_lr.rate(task);
            let cap = drift_bound(gamma_g, hp.local_lr, hp.local_epochs, b_hat, hp.prox_lambda);
            let worst = log
                .rounds
                .iter()
                .filter(|r| r.task == task)
                .map(|r| r.drift_sq)
                .fold(0.0, f64::max);
            BoundReport::new(
                format!("drift_task_{task}"),
                cap,
                worst,
                format!(
                    "gamma_g={gamma_g} gamma_l={} E={} B_hat={b_hat} lambda={}",
                    hp.local_lr, hp.local_epochs, hp.prox_lambda
                ),
            )
        })
        .collect()
}

/// Every bound and step-size condition evaluated on a finished run.
pub fn evaluate_run(
    spec: &ModelSpec,
    shards: &[Vec<ClientShard>],
    hp: &HyperParams,
    log: &RunLog,
    consts: &ConstantEstimates,
) -> Result<Vec<BoundReport>> {
    let k = log.final_models.len();
    let mut reports = drift_reports(log, hp);
    if k < 2 {
        return Ok(reports);
    }
    let rates = RateParams::from_hp(hp, k);
    let t_final = hp.rounds_per_task;
    let start = &log.final_models[k - 2];
    let end = &log.final_models[k - 1];
    let earlier = &shards[..k - 1];
    let grad_prev = joint_gradient(spec, start, earlier)?.norm();

    // Backward transfer on the last task.
    if let Some(eps) = consts.eps_bkt {
        let inputs = BktInputs {
            eps,
            sigma_l: consts.sigma_l,
            grad_norm_prev: grad_prev,
            k,
            t: t_final,
            epochs: hp.local_epochs,
            num_clients: hp.num_clients,
            participants: hp.participants_per_round,
            l: consts.l,
            b: consts.b,
        };
        if let Ok(corr) = bkt_bound(&inputs) {
            let before = joint_loss(spec, start, earlier)?;
            let after = joint_loss(spec, end, earlier)?;
            reports.push(BoundReport::new(
                "bkt_earlier_task_loss",
                before + corr,
                after,
                format!("f_prev_start={before} correction={corr} eps={eps} t={t_final}"),
            ));
        }
    }

    // Task-uniform convergence on the last task.
    let all = &shards[..k];
    let f0 = joint_loss(spec, start, all)?;
    let last_task: Vec<_> = log.rounds.iter().filter(|r| r.task == k).collect();
    let f_star = last_task
        .iter()
        .filter_map(|r| r.joint_loss)
        .fold(f0.min(joint_loss(spec, end, all)?), f64::min);
    let min_grad = match last_task
        .iter()
        .filter_map(|r| r.joint_grad_sq)
        .reduce(f64::min)
    {
        Some(v) => v,
        None => joint_gradient(spec, end, all)?.norm_sq(),
    };
    let psi = psi_residual(consts, &rates, k, grad_prev)?;
    let vanishing = convergence_vanishing_term(f0 - f_star, &rates, k, t_final)?;
    reports.push(BoundReport::new(
        "uniform_convergence",
        vanishing + psi.total,
        min_grad,
        format!(
            "f0={f0} f_star_surrogate={f_star} vanishing={vanishing} psi={}",
            psi.total
        ),
    ));

    let steps = check_step_sizes(&rates, consts, k, t_final, grad_prev);
    for (name, c) in [
        ("step_uniform_gamma_g", steps.uniform_gamma_g),
        ("step_uniform_gamma_l", steps.uniform_gamma_l),
        ("step_uniform_product", steps.uniform_product),
        ("step_bkt_gamma_l", steps.bkt_gamma_l),
        ("step_bkt_gamma_g", steps.bkt_gamma_g),
    ] {
        reports.push(BoundReport::new(
            name,
            c.cap,
            c.value,
            format!(
                "suggested_gamma_l={} suggested_gamma_g={}",
                steps.suggested_gamma_l, steps.suggested_gamma_g
            ),
        ));
    }

    if let Some(eps) = consts.eps_corr {
        let st = sigma_t_alignment_bounds(eps, consts.b);
        let empirical = consts.sigma_t * consts.sigma_t;
        let note = format!(
            "eps_corr={eps} B={} discrepancy={}",
            consts.b, st.discrepancy
        );
        reports.push(BoundReport::new(
            "sigma_t_stated",
            st.stated_form,
            empirical,
            note.clone(),
        ));
        reports.push(BoundReport::new(
            "sigma_t_derived",
            st.proof_form,
            empirical,
            note,
        ));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_consts() -> ConstantEstimates {
        ConstantEstimates {
            b: 1.0,
            l: 1.0,
            sigma_l: 1.0,
            sigma_g: 1.0,
            sigma_t: 1.0,
            eps_bkt: Some(0.5),
            eps_corr: Some(0.5),
            probe_points: 0,
            minibatch_draws: 0,
        }
    }

    #[test]
    fn drift_bound_examples() {
        assert!((drift_bound(1.0, 0.1, 5, 2.0, 0.5) - 4.0).abs() < 1e-14);
        assert_eq!(drift_bound(1.0, 0.1, 5, 0.0, 0.5), 0.0);
        let a = drift_bound(0.5, 0.01, 3, 1.5, 0.4);
        let b = drift_bound(0.5, 0.01, 3, 1.5, 0.8);
        assert!((a / b - 4.0).abs() < 1e-12);
        assert!(drift_bound(1.0, 0.1, 5, 2.0, 0.0).is_infinite());
    }

    #[test]
    fn bkt_examples() {
        let base = BktInputs {
            eps: 0.5,
            sigma_l: 0.3,
            grad_norm_prev: 2.0,
            k: 3,
            t: 4,
            epochs: 5,
            num_clients: 8,
            participants: 4,
            l: 1.5,
            b: 2.0,
        };
        let v = bkt_bound(&base).unwrap();
        let v2 = bkt_bound(&BktInputs { t: 8, ..base }).unwrap();
        assert!((v / v2 - 2.0).abs() < 1e-12);
        assert_eq!(
            bkt_bound(&BktInputs {
                sigma_l: 0.0,
                ..base
            })
            .unwrap(),
            0.0
        );
        let full = BktInputs {
            participants: 8,
            ..base
        };
        assert_eq!(bkt_bound(&full).unwrap(), bkt_bound_full(&full).unwrap());
        assert!(bkt_bound(&BktInputs { k: 1, ..base }).is_err());
        assert!(bkt_bound(&BktInputs { b: 0.0, ..base }).is_err());
        assert!(bkt_bound(&BktInputs { t: 0, ..base }).is_err());
    }

    #[test]
    fn psi_vanishes_with_everything_zero() {
        let zero = ConstantEstimates {
            b: 0.0,
            l: 1.0,
            sigma_l: 0.0,
            sigma_g: 0.0,
            sigma_t: 0.0,
            ..unit_consts()
        };
        let r = RateParams {
            gamma_g: 1.0,
            gamma_l: 0.01,
            epochs: 5,
            lambda: 0.25,
            num_clients: 8,
            participants: 4,
        };
        assert_eq!(psi_residual(&zero, &r, 3, 0.0).unwrap().total, 0.0);
    }

    #[test]
    fn psi_rejects_bad_counts() {
        let r = RateParams {
            gamma_g: 1.0,
            gamma_l: 0.01,
            epochs: 5,
            lambda: 0.25,
            num_clients: 4,
            participants: 5,
        };
        assert!(psi_residual(&unit_consts(), &r, 2, 1.0).is_err());
        let ok = RateParams {
            participants: 2,
            ..r
        };
        assert!(psi_residual(&unit_consts(), &ok, 1, 1.0).is_err());
    }

    #[test]
    fn step_size_examples() {
        let r = RateParams {
            gamma_g: 1.0,
            gamma_l: 0.01,
            epochs: 5,
            lambda: 0.25,
            num_clients: 8,
            participants: 4,
        };
        let rep = check_step_sizes(&r, &unit_consts(), 2, 20, 1.0);
        assert_eq!(rep.uniform_gamma_l.cap, 0.025);
        assert_eq!(rep.uniform_gamma_g.cap, 1.0);
        assert!(rep.uniform_gamma_l.holds);
        let (gl, gg) = suggested_schedule(0.25, 5, 100, 5, 4, 1.0);
        assert!((gl - 0.002236067977499789696).abs() < 1e-17);
        assert!((gg - 20f64.sqrt() / 1.0).abs() < 1e-14);
    }

    #[test]
    fn sigma_t_forms() {
        let a = sigma_t_alignment_bounds(1.0, 1.0);
        assert_eq!(
            (a.stated_form, a.proof_form, a.discrepancy),
            (1.0, 1.0, false)
        );
        let b = sigma_t_alignment_bounds(0.5, 1.0);
        assert_eq!(
            (b.stated_form, b.proof_form, b.discrepancy),
            (2.0, 1.0, true)
        );
        let c = sigma_t_alignment_bounds(1e-12, 1.0);
        assert!((c.stated_form - 3.0).abs() < 1e-9 && (c.proof_form - 2.0).abs() < 1e-9);
    }
}
