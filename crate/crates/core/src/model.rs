//! Small classifiers over flat parameter vectors with hand-written gradients.
//!
//! Both models use the augmented-input convention: every weight row carries
//! its bias as the last entry, so a model is fully described by one flat
//! `ParamVector`.
//!
//! Layouts (row-major):
//! - `LogReg`: `num_classes` rows of `input_dim + 1`.
//! - `Mlp1`: `hidden` rows of `input_dim + 1`, then `num_classes` rows of
//!   `hidden + 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    LogReg,
    Mlp1 {
        hidden: usize,
        activation: Activation,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn logreg(input_dim: usize, num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::LogReg,
            input_dim,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mlp1(
        input_dim: usize,
        hidden: usize,
        num_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::Mlp1 { hidden, activation },
            input_dim,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("model", "input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("model", "num_classes must be at least 2"));
        }
        if let ModelKind::Mlp1 { hidden: 0, .. } = self.kind {
            return Err(Error::invalid("model", "hidden_dim must be positive"));
        }
        Ok(())
    }

    /// Whether the model is smooth in its parameters (relu is not).
    pub fn is_smooth(&self) -> bool {
        !matches!(
            self.kind,
            ModelKind::Mlp1 {
                activation: Activation::Relu,
                ..
            }
        )
    }
}

pub fn param_count(spec: &ModelSpec) -> usize {
    let d = spec.input_dim;
    let c = spec.num_classes;
    match spec.kind {
        ModelKind::LogReg => (d + 1) * c,
        ModelKind::Mlp1 { hidden, .. } => (d + 1) * hidden + (hidden + 1) * c,
    }
}

/// A flat vector of model parameters. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(ParamVector(values))
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    /// Small uniform values in `[-scale, scale]`.
    pub fn random_init(spec: &ModelSpec, scale: f64, rng: &mut impl Rng) -> Self {
        let d = param_count(spec);
        ParamVector((0..d).map(|_| rng.gen_range(-scale..=scale)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub(crate) fn check_finite(&self, context: &'static str) -> Result<()> {
        if self.0.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }

    pub(crate) fn check_len(&self, expected: usize, context: &'static str) -> Result<()> {
        if self.0.len() == expected {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context,
                expected,
                actual: self.0.len(),
            })
        }
    }
}

/// A set of labelled samples, stored row-major.
///
/// `ids` identify samples within their pool. Losses and gradients accumulate
/// in ascending id order, so row order never changes a result.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    input_dim: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
    ids: Vec<u64>,
}

impl Minibatch {
    pub fn new(input_dim: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let ids = (0..labels.len() as u64).collect();
        Self::with_ids(input_dim, inputs, labels, ids)
    }

    pub fn with_ids(
        input_dim: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
        ids: Vec<u64>,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("minibatch", "input_dim must be positive"));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch {
                context: "minibatch inputs",
                expected: labels.len() * input_dim,
                actual: inputs.len(),
            });
        }
        if ids.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "minibatch ids",
                expected: labels.len(),
                actual: ids.len(),
            });
        }
        Ok(Minibatch {
            input_dim,
            inputs,
            labels,
            ids,
        })
    }

    pub fn empty(input_dim: usize) -> Self {
        Minibatch {
            input_dim,
            inputs: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn push(&mut self, row: &[f64], label: usize, id: u64) {
        debug_assert_eq!(row.len(), self.input_dim);
        self.inputs.extend_from_slice(row);
        self.labels.push(label);
        self.ids.push(id);
    }

    pub fn clear(&mut self) {
        self.inputs.clear();
        self.labels.clear();
        self.ids.clear();
    }

    /// Copy the given rows (in the given order) into a new batch.
    pub fn select(&self, rows: &[usize]) -> Minibatch {
        let mut out = Minibatch::empty(self.input_dim);
        for &r in rows {
            out.push(self.row(r), self.labels[r], self.ids[r]);
        }
        out
    }

    /// Concatenate several batches; ids are kept as-is.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Minibatch>) -> Result<Minibatch> {
        let mut iter = parts.into_iter().peekable();
        let dim = match iter.peek() {
            Some(b) => b.input_dim,
            None => return Err(Error::Empty("batch list")),
        };
        let mut out = Minibatch::empty(dim);
        for part in iter {
            if part.input_dim != dim {
                return Err(Error::DimensionMismatch {
                    context: "minibatch concat",
                    expected: dim,
                    actual: part.input_dim,
                });
            }
            out.inputs.extend_from_slice(&part.inputs);
            out.labels.extend_from_slice(&part.labels);
            out.ids.extend_from_slice(&part.ids);
        }
        Ok(out)
    }

    fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if !self.ids.windows(2).all(|w| w[0] <= w[1]) {
            order.sort_by_key(|&i| (self.ids[i], i));
        }
        order
    }
}

fn check_inputs(spec: &ModelSpec, params: &ParamVector, batch: &Minibatch) -> Result<()> {
    params.check_len(param_count(spec), "parameter vector")?;
    if batch.input_dim != spec.input_dim {
        return Err(Error::DimensionMismatch {
            context: "minibatch input_dim",
            expected: spec.input_dim,
            actual: batch.input_dim,
        });
    }
    if batch.is_empty() {
        return Err(Error::Empty("minibatch"));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::invalid(
            "minibatch",
            format!("label {bad} outside [0, {})", spec.num_classes),
        ));
    }
    params.check_finite("parameters")?;
    if batch.inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("minibatch inputs"));
    }
    Ok(())
}

/// Per-sample scratch space for forward/backward passes.
struct Scratch {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Scratch {
    fn new(spec: &ModelSpec) -> Self {
        let h = match spec.kind {
            ModelKind::LogReg => 0,
            ModelKind::Mlp1 { hidden, .. } => hidden,
        };
        Scratch {
            hidden_pre: vec![0.0; h],
            hidden: vec![0.0; h],
            logits: vec![0.0; spec.num_classes],
            dhidden: vec![0.0; h],
        }
    }
}

fn affine(weights: &[f64], in_dim: usize, x: &[f64], out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        let row = &weights[k * (in_dim + 1)..(k + 1) * (in_dim + 1)];
        let mut acc = row[in_dim];
        for (w, xi) in row[..in_dim].iter().zip(x) {
            acc += w * xi;
        }
        *o = acc;
    }
}

fn activate(act: Activation, v: f64) -> f64 {
    match act {
        Activation::Tanh => v.tanh(),
        Activation::Relu => v.max(0.0),
    }
}

fn forward(spec: &ModelSpec, params: &[f64], x: &[f64], s: &mut Scratch) {
    match spec.kind {
        ModelKind::LogReg => affine(params, spec.input_dim, x, &mut s.logits),
        ModelKind::Mlp1 { hidden, activation } => {
            let split = hidden * (spec.input_dim + 1);
            affine(&params[..split], spec.input_dim, x, &mut s.hidden_pre);
            for (h, &p) in s.hidden.iter_mut().zip(&s.hidden_pre) {
                *h = activate(activation, p);
            }
            affine(&params[split..], hidden, &s.hidden, &mut s.logits);
        }
    }
}

/// Turns logits into softmax probabilities in place; returns log-sum-exp.
fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
    max + sum.ln()
}

/// Mean softmax cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Minibatch,
) -> Result<(f64, ParamVector)> {
    check_inputs(spec, params, batch)?;
    let p = params.as_slice();
    let d = spec.input_dim;
    let mut grad = vec![0.0; p.len()];
    let mut s = Scratch::new(spec);
    let mut loss_sum = 0.0;

    for i in batch.canonical_order() {
        let x = batch.row(i);
        let y = batch.label(i);
        forward(spec, p, x, &mut s);
        let z_y = s.logits[y];
        let lse = softmax_in_place(&mut s.logits);
        loss_sum += lse - z_y;
        // s.logits now holds probabilities; turn into dL/dz.
        s.logits[y] -= 1.0;
        let dz = &s.logits;

        match spec.kind {
            ModelKind::LogReg => {
                for (c, &g) in dz.iter().enumerate() {
                    let row = &mut grad[c * (d + 1)..(c + 1) * (d + 1)];
                    for (gw, xi) in row[..d].iter_mut().zip(x) {
                        *gw += g * xi;
                    }
                    row[d] += g;
                }
            }
            ModelKind::Mlp1 { hidden, activation } => {
                let split = hidden * (d + 1);
                let (g1, g2) = grad.split_at_mut(split);
                let w2 = &p[split..];
                s.dhidden.iter_mut().for_each(|v| *v = 0.0);
                for (c, &g) in dz.iter().enumerate() {
                    let row = &mut g2[c * (hidden + 1)..(c + 1) * (hidden + 1)];
                    for (gw, h) in row[..hidden].iter_mut().zip(&s.hidden) {
                        *gw += g * h;
                    }
                    row[hidden] += g;
                    let wrow = &w2[c * (hidden + 1)..c * (hidden + 1) + hidden];
                    for (dh, w) in s.dhidden.iter_mut().zip(wrow) {
                        *dh += g * w;
                    }
                }
                for k in 0..hidden {
                    let deriv = match activation {
                        Activation::Tanh => 1.0 - s.hidden[k] * s.hidden[k],
                        Activation::Relu => {
                            if s.hidden_pre[k] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    let g = s.dhidden[k] * deriv;
                    let row = &mut g1[k * (d + 1)..(k + 1) * (d + 1)];
                    for (gw, xi) in row[..d].iter_mut().zip(x) {
                        *gw += g * xi;
                    }
                    row[d] += g;
                }
            }
        }
    }

    let n = batch.len() as f64;
    for g in grad.iter_mut() {
        *g /= n;
    }
    let loss = loss_sum / n;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("loss or gradient"));
    }
    Ok((loss, ParamVector(grad)))
}

/// Mean softmax cross-entropy without the gradient.
pub fn loss(spec: &ModelSpec, params: &ParamVector, batch: &Minibatch) -> Result<f64> {
    check_inputs(spec, params, batch)?;
    let mut s = Scratch::new(spec);
    let mut loss_sum = 0.0;
    for i in batch.canonical_order() {
        forward(spec, params.as_slice(), batch.row(i), &mut s);
        let z_y = s.logits[batch.label(i)];
        loss_sum += softmax_in_place(&mut s.logits) - z_y;
    }
    Ok(loss_sum / batch.len() as f64)
}

/// Raw logits for one input row.
pub fn logits(spec: &ModelSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    params.check_len(param_count(spec), "parameter vector")?;
    if x.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            context: "input row",
            expected: spec.input_dim,
            actual: x.len(),
        });
    }
    let mut s = Scratch::new(spec);
    forward(spec, params.as_slice(), x, &mut s);
    Ok(s.logits)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, dataset: &Minibatch) -> Result<f64> {
    check_inputs(spec, params, dataset)?;
    let mut s = Scratch::new(spec);
    let mut correct = 0usize;
    for i in 0..dataset.len() {
        forward(spec, params.as_slice(), dataset.row(i), &mut s);
        if argmax(&s.logits) == dataset.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counts() {
        assert_eq!(param_count(&ModelSpec::logreg(2, 3).unwrap()), 9);
        let mlp = ModelSpec::mlp1(2, 4, 3, Activation::Tanh).unwrap();
        assert_eq!(param_count(&mlp), 27);
        assert_eq!(param_count(&ModelSpec::logreg(1, 2).unwrap()), 4);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(ModelSpec::logreg(0, 3).is_err());
        assert!(ModelSpec::logreg(2, 1).is_err());
        assert!(ModelSpec::mlp1(2, 0, 3, Activation::Tanh).is_err());
    }

    #[test]
    fn zero_params_give_ln2() {
        let spec = ModelSpec::logreg(3, 2).unwrap();
        let batch = Minibatch::new(3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0], vec![0, 1]).unwrap();
        let (l, _) = loss_and_grad(&spec, &ParamVector::zeros(8), &batch).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn duplicated_sample_matches_single() {
        let spec = ModelSpec::mlp1(2, 3, 3, Activation::Tanh).unwrap();
        let params = ParamVector::new(
            (0..param_count(&spec))
                .map(|i| (i as f64 * 0.37).sin())
                .collect(),
        )
        .unwrap();
        let one = Minibatch::new(2, vec![0.3, -1.2], vec![2]).unwrap();
        let two =
            Minibatch::with_ids(2, vec![0.3, -1.2, 0.3, -1.2], vec![2, 2], vec![0, 0]).unwrap();
        assert_eq!(
            loss_and_grad(&spec, &params, &one).unwrap(),
            loss_and_grad(&spec, &params, &two).unwrap()
        );
    }

    #[test]
    fn row_permutation_is_invisible() {
        let spec = ModelSpec::logreg(2, 3).unwrap();
        let params =
            ParamVector::new(vec![0.1, -0.4, 0.2, 0.9, 0.3, -0.7, -0.2, 0.5, 0.05]).unwrap();
        let batch = Minibatch::new(
            2,
            vec![0.1, 0.2, -1.0, 3.0, 2.5, -0.3, 0.7, 0.7],
            vec![0, 1, 2, 1],
        )
        .unwrap();
        let perm = batch.select(&[2, 0, 3, 1]);
        assert_eq!(
            loss_and_grad(&spec, &params, &batch).unwrap(),
            loss_and_grad(&spec, &params, &perm).unwrap()
        );
    }

    #[test]
    fn hand_built_accuracy() {
        // logits for x: class0 = x0, class1 = x1, class2 = -x0 - x1
        let spec = ModelSpec::logreg(2, 3).unwrap();
        let params = ParamVector::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, -1.0, 0.0]).unwrap();
        // (2,1): logits (2,1,-3) -> 0 correct
        // (0,1): logits (0,1,-1) -> 1, label 2 wrong
        // (-1,-1): logits (-1,-1,2) -> 2 correct
        let data = Minibatch::new(2, vec![2.0, 1.0, 0.0, 1.0, -1.0, -1.0], vec![0, 2, 2]).unwrap();
        let acc = accuracy(&spec, &params, &data).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_params_predict_class_zero() {
        let spec = ModelSpec::logreg(1, 2).unwrap();
        let data = Minibatch::new(1, vec![1.0, -1.0, 2.0, -2.0], vec![0, 1, 0, 1]).unwrap();
        assert_eq!(accuracy(&spec, &ParamVector::zeros(4), &data).unwrap(), 0.5);
    }

    #[test]
    fn error_paths() {
        let spec = ModelSpec::logreg(2, 2).unwrap();
        let batch = Minibatch::new(2, vec![1.0, 2.0], vec![0]).unwrap();
        assert!(matches!(
            loss_and_grad(&spec, &ParamVector::zeros(5), &batch),
            Err(Error::DimensionMismatch { .. })
        ));
        let nan = Minibatch::new(2, vec![f64::NAN, 2.0], vec![0]).unwrap();
        assert!(matches!(
            loss_and_grad(&spec, &ParamVector::zeros(6), &nan),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            accuracy(&spec, &ParamVector::zeros(6), &Minibatch::empty(2)),
            Err(Error::Empty(_))
        ));
        assert!(ParamVector::new(vec![f64::INFINITY]).is_err());
        let bad_label = Minibatch::new(2, vec![1.0, 2.0], vec![2]).unwrap();
        assert!(loss_and_grad(&spec, &ParamVector::zeros(6), &bad_label).is_err());
    }
}
