//! Toy models with closed-form gradients, trained by momentum SGD.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::params::{check_finite, ParameterVector};

/// Model family. Parameters are stored flat; for the logistic model the
/// layout is a row-major `classes × dims` weight block followed by
/// `classes` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Least squares, loss `½(w·x + b − y)²`.
    Linear { dims: usize, intercept: bool },
    /// Multinomial logistic regression with cross-entropy loss.
    Logistic { dims: usize, classes: usize },
}

impl ModelSpec {
    pub fn dims(&self) -> usize {
        match *self {
            ModelSpec::Linear { dims, .. } | ModelSpec::Logistic { dims, .. } => dims,
        }
    }

    pub fn param_len(&self) -> usize {
        match *self {
            ModelSpec::Linear { dims, intercept } => dims + usize::from(intercept),
            ModelSpec::Logistic { dims, classes } => classes * (dims + 1),
        }
    }

    fn check(&self, params: &ParameterVector, data: &Dataset) -> Result<()> {
        params.ensure_len(self.param_len())?;
        if data.dims() != self.dims() {
            return Err(Error::Shape {
                expected: self.dims(),
                actual: data.dims(),
            });
        }
        if data.is_empty() {
            return Err(Error::param("batch", "must be nonempty"));
        }
        if let (ModelSpec::Logistic { classes, .. }, Labels::Class(ls)) = (self, data.labels()) {
            if let Some(&bad) = ls.iter().find(|&&l| l >= *classes) {
                return Err(Error::param("labels", format!("class {bad} >= {classes}")));
            }
        }
        Ok(())
    }
}

fn target(labels: &Labels, i: usize) -> f64 {
    match labels {
        Labels::Class(v) => v[i] as f64,
        Labels::Real(v) => v[i],
    }
}

fn class(labels: &Labels, i: usize) -> usize {
    match labels {
        Labels::Class(v) => v[i],
        Labels::Real(v) => v[i].round().max(0.0) as usize,
    }
}

fn logits(w: &[f64], dims: usize, classes: usize, x: &[f64], out: &mut [f64]) {
    let bias = &w[classes * dims..];
    for c in 0..classes {
        let row = &w[c * dims..(c + 1) * dims];
        out[c] = bias[c] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Turns logits into probabilities in place and returns `log Σ exp`.
fn softmax(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

fn linear_output(w: &[f64], dims: usize, intercept: bool, x: &[f64]) -> f64 {
    let b = if intercept { w[dims] } else { 0.0 };
    b + w[..dims].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
}

/// Mean loss over `data` and its gradient with respect to `params`.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParameterVector,
    data: &Dataset,
) -> Result<(f64, Vec<f64>)> {
    spec.check(params, data)?;
    let w = params.as_slice();
    let n = data.len() as f64;
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    match *spec {
        ModelSpec::Linear { dims, intercept } => {
            for (i, x) in data.rows().enumerate() {
                let r = linear_output(w, dims, intercept, x) - target(data.labels(), i);
                loss += 0.5 * r * r;
                for d in 0..dims {
                    grad[d] += r * x[d];
                }
                if intercept {
                    grad[dims] += r;
                }
            }
        }
        ModelSpec::Logistic { dims, classes } => {
            let mut z = vec![0.0; classes];
            for (i, x) in data.rows().enumerate() {
                logits(w, dims, classes, x, &mut z);
                let y = class(data.labels(), i);
                let zy = z[y];
                loss += softmax(&mut z) - zy;
                for c in 0..classes {
                    let err = z[c] - f64::from(u8::from(c == y));
                    for d in 0..dims {
                        grad[c * dims + d] += err * x[d];
                    }
                    grad[classes * dims + c] += err;
                }
            }
        }
    }
    for g in &mut grad {
        *g /= n;
    }
    check_finite(&grad)?;
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdStep {
    pub params: ParameterVector,
    /// Batch loss before the update.
    pub loss: f64,
    pub velocity: ParameterVector,
}

/// One momentum-SGD step on the batch mean loss:
/// `v ← μ·v + g`, `w ← w − lr·v`.
pub fn sgd_train_batch(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &Dataset,
    lr: f64,
    momentum: f64,
    velocity: &ParameterVector,
) -> Result<SgdStep> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::param("lr", format!("{lr} is not a nonnegative finite rate")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::param("momentum", format!("{momentum} not in [0, 1)")));
    }
    velocity.ensure_len(params.len())?;
    let (loss, grad) = loss_and_grad(spec, params, batch)?;
    let v: Vec<f64> = velocity
        .as_slice()
        .iter()
        .zip(&grad)
        .map(|(v, g)| momentum * v + g)
        .collect();
    let w: Vec<f64> = params
        .as_slice()
        .iter()
        .zip(&v)
        .map(|(w, v)| w - lr * v)
        .collect();
    Ok(SgdStep {
        params: ParameterVector::new(w)?,
        loss,
        velocity: ParameterVector::new(v)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss and accuracy over all of `data`. Regression counts a
/// prediction as correct when it rounds to the target.
pub fn evaluate(spec: &ModelSpec, params: &ParameterVector, data: &Dataset) -> Result<Evaluation> {
    spec.check(params, data)?;
    let w = params.as_slice();
    let mut loss = 0.0;
    let mut correct = 0usize;
    match *spec {
        ModelSpec::Linear { dims, intercept } => {
            for (i, x) in data.rows().enumerate() {
                let y = target(data.labels(), i);
                let r = linear_output(w, dims, intercept, x) - y;
                loss += 0.5 * r * r;
                correct += usize::from(r.abs() < 0.5);
            }
        }
        ModelSpec::Logistic { dims, classes } => {
            let mut z = vec![0.0; classes];
            for (i, x) in data.rows().enumerate() {
                logits(w, dims, classes, x, &mut z);
                let y = class(data.labels(), i);
                // first maximum wins ties
                let pred = (0..classes).fold(0, |best, c| if z[c] > z[best] { c } else { best });
                correct += usize::from(pred == y);
                let zy = z[y];
                loss += softmax(&mut z) - zy;
            }
        }
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Plain centralized mini-batch training on the pooled data; the
/// reference point federated runs are compared against.
pub fn fit_centralized(
    spec: &ModelSpec,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    momentum: f64,
    seed: u64,
) -> Result<ParameterVector> {
    if batch_size == 0 {
        return Err(Error::param("batch_size", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ParameterVector::zeros(spec.param_len());
    let mut v = ParameterVector::zeros(spec.param_len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(batch_size) {
            let step = sgd_train_batch(spec, &w, &data.select(rows), lr, momentum, &v)?;
            w = step.params;
            v = step.velocity;
        }
    }
    Ok(w)
}
