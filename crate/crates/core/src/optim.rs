//! Cross-entropy objective over the two-way softmax and the Adam optimizer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

fn check_pair(probs: &Tensor, labels: &Tensor) -> Result<(usize, usize)> {
    let (n, k) = probs.dims2()?;
    if labels.shape() != probs.shape() {
        return Err(Error::dim(format!(
            "labels {:?} do not match probabilities {:?}",
            labels.shape(),
            probs.shape()
        )));
    }
    for (i, row) in labels.data().chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::Data(format!(
                "label row {i} is not one-hot: {row:?}"
            )));
        }
    }
    Ok((n, k))
}

/// Per-sample `-sum_k y_k ln(clamp(p_k))` and its batch mean.
pub fn cross_entropy(probs: &Tensor, labels: &Tensor) -> Result<LossValue> {
    let (n, k) = check_pair(probs, labels)?;
    let per_sample: Vec<f64> = probs
        .data()
        .chunks(k)
        .zip(labels.data().chunks(k))
        .map(|(p, y)| {
            -p.iter()
                .zip(y)
                .filter(|(_, &y)| y != 0.0)
                .map(|(&p, &y)| y * p.clamp(PROB_FLOOR, 1.0).ln())
                .sum::<f64>()
        })
        .collect();
    let mean = per_sample.iter().sum::<f64>() / n as f64;
    Ok(LossValue { mean, per_sample })
}

/// Gradient of the mean cross-entropy with respect to the softmax logits:
/// `(probs - labels) / n`.
pub fn softmax_xent_grad(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (n, _) = check_pair(probs, labels)?;
    let data = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(p, y)| (p - y) / n as f64)
        .collect();
    Tensor::from_vec(probs.shape(), data)
}

/// One-hot `n x 2` targets from class indices.
pub fn one_hot(classes: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes.len() * k];
    for (i, &c) in classes.iter().enumerate() {
        if c >= k {
            return Err(Error::Data(format!(
                "class index {c} out of range for {k} classes"
            )));
        }
        data[i * k + c] = 1.0;
    }
    Tensor::from_vec(&[classes.len(), k], data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        AdamState { config, m, v, t: 0 }
    }

    /// Advances the step counter; call once per optimizer step, before
    /// [`AdamState::update`] on each parameter.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if slot >= self.m.len() {
            return Err(Error::dim(format!(
                "optimizer has {} slots, got slot {slot}",
                self.m.len()
            )));
        }
        if param.shape() != grad.shape() || param.shape() != self.m[slot].shape() {
            return Err(Error::dim(format!(
                "adam slot {slot}: param {:?}, grad {:?}, moments {:?}",
                param.shape(),
                grad.shape(),
                self.m[slot].shape()
            )));
        }
        if self.t == 0 {
            return Err(Error::State("adam update before begin_step".into()));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let m = self.m[slot].data_mut();
        let v = self.v[slot].data_mut();
        for (((p, &g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// One Adam step over a list of parameters and their gradients.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "{} params, {} grads, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.begin_step();
    for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(slot, p, g)?;
    }
    Ok(())
}
