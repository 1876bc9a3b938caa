//! Differentiable layers: forward, backward and parameter access for every
//! layer kind the three classifiers use.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{self, PoolArgmax, Tensor};

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerDescriptor {
    Conv2D { filters: usize, kernel: usize },
    MaxPool2x2,
    ReLU,
    Dropout { rate: f64 },
    BatchNorm { momentum: f64, epsilon: f64 },
    Flatten,
    Dense { units: usize },
    Softmax,
}

impl LayerDescriptor {
    pub fn conv3x3(filters: usize) -> Self {
        LayerDescriptor::Conv2D { filters, kernel: 3 }
    }

    pub fn batch_norm() -> Self {
        LayerDescriptor::BatchNorm {
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerDescriptor::Conv2D { .. } => "conv2d",
            LayerDescriptor::MaxPool2x2 => "maxpool",
            LayerDescriptor::ReLU => "relu",
            LayerDescriptor::Dropout { .. } => "dropout",
            LayerDescriptor::BatchNorm { .. } => "batchnorm",
            LayerDescriptor::Flatten => "flatten",
            LayerDescriptor::Dense { .. } => "dense",
            LayerDescriptor::Softmax => "softmax",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerDescriptor::Conv2D { filters, kernel } if filters == 0 || kernel == 0 => Err(
                Error::Parameter("conv2d needs filters >= 1 and kernel >= 1".into()),
            ),
            LayerDescriptor::Dropout { rate } if !(0.0..1.0).contains(&rate) => Err(
                Error::Parameter(format!("dropout rate must lie in [0, 1), got {rate}")),
            ),
            LayerDescriptor::Dense { units: 0 } => Err(Error::Parameter(
                "dense layer needs at least one unit".into(),
            )),
            LayerDescriptor::BatchNorm { momentum, epsilon }
                if !(0.0..=1.0).contains(&momentum) || epsilon <= 0.0 =>
            {
                Err(Error::Parameter(format!(
                    "batchnorm needs momentum in [0, 1] and epsilon > 0, got {momentum}, {epsilon}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape (`[h, w, c]` or `[f]`).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let bad = |what: &str| {
            Err(Error::dim(format!(
                "{} expects {what} input, got per-sample shape {input:?}",
                self.kind()
            )))
        };
        match (self, input) {
            (LayerDescriptor::Conv2D { filters, kernel }, &[h, w, _]) => {
                if *kernel > h || *kernel > w {
                    return bad("an image at least as large as the kernel");
                }
                Ok(vec![h - kernel + 1, w - kernel + 1, *filters])
            }
            (LayerDescriptor::MaxPool2x2, &[h, w, c]) => {
                if h < 2 || w < 2 {
                    return bad("an image of at least 2x2");
                }
                Ok(vec![h / 2, w / 2, c])
            }
            (LayerDescriptor::Flatten, &[h, w, c]) => Ok(vec![h * w * c]),
            (LayerDescriptor::Dense { units }, &[_]) => Ok(vec![*units]),
            (LayerDescriptor::Softmax, &[k]) => {
                if k < 2 {
                    return bad("at least two logits");
                }
                Ok(vec![k])
            }
            (
                LayerDescriptor::ReLU
                | LayerDescriptor::Dropout { .. }
                | LayerDescriptor::BatchNorm { .. },
                _,
            ) => Ok(input.to_vec()),
            (
                LayerDescriptor::Conv2D { .. }
                | LayerDescriptor::MaxPool2x2
                | LayerDescriptor::Flatten,
                _,
            ) => bad("an (h, w, c) image"),
            (LayerDescriptor::Dense { .. } | LayerDescriptor::Softmax, _) => bad("a flat feature"),
        }
    }

    /// Trainable parameter shapes, in storage order.
    pub fn param_shapes(&self, input: &[usize]) -> Result<Vec<(&'static str, Vec<usize>)>> {
        self.output_shape(input)?;
        Ok(match *self {
            LayerDescriptor::Conv2D { filters, kernel } => vec![
                ("kernels", vec![kernel, kernel, input[2], filters]),
                ("bias", vec![filters]),
            ],
            LayerDescriptor::Dense { units } => {
                vec![("weights", vec![input[0], units]), ("bias", vec![units])]
            }
            LayerDescriptor::BatchNorm { .. } => {
                let c = *input.last().expect("validated shape");
                vec![("gamma", vec![c]), ("beta", vec![c])]
            }
            _ => Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: &'static str,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
enum Cache {
    #[default]
    Empty,
    Input(Tensor),
    Positive(Vec<bool>),
    Pool(PoolArgmax),
    Mask(Tensor),
    Norm {
        x_hat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Shape(Vec<usize>),
    Output(Tensor),
}

/// Parameters, gradients, forward caches and running statistics of one layer.
#[derive(Debug, Clone, Default)]
pub struct LayerState {
    pub params: Vec<Param>,
    pub running: Option<RunningStats>,
    cache: Cache,
}

impl LayerState {
    pub fn clear_cache(&mut self) {
        self.cache = Cache::Empty;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }
}

/// Key material for dropout masks: mask values for sample `s` in layer `l`
/// come from the stream `(seed, epoch, sample_ids[s], l)`.
#[derive(Debug, Clone, Copy)]
pub struct StreamKeys<'a> {
    pub seed: u64,
    pub epoch: u64,
    pub sample_ids: &'a [u64],
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub desc: LayerDescriptor,
    pub state: LayerState,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

impl Layer {
    /// Builds a layer with Glorot-uniform weights, zero biases, unit gamma
    /// and zero beta. Running statistics start at mean 0, variance 1.
    pub fn new(desc: LayerDescriptor, input_shape: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let output_shape = desc.output_shape(input_shape)?;
        let mut params = Vec::new();
        for (name, shape) in desc.param_shapes(input_shape)? {
            let value = match (name, &desc) {
                ("kernels" | "weights", _) => {
                    let (fan_in, fan_out) = fans(&shape);
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let len = shape.iter().product();
                    let data = (0..len).map(|_| rng.random_range(-limit..limit)).collect();
                    Tensor::from_vec(&shape, data)?
                }
                ("gamma", _) => Tensor::filled(&shape, 1.0),
                _ => Tensor::zeros(&shape),
            };
            params.push(Param {
                name,
                grad: Tensor::zeros(&shape),
                value,
            });
        }
        let running = matches!(desc, LayerDescriptor::BatchNorm { .. }).then(|| {
            let c = *input_shape.last().expect("validated shape");
            RunningStats {
                mean: vec![0.0; c],
                var: vec![1.0; c],
            }
        });
        Ok(Layer {
            desc,
            state: LayerState {
                params,
                running,
                cache: Cache::Empty,
            },
            input_shape: input_shape.to_vec(),
            output_shape,
        })
    }

    pub fn param_count(&self) -> usize {
        self.state.params.iter().map(|p| p.value.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        if x.rank() < 2 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "{} layer expects per-sample shape {:?}, got batch shape {:?}",
                self.desc.kind(),
                self.input_shape,
                x.shape()
            )));
        }
        Ok(x.shape()[0])
    }

    pub fn forward(
        &mut self,
        x: &Tensor,
        mode: Mode,
        keys: &StreamKeys<'_>,
        layer_index: usize,
    ) -> Result<Tensor> {
        let n = self.check_input(x)?;
        let (out, cache) = match self.desc {
            LayerDescriptor::Conv2D { .. } => {
                let y = tensor::conv2d_valid(
                    x,
                    &self.state.params[0].value,
                    &self.state.params[1].value,
                )?;
                (y, Cache::Input(x.clone()))
            }
            LayerDescriptor::MaxPool2x2 => {
                let (y, arg) = tensor::maxpool2x2(x)?;
                (y, Cache::Pool(arg))
            }
            LayerDescriptor::ReLU => {
                let y = relu(x);
                (
                    y,
                    Cache::Positive(x.data().iter().map(|&v| v > 0.0).collect()),
                )
            }
            LayerDescriptor::Dropout { rate } => {
                let mask = match mode {
                    Mode::Infer => Tensor::filled(x.shape(), 1.0),
                    Mode::Train => {
                        if keys.sample_ids.len() != n {
                            return Err(Error::State(format!(
                                "dropout needs one stream id per sample: {} ids for {n} samples",
                                keys.sample_ids.len()
                            )));
                        }
                        let per = x.len() / n;
                        let mut mask = Tensor::zeros(x.shape());
                        for (s, chunk) in mask.data_mut().chunks_mut(per).enumerate() {
                            let mut r = rng::stream(
                                keys.seed,
                                Purpose::Dropout,
                                &[keys.epoch, keys.sample_ids[s], layer_index as u64],
                            );
                            fill_dropout_mask(chunk, rate, &mut r);
                        }
                        mask
                    }
                };
                (apply_mask(x, &mask), Cache::Mask(mask))
            }
            LayerDescriptor::BatchNorm { momentum, epsilon } => {
                let gamma = self.state.params[0].value.data();
                let beta = self.state.params[1].value.data();
                let running = self
                    .state
                    .running
                    .as_mut()
                    .expect("batchnorm has running stats");
                let r = batchnorm_forward(x, gamma, beta, running, mode, momentum, epsilon)?;
                (
                    r.output,
                    Cache::Norm {
                        x_hat: r.x_hat,
                        inv_std: r.inv_std,
                        batch_stats: mode == Mode::Train,
                    },
                )
            }
            LayerDescriptor::Flatten => (flatten(x)?, Cache::Shape(x.shape().to_vec())),
            LayerDescriptor::Dense { .. } => {
                let y = dense_forward(x, &self.state.params[0].value, &self.state.params[1].value)?;
                (y, Cache::Input(x.clone()))
            }
            LayerDescriptor::Softmax => {
                let y = softmax(x)?;
                (y.clone(), Cache::Output(y))
            }
        };
        self.state.cache = cache;
        Ok(out)
    }

    /// Consumes the forward cache, accumulates parameter gradients into the
    /// state and returns the gradient with respect to the layer input.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = std::mem::take(&mut self.state.cache);
        let missing = || {
            Error::State(format!(
                "{} backward called without a matching forward pass",
                self.desc.kind()
            ))
        };
        match (&self.desc, cache) {
            (LayerDescriptor::Conv2D { .. }, Cache::Input(x)) => {
                let g = tensor::conv2d_grads(&x, &self.state.params[0].value, upstream)?;
                accumulate(&mut self.state.params[0].grad, &g.kernels);
                accumulate(&mut self.state.params[1].grad, &g.bias);
                Ok(g.input)
            }
            (LayerDescriptor::MaxPool2x2, Cache::Pool(arg)) => {
                tensor::maxpool2x2_backward(&arg, upstream, arg.input_shape)
            }
            (LayerDescriptor::ReLU, Cache::Positive(pos)) => {
                if pos.len() != upstream.len() {
                    return Err(Error::dim("relu upstream gradient has the wrong size"));
                }
                let data = upstream
                    .data()
                    .iter()
                    .zip(&pos)
                    .map(|(&g, &p)| if p { g } else { 0.0 })
                    .collect();
                Tensor::from_vec(upstream.shape(), data)
            }
            (LayerDescriptor::Dropout { .. }, Cache::Mask(mask)) => {
                if mask.shape() != upstream.shape() {
                    return Err(Error::dim("dropout upstream gradient has the wrong shape"));
                }
                Ok(apply_mask(upstream, &mask))
            }
            (
                LayerDescriptor::BatchNorm { .. },
                Cache::Norm {
                    x_hat,
                    inv_std,
                    batch_stats,
                },
            ) => {
                let gamma = self.state.params[0].value.data().to_vec();
                let g = if batch_stats {
                    batchnorm_backward(upstream, &x_hat, &inv_std, &gamma)?
                } else {
                    batchnorm_backward_fixed(upstream, &x_hat, &inv_std, &gamma)?
                };
                accumulate(&mut self.state.params[0].grad, &g.gamma);
                accumulate(&mut self.state.params[1].grad, &g.beta);
                Ok(g.input)
            }
            (LayerDescriptor::Flatten, Cache::Shape(shape)) => upstream.clone().reshape(&shape),
            (LayerDescriptor::Dense { .. }, Cache::Input(x)) => {
                let g = dense_backward(&x, &self.state.params[0].value, upstream)?;
                accumulate(&mut self.state.params[0].grad, &g.weights);
                accumulate(&mut self.state.params[1].grad, &g.bias);
                Ok(g.input)
            }
            (LayerDescriptor::Softmax, Cache::Output(p)) => softmax_backward(&p, upstream),
            _ => Err(missing()),
        }
    }

    /// Side-effect-free forward pass. Dropout uses `mask` in `Train` mode
    /// (identity when `None`); batch normalization in `Train` mode uses batch
    /// statistics without touching the running statistics.
    pub fn apply(&self, x: &Tensor, mode: Mode, mask: Option<&Tensor>) -> Result<Tensor> {
        self.check_input(x)?;
        match self.desc {
            LayerDescriptor::Conv2D { .. } => {
                tensor::conv2d_valid(x, &self.state.params[0].value, &self.state.params[1].value)
            }
            LayerDescriptor::MaxPool2x2 => Ok(tensor::maxpool2x2(x)?.0),
            LayerDescriptor::ReLU => Ok(relu(x)),
            LayerDescriptor::Dropout { .. } => match (mode, mask) {
                (Mode::Train, Some(m)) => {
                    if m.shape() != x.shape() {
                        return Err(Error::dim("dropout mask does not match the input"));
                    }
                    Ok(apply_mask(x, m))
                }
                _ => Ok(x.clone()),
            },
            LayerDescriptor::BatchNorm { momentum, epsilon } => {
                let mut scratch = self
                    .state
                    .running
                    .clone()
                    .expect("batchnorm has running stats");
                Ok(batchnorm_forward(
                    x,
                    self.state.params[0].value.data(),
                    self.state.params[1].value.data(),
                    &mut scratch,
                    mode,
                    momentum,
                    epsilon,
                )?
                .output)
            }
            LayerDescriptor::Flatten => flatten(x),
            LayerDescriptor::Dense { .. } => {
                dense_forward(x, &self.state.params[0].value, &self.state.params[1].value)
            }
            LayerDescriptor::Softmax => softmax(x),
        }
    }

    /// Scaled dropout mask saved by the last forward pass.
    pub(crate) fn saved_mask(&self) -> Option<&Tensor> {
        match &self.state.cache {
            Cache::Mask(m) => Some(m),
            _ => None,
        }
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [kh, kw, cin, cout] => (kh * kw * cin, kh * kw * cout),
        [fin, fout] => (fin, fout),
        _ => (1, 1),
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn apply_mask(x: &Tensor, mask: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(mask.data())
        .map(|(a, m)| a * m)
        .collect();
    Tensor::from_vec(x.shape(), data).expect("mask has the input shape")
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// ReLU backward; the subgradient at exactly zero is 0.
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Row-wise softmax of an `n x k` logit matrix, with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    if k < 2 {
        return Err(Error::dim(format!(
            "softmax needs at least 2 columns, got {k}"
        )));
    }
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_vec(logits.shape(), out)
}

fn softmax_backward(probs: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let (_, k) = probs.dims2()?;
    if upstream.shape() != probs.shape() {
        return Err(Error::dim("softmax upstream gradient has the wrong shape"));
    }
    let mut out = vec![0.0; probs.len()];
    for ((o, p), g) in out
        .chunks_mut(k)
        .zip(probs.data().chunks(k))
        .zip(upstream.data().chunks(k))
    {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for i in 0..k {
            o[i] = p[i] * (g[i] - dot);
        }
    }
    Tensor::from_vec(probs.shape(), out)
}

fn fill_dropout_mask(mask: &mut [f64], rate: f64, rng: &mut impl Rng) {
    let keep = 1.0 / (1.0 - rate);
    for m in mask {
        *m = if rate > 0.0 && rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        };
    }
}

/// Inverted dropout. In `Train` mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; in `Infer` mode the
/// input passes through unchanged. Returns the output and the scaled mask.
pub fn dropout_forward(
    x: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    LayerDescriptor::Dropout { rate }.validate()?;
    let mut mask = Tensor::filled(x.shape(), 1.0);
    if mode == Mode::Train {
        fill_dropout_mask(mask.data_mut(), rate, rng);
    }
    Ok((apply_mask(x, &mask), mask))
}

pub struct BatchNormOutput {
    pub output: Tensor,
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-channel statistics over every axis but the last.
fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = x.last_dim();
    let rows = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for row in x.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut var = vec![0.0; c];
    for row in x.data().chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= rows);
    (mean, var)
}

/// Batch normalization over the last axis of `n x h x w x c` or `n x f`
/// input. `Train` normalizes with batch statistics and folds them into the
/// running statistics; `Infer` normalizes with the running statistics.
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running: &mut RunningStats,
    mode: Mode,
    momentum: f64,
    epsilon: f64,
) -> Result<BatchNormOutput> {
    let c = x.last_dim();
    if x.rank() != 2 && x.rank() != 4 {
        return Err(Error::dim(format!(
            "batchnorm expects rank 2 or 4 input, got {:?}",
            x.shape()
        )));
    }
    if gamma.len() != c || beta.len() != c || running.mean.len() != c || running.var.len() != c {
        return Err(Error::dim(format!(
            "batchnorm has {} channels of parameters, input has {c}",
            gamma.len()
        )));
    }
    let (mean, var) = match mode {
        Mode::Train => {
            if x.shape()[0] < 2 {
                return Err(Error::Parameter(
                    "batchnorm in train mode needs a batch of at least 2 samples".into(),
                ));
            }
            let (mean, var) = channel_stats(x);
            for i in 0..c {
                running.mean[i] = momentum * running.mean[i] + (1.0 - momentum) * mean[i];
                running.var[i] = momentum * running.var[i] + (1.0 - momentum) * var[i];
            }
            (mean, var)
        }
        Mode::Infer => (running.mean.clone(), running.var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut x_hat = x.data().to_vec();
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x_hat.chunks_mut(c).zip(out.chunks_mut(c)) {
        for i in 0..c {
            xr[i] = (xr[i] - mean[i]) * inv_std[i];
            or[i] = gamma[i] * xr[i] + beta[i];
        }
    }
    Ok(BatchNormOutput {
        output: Tensor::from_vec(x.shape(), out)?,
        x_hat: Tensor::from_vec(x.shape(), x_hat)?,
        inv_std,
    })
}

pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Full chain rule through the batch mean and variance (train-mode caches).
pub fn batchnorm_backward(
    upstream: &Tensor,
    x_hat: &Tensor,
    inv_std: &[f64],
    gamma: &[f64],
) -> Result<BatchNormGrads> {
    if upstream.shape() != x_hat.shape() {
        return Err(Error::dim(
            "batchnorm upstream gradient has the wrong shape",
        ));
    }
    let c = x_hat.last_dim();
    let m = (x_hat.len() / c) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (g, xh) in upstream.data().chunks(c).zip(x_hat.data().chunks(c)) {
        for i in 0..c {
            dgamma[i] += g[i] * xh[i];
            dbeta[i] += g[i];
        }
    }
    let mut dx = vec![0.0; x_hat.len()];
    for ((d, g), xh) in dx
        .chunks_mut(c)
        .zip(upstream.data().chunks(c))
        .zip(x_hat.data().chunks(c))
    {
        for i in 0..c {
            // sum(dx_hat) = gamma * dbeta, sum(dx_hat * x_hat) = gamma * dgamma
            d[i] = gamma[i] * inv_std[i] / m * (m * g[i] - dbeta[i] - xh[i] * dgamma[i]);
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::from_vec(x_hat.shape(), dx)?,
        gamma: Tensor::from_vec(&[c], dgamma)?,
        beta: Tensor::from_vec(&[c], dbeta)?,
    })
}

/// Backward for normalization with constant (running) statistics.
pub fn batchnorm_backward_fixed(
    upstream: &Tensor,
    x_hat: &Tensor,
    inv_std: &[f64],
    gamma: &[f64],
) -> Result<BatchNormGrads> {
    if upstream.shape() != x_hat.shape() {
        return Err(Error::dim(
            "batchnorm upstream gradient has the wrong shape",
        ));
    }
    let c = x_hat.last_dim();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = vec![0.0; x_hat.len()];
    for ((d, g), xh) in dx
        .chunks_mut(c)
        .zip(upstream.data().chunks(c))
        .zip(x_hat.data().chunks(c))
    {
        for i in 0..c {
            dgamma[i] += g[i] * xh[i];
            dbeta[i] += g[i];
            d[i] = g[i] * gamma[i] * inv_std[i];
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::from_vec(x_hat.shape(), dx)?,
        gamma: Tensor::from_vec(&[c], dgamma)?,
        beta: Tensor::from_vec(&[c], dbeta)?,
    })
}

/// `x . W + b` for `x: n x f`, `W: f x u`.
pub fn dense_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, u) = weights.dims2()?;
    if bias.len() != u {
        return Err(Error::dim(format!(
            "dense bias has {} entries for {u} units",
            bias.len()
        )));
    }
    let mut y = tensor::matmul(x, weights)?;
    for row in y.data_mut().chunks_mut(u) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(y)
}

pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(x: &Tensor, weights: &Tensor, upstream: &Tensor) -> Result<DenseGrads> {
    let (n, f) = x.dims2()?;
    let (f2, u) = weights.dims2()?;
    if f != f2 || upstream.shape() != [n, u] {
        return Err(Error::dim(format!(
            "dense backward: input {n}x{f}, weights {f2}x{u}, upstream {:?}",
            upstream.shape()
        )));
    }
    let mut bias = vec![0.0; u];
    for row in upstream.data().chunks(u) {
        for (b, g) in bias.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(DenseGrads {
        input: tensor::matmul_nt(upstream, weights)?,
        weights: tensor::matmul_tn(x, upstream)?,
        bias: Tensor::from_vec(&[u], bias)?,
    })
}

/// Row-major reshape of `n x h x w x c` into `n x (h*w*c)`.
pub fn flatten(x: &Tensor) -> Result<Tensor> {
    let s = x.shape4()?;
    x.clone().reshape(&[s.n, s.h * s.w * s.c])
}
