//! Finite-difference verification of backpropagated gradients.
//!
//! Every trainable element is perturbed by `±h` and the change in mean
//! cross-entropy is evaluated with forward formulas only. Instead of
//! subtracting two nearly equal loss values, the evaluator carries the
//! difference from the unperturbed activations layer by layer and finishes
//! with `log1p`/`expm1` at the softmax, so the central difference keeps its
//! precision even for very small gradients. Only the channel (or unit) an
//! element feeds is touched until the next linear layer.
//!
//! ReLU and max pooling are not differentiable where an input sits on a kink.
//! If a probe flips any ReLU sign or pooling winner, the probe is repeated
//! with `h / 10` (up to `max_refinements` times) so that both evaluations stay
//! on the same linear piece as the analytic gradient.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{LayerDescriptor, Mode, StreamKeys};
use crate::models::Model;
use crate::optim::cross_entropy;
use crate::tensor::{PoolArgmax, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub perturbation: f64,
    pub tolerance: f64,
    pub max_refinements: u32,
    pub mode: Mode,
    /// Seeds the dropout masks used for the whole check.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            perturbation: 1e-5,
            tolerance: 1e-4,
            max_refinements: 3,
            mode: Mode::Train,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<ParamCheck>,
    pub tolerance: f64,
    /// Probes that had to shrink the perturbation to avoid a kink.
    pub refined_probes: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{} {:.3e} {}",
                e.name,
                e.max_rel_err,
                if e.passed { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn gradient_check(
    model: &Model,
    input: &Tensor,
    labels: &Tensor,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    gradient_check_with(model, input, labels, opts, |_| {})
}

/// Like [`gradient_check`], but lets `tamper` edit the analytic gradients
/// before they are compared (used to confirm a wrong gradient is caught).
pub fn gradient_check_with(
    model: &Model,
    input: &Tensor,
    labels: &Tensor,
    opts: &GradCheckOptions,
    tamper: impl FnOnce(&mut Model),
) -> Result<GradCheckReport> {
    let mut m = model.clone();
    m.zero_grads();
    let n = input.shape4()?.n;
    let ids: Vec<u64> = (0..n as u64).collect();
    let keys = StreamKeys {
        seed: opts.seed,
        epoch: 0,
        sample_ids: &ids,
    };
    let probs = m.forward(input, opts.mode, &keys)?;
    let masks: Vec<Option<Tensor>> = m
        .layers
        .iter()
        .map(|l| match (opts.mode, &l.desc) {
            (Mode::Train, LayerDescriptor::Dropout { .. }) => l.saved_mask().cloned(),
            _ => None,
        })
        .collect();
    m.backward(&probs, labels)?;
    tamper(&mut m);

    let probe = Prober::new(&m, input, labels, masks, opts.mode)?;
    let names = m.layer_names();
    let mut entries = Vec::new();
    let mut refined = 0;
    for (k, layer) in m.layers.iter().enumerate() {
        for (p, param) in layer.state.params.iter().enumerate() {
            let results: Vec<Result<(f64, bool)>> = (0..param.value.len())
                .into_par_iter()
                .map(|e| probe.numeric(k, p, e, opts))
                .collect();
            let mut entry = ParamCheck {
                name: format!("{}.{}", names[k], param.name),
                elements: param.value.len(),
                max_rel_err: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
                passed: true,
            };
            for (e, r) in results.into_iter().enumerate() {
                let (numeric, was_refined) = r?;
                refined += was_refined as usize;
                let analytic = param.grad.data()[e];
                let rel = relative_error(analytic, numeric);
                if rel > entry.max_rel_err || e == 0 {
                    entry.max_rel_err = rel;
                    entry.worst_index = e;
                    entry.analytic = analytic;
                    entry.numeric = numeric;
                }
            }
            entry.passed = entry.max_rel_err < opts.tolerance;
            entries.push(entry);
        }
    }
    Ok(GradCheckReport {
        entries,
        tolerance: opts.tolerance,
        refined_probes: refined,
    })
}

/// Forward-only evaluator holding the unperturbed activations.
/// Forward-only evaluator holding the unperturbed activations.
struct Prober<'a> {
    model: &'a Model,
    labels: &'a Tensor,
    masks: Vec<Option<Tensor>>,
    mode: Mode,
    /// `acts[l]` is the input of layer `l`; the last entry is the output.
    acts: Vec<Tensor>,
    pools: Vec<Option<PoolArgmax>>,
    norms: Vec<Option<NormBase>>,
}

/// Per-channel statistics a batch-norm layer normalizes with.
struct NormBase {
    mean: Vec<f64>,
    var: Vec<f64>,
    epsilon: f64,
}

impl NormBase {
    fn inv_std(&self, c: usize) -> f64 {
        1.0 / (self.var[c] + self.epsilon).sqrt()
    }
}

/// Calls `f` for every flat index whose last-axis coordinate is in
/// `changed`, or for every index when `changed` is `None`.
fn visit(len: usize, last: usize, changed: Option<&[usize]>, mut f: impl FnMut(usize)) {
    match changed {
        None => (0..len).for_each(f),
        Some(chs) => {
            for row in (0..len).step_by(last) {
                for &c in chs {
                    f(row + c);
                }
            }
        }
    }
}

impl<'a> Prober<'a> {
    fn new(
        model: &'a Model,
        input: &Tensor,
        labels: &'a Tensor,
        masks: Vec<Option<Tensor>>,
        mode: Mode,
    ) -> Result<Self> {
        if !matches!(
            model.layers.last().map(|l| &l.desc),
            Some(LayerDescriptor::Softmax)
        ) {
            return Err(Error::State(
                "gradient check needs a softmax output layer".into(),
            ));
        }
        let mut acts = vec![input.clone()];
        let mut pools = Vec::new();
        let mut norms = Vec::new();
        for (l, layer) in model.layers.iter().enumerate() {
            let x = &acts[l];
            pools.push(match layer.desc {
                LayerDescriptor::MaxPool2x2 => Some(crate::tensor::maxpool2x2(x)?.1),
                _ => None,
            });
            norms.push(match layer.desc {
                LayerDescriptor::BatchNorm { epsilon, .. } => Some(match mode {
                    Mode::Train => {
                        let c = x.last_dim();
                        let rows = (x.len() / c) as f64;
                        let mut mean = vec![0.0; c];
                        let mut var = vec![0.0; c];
                        for (i, v) in x.data().iter().enumerate() {
                            mean[i % c] += v;
                        }
                        mean.iter_mut().for_each(|m| *m /= rows);
                        for (i, v) in x.data().iter().enumerate() {
                            var[i % c] += (v - mean[i % c]).powi(2);
                        }
                        var.iter_mut().for_each(|s| *s /= rows);
                        NormBase { mean, var, epsilon }
                    }
                    Mode::Infer => {
                        let rs = layer
                            .state
                            .running
                            .as_ref()
                            .expect("batchnorm has running stats");
                        NormBase {
                            mean: rs.mean.clone(),
                            var: rs.var.clone(),
                            epsilon,
                        }
                    }
                }),
                _ => None,
            });
            let y = layer.apply(x, mode, masks[l].as_ref())?;
            acts.push(y);
        }
        let loss = cross_entropy(acts.last().expect("output"), labels)?.mean;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite: {loss}")));
        }
        Ok(Prober {
            model,
            labels,
            masks,
            mode,
            acts,
            pools,
            norms,
        })
    }

    /// Central difference for one element; the flag reports a shrunk step.
    fn numeric(
        &self,
        layer: usize,
        param: usize,
        index: usize,
        opts: &GradCheckOptions,
    ) -> Result<(f64, bool)> {
        let mut h = opts.perturbation;
        let mut attempt = 0;
        loop {
            let (fp, kink_p) = self.loss_change(layer, param, index, h)?;
            let (fm, kink_m) = self.loss_change(layer, param, index, -h)?;
            if !(kink_p || kink_m) || attempt == opts.max_refinements {
                return Ok(((fp - fm) / (2.0 * h), attempt > 0));
            }
            attempt += 1;
            h /= 10.0;
        }
    }

    /// Loss change when element `index` of parameter `param` of layer `k`
    /// moves by `step`, plus whether any ReLU sign or pooling winner flipped.
    fn loss_change(&self, k: usize, param: usize, index: usize, step: f64) -> Result<(f64, bool)> {
        let layer = &self.model.layers[k];
        let x = &self.acts[k];
        let mut d = Tensor::zeros(self.acts[k + 1].shape());
        let channel = match layer.desc {
            LayerDescriptor::Conv2D { filters, kernel } => {
                let s = x.shape4()?;
                let (oh, ow) = (s.h - kernel + 1, s.w - kernel + 1);
                let o = if param == 0 { index % filters } else { index };
                let (ci, tap) = ((index / filters) % s.c, index / filters / s.c);
                let (di, dj) = (tap / kernel, tap % kernel);
                let xd = x.data();
                let dd = d.data_mut();
                for n in 0..s.n {
                    for i in 0..oh {
                        for j in 0..ow {
                            dd[((n * oh + i) * ow + j) * filters + o] = if param == 0 {
                                step * xd[((n * s.h + i + di) * s.w + j + dj) * s.c + ci]
                            } else {
                                step
                            };
                        }
                    }
                }
                o
            }
            LayerDescriptor::Dense { units } => {
                let (n, f) = x.dims2()?;
                let (i, j) = if param == 0 {
                    (index / units, index % units)
                } else {
                    (0, index)
                };
                for s in 0..n {
                    d.data_mut()[s * units + j] = if param == 0 {
                        step * x.data()[s * f + i]
                    } else {
                        step
                    };
                }
                j
            }
            LayerDescriptor::BatchNorm { .. } => {
                let nb = self.norms[k].as_ref().expect("batchnorm statistics");
                let (c, inv) = (index, nb.inv_std(index));
                let last = x.last_dim();
                let dd = d.data_mut();
                visit(x.len(), last, Some(&[c]), |i| {
                    dd[i] = if param == 0 {
                        step * (x.data()[i] - nb.mean[c]) * inv
                    } else {
                        step
                    };
                });
                c
            }
            _ => unreachable!("only conv, dense and batchnorm layers have parameters"),
        };
        self.propagate(k + 1, d, Some(vec![channel]))
    }

    /// Pushes the activation change `d` at the input of layer `from` to the
    /// loss. `changed` lists the last-axis indices where `d` may be nonzero.
    fn propagate(
        &self,
        from: usize,
        mut d: Tensor,
        mut changed: Option<Vec<usize>>,
    ) -> Result<(f64, bool)> {
        let mut kink = false;
        for l in from..self.model.layers.len() {
            let layer = &self.model.layers[l];
            let base_in = &self.acts[l];
            let base_out = &self.acts[l + 1];
            let chs = changed.as_deref();
            let next = match &layer.desc {
                LayerDescriptor::Softmax => {
                    return Ok((self.softmax_loss_change(base_out, &d)?, kink));
                }
                LayerDescriptor::ReLU => {
                    let mut out = Tensor::zeros(d.shape());
                    let (b, dd) = (base_in.data(), d.data());
                    let od = out.data_mut();
                    visit(d.len(), d.last_dim(), chs, |i| {
                        let moved = b[i] + dd[i];
                        if (moved > 0.0) != (b[i] > 0.0) {
                            kink = true;
                            od[i] = moved.max(0.0) - b[i].max(0.0);
                        } else if b[i] > 0.0 {
                            od[i] = dd[i];
                        }
                    });
                    out
                }
                LayerDescriptor::MaxPool2x2 => {
                    let arg = self.pools[l].as_ref().expect("pool winners");
                    let (s, os) = (arg.input_shape, arg.output_shape);
                    let mut out = Tensor::zeros(base_out.shape());
                    let (b, dd) = (base_in.data(), d.data());
                    let od = out.data_mut();
                    visit(os.len(), os.c, chs, |o| {
                        let c = o % os.c;
                        let j = (o / os.c) % os.w;
                        let i = (o / os.c / os.w) % os.h;
                        let n = o / os.c / os.w / os.h;
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let off = ((n * s.h + 2 * i + di) * s.w + 2 * j + dj) * s.c + c;
                            let v = b[off] + dd[off];
                            if best == usize::MAX || v > best_v {
                                best = off;
                                best_v = v;
                            }
                        }
                        let was = arg.index[o];
                        od[o] = if best == was {
                            dd[best]
                        } else {
                            kink = true;
                            best_v - b[was]
                        };
                    });
                    out
                }
                LayerDescriptor::Dropout { .. } => match &self.masks[l] {
                    Some(mask) => {
                        d.data_mut()
                            .iter_mut()
                            .zip(mask.data())
                            .for_each(|(v, m)| *v *= m);
                        d
                    }
                    None => d,
                },
                LayerDescriptor::BatchNorm { .. } => {
                    let nb = self.norms[l].as_ref().expect("batchnorm statistics");
                    let gamma = layer.state.params[0].value.data();
                    let last = d.last_dim();
                    let all: Vec<usize>;
                    let chs = match chs {
                        Some(c) => c,
                        None => {
                            all = (0..last).collect();
                            &all
                        }
                    };
                    let mut out = Tensor::zeros(d.shape());
                    for &c in chs {
                        self.norm_channel(nb, gamma[c], c, base_in, &d, &mut out);
                    }
                    out
                }
                LayerDescriptor::Flatten => {
                    let s = d.shape4()?;
                    changed = changed.map(|chs| {
                        let mut f: Vec<usize> = (0..s.h * s.w)
                            .flat_map(|p| chs.iter().map(move |&c| p * s.c + c))
                            .collect();
                        f.sort_unstable();
                        f
                    });
                    d = d.reshape(&[s.n, s.h * s.w * s.c])?;
                    continue;
                }
                LayerDescriptor::Conv2D { filters, kernel } => {
                    let out = conv_delta(
                        &d,
                        layer.state.params[0].value.data(),
                        *kernel,
                        *filters,
                        chs,
                        base_out.shape(),
                    );
                    changed = None;
                    d = out;
                    continue;
                }
                LayerDescriptor::Dense { units } => {
                    let (n, f) = d.dims2()?;
                    let w = layer.state.params[0].value.data();
                    let mut out = Tensor::zeros(&[n, *units]);
                    let od = out.data_mut();
                    for s in 0..n {
                        let row = &mut od[s * units..(s + 1) * units];
                        let mut add = |i: usize| {
                            let dv = d.data()[s * f + i];
                            if dv != 0.0 {
                                for (o, wv) in row.iter_mut().zip(&w[i * units..(i + 1) * units]) {
                                    *o += dv * wv;
                                }
                            }
                        };
                        match chs {
                            Some(c) => c.iter().for_each(|&i| add(i)),
                            None => (0..f).for_each(add),
                        }
                    }
                    changed = None;
                    d = out;
                    continue;
                }
            };
            d = next;
        }
        Err(Error::State("network does not end in softmax".into()))
    }

    /// Change of one batch-norm output channel caused by the input change
    /// `d`, written without subtracting nearly equal quantities.
    fn norm_channel(
        &self,
        nb: &NormBase,
        gamma: f64,
        c: usize,
        x: &Tensor,
        d: &Tensor,
        out: &mut Tensor,
    ) {
        let last = d.last_dim();
        let (xd, dd) = (x.data(), d.data());
        let od = out.data_mut();
        match self.mode {
            Mode::Infer => {
                let scale = gamma * nb.inv_std(c);
                visit(d.len(), last, Some(&[c]), |i| od[i] = scale * dd[i]);
            }
            Mode::Train => {
                let rows = (d.len() / last) as f64;
                let mut dm = 0.0;
                visit(d.len(), last, Some(&[c]), |i| dm += dd[i]);
                dm /= rows;
                let (mut cross, mut sq) = (0.0, 0.0);
                visit(d.len(), last, Some(&[c]), |i| {
                    let e = dd[i] - dm;
                    cross += (xd[i] - nb.mean[c]) * e;
                    sq += e * e;
                });
                let dv = (2.0 * cross + sq) / rows;
                let sb = (nb.var[c] + nb.epsilon).sqrt();
                let sa = (nb.var[c] + dv + nb.epsilon).sqrt();
                let dinv = -dv / (sa * sb * (sa + sb));
                visit(d.len(), last, Some(&[c]), |i| {
                    od[i] = gamma * ((dd[i] - dm) / sa + (xd[i] - nb.mean[c]) * dinv);
                });
            }
        }
    }

    /// Mean cross-entropy change when the logits behind `probs` move by `dz`.
    fn softmax_loss_change(&self, probs: &Tensor, dz: &Tensor) -> Result<f64> {
        let (n, k) = dz.dims2()?;
        let (p, z, y) = (probs.data(), dz.data(), self.labels.data());
        let mut total = 0.0;
        for s in 0..n {
            let r = s * k..(s + 1) * k;
            let spread: f64 = p[r.clone()]
                .iter()
                .zip(&z[r.clone()])
                .map(|(p, z)| p * z.exp_m1())
                .sum();
            let target: f64 = y[r.clone()].iter().zip(&z[r]).map(|(y, z)| y * z).sum();
            total += spread.ln_1p() - target;
        }
        let change = total / n as f64;
        if !change.is_finite() {
            return Err(Error::Numeric(format!(
                "loss change is not finite: {change}"
            )));
        }
        Ok(change)
    }
}

/// Valid convolution (no bias) of an activation change, restricted to the
/// input channels in `channels` when given.
fn conv_delta(
    d: &Tensor,
    k: &[f64],
    kernel: usize,
    filters: usize,
    channels: Option<&[usize]>,
    out_shape: &[usize],
) -> Tensor {
    let s = d.shape4().expect("conv input is rank 4");
    let (oh, ow) = (s.h - kernel + 1, s.w - kernel + 1);
    let mut y = Tensor::zeros(out_shape);
    let yd = y.data_mut();
    let dd = d.data();
    let all: Vec<usize>;
    let channels = match channels {
        Some(c) => c,
        None => {
            all = (0..s.c).collect();
            &all
        }
    };
    for n in 0..s.n {
        for r in 0..s.h {
            for c in 0..s.w {
                for &ci in channels {
                    let dv = dd[((n * s.h + r) * s.w + c) * s.c + ci];
                    if dv == 0.0 {
                        continue;
                    }
                    // every output position (i, j) that reads input (r, c)
                    for di in (0..kernel).filter(|&di| di <= r && r - di < oh) {
                        for dj in (0..kernel).filter(|&dj| dj <= c && c - dj < ow) {
                            let krow = &k[((di * kernel + dj) * s.c + ci) * filters..][..filters];
                            let dst =
                                &mut yd[((n * oh + r - di) * ow + c - dj) * filters..][..filters];
                            for (o, kv) in dst.iter_mut().zip(krow) {
                                *o += dv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}
