//! The three classifier architectures and the model container that runs them.
//!
//! Layer counts and dropout rates are fixed by the architectures; filter
//! counts, dense widths and the order of layers inside each block are
//! reconstructions:
//!
//! | id   | conv filters   | dense head        | trainable params |
//! |------|----------------|-------------------|------------------|
//! | cnn1 | 32             | 128 → 2           | 803,522          |
//! | cnn3 | 32, 64, 64     | 128 → 2           | 260,930          |
//! | cnn4 | 32, 32, 64, 64 | 256 → 128 → 64 → 2 | 369,826         |
//!
//! cnn4 additionally carries 1,152 batch-norm running statistics.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerDescriptor, Mode, Param, StreamKeys};
use crate::optim;
use crate::rng::{self, Purpose};
use crate::tensor::{Shape4, Tensor};

pub const IMAGE_SIZE: usize = 30;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchId {
    Cnn1,
    Cnn3,
    Cnn4,
}

impl ArchId {
    pub const ALL: [ArchId; 3] = [ArchId::Cnn1, ArchId::Cnn3, ArchId::Cnn4];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::Cnn1 => "cnn1",
            ArchId::Cnn3 => "cnn3",
            ArchId::Cnn4 => "cnn4",
        }
    }

    pub fn spec(self) -> ArchitectureSpec {
        match self {
            ArchId::Cnn1 => build_cnn1(),
            ArchId::Cnn3 => build_cnn3(),
            ArchId::Cnn4 => build_cnn4(),
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "unknown architecture `{s}`; valid ids: cnn1, cnn3, cnn4"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub id: ArchId,
    /// Single-sample input shape.
    pub input: Shape4,
    pub layers: Vec<LayerDescriptor>,
    /// Per-sample output shape of each layer.
    pub shapes: Vec<Vec<usize>>,
    /// Trainable parameters (batch-norm running statistics excluded).
    pub param_count: usize,
}

impl ArchitectureSpec {
    fn resolve(id: ArchId, layers: Vec<LayerDescriptor>) -> Result<Self> {
        let input = Shape4::new(1, IMAGE_SIZE, IMAGE_SIZE, 1)?;
        let mut shape = vec![input.h, input.w, input.c];
        let mut shapes = Vec::with_capacity(layers.len());
        let mut param_count = 0;
        for desc in &layers {
            param_count += desc
                .param_shapes(&shape)?
                .iter()
                .map(|(_, s)| s.iter().product::<usize>())
                .sum::<usize>();
            shape = desc.output_shape(&shape)?;
            shapes.push(shape.clone());
        }
        if layers.last() != Some(&LayerDescriptor::Softmax) || shape != [NUM_CLASSES] {
            return Err(Error::dim(format!(
                "{id} must end in a {NUM_CLASSES}-way softmax, ends with shape {shape:?}"
            )));
        }
        Ok(ArchitectureSpec {
            id,
            input,
            layers,
            shapes,
            param_count,
        })
    }

    pub fn count(&self, kind: &str) -> usize {
        self.layers.iter().filter(|d| d.kind() == kind).count()
    }

    pub fn dropout_rates(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(|d| match d {
                LayerDescriptor::Dropout { rate } => Some(*rate),
                _ => None,
            })
            .collect()
    }

    /// Width of the flattened feature vector.
    pub fn flatten_width(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|d| *d == LayerDescriptor::Flatten)
            .map(|i| self.shapes[i][0])
    }
}

fn conv_relu(filters: usize) -> [LayerDescriptor; 2] {
    [LayerDescriptor::conv3x3(filters), LayerDescriptor::ReLU]
}

fn conv_bn_relu(filters: usize) -> [LayerDescriptor; 3] {
    [
        LayerDescriptor::conv3x3(filters),
        LayerDescriptor::batch_norm(),
        LayerDescriptor::ReLU,
    ]
}

fn dense(units: usize) -> LayerDescriptor {
    LayerDescriptor::Dense { units }
}

fn dropout(rate: f64) -> LayerDescriptor {
    LayerDescriptor::Dropout { rate }
}

/// Conv(32) → ReLU → pool → dropout 0.20 → flatten → dense 128 → ReLU → dense 2 → softmax.
pub fn build_cnn1() -> ArchitectureSpec {
    use LayerDescriptor::*;
    let mut layers = Vec::new();
    layers.extend(conv_relu(32));
    layers.extend([
        MaxPool2x2,
        dropout(0.20),
        Flatten,
        dense(128),
        ReLU,
        dense(2),
        Softmax,
    ]);
    ArchitectureSpec::resolve(ArchId::Cnn1, layers).expect("cnn1 layer chain is valid")
}

pub fn build_cnn3() -> ArchitectureSpec {
    use LayerDescriptor::*;
    let mut layers = Vec::new();
    layers.extend(conv_relu(32));
    layers.extend(conv_relu(64));
    layers.extend([MaxPool2x2, dropout(0.25)]);
    layers.extend(conv_relu(64));
    layers.extend([
        MaxPool2x2,
        dropout(0.25),
        Flatten,
        dense(128),
        ReLU,
        dropout(0.30),
    ]);
    layers.extend([dense(2), Softmax]);
    ArchitectureSpec::resolve(ArchId::Cnn3, layers).expect("cnn3 layer chain is valid")
}

pub fn build_cnn4() -> ArchitectureSpec {
    use LayerDescriptor::*;
    let bn = LayerDescriptor::batch_norm;
    let mut layers = Vec::new();
    layers.extend(conv_bn_relu(32));
    layers.extend(conv_bn_relu(32));
    layers.extend([MaxPool2x2, dropout(0.25)]);
    layers.extend(conv_bn_relu(64));
    layers.extend(conv_bn_relu(64));
    layers.extend([MaxPool2x2, dropout(0.25), Flatten]);
    layers.extend([dense(256), bn(), ReLU, dropout(0.25)]);
    layers.extend([dense(128), bn(), ReLU, dropout(0.40)]);
    layers.extend([dense(64), ReLU, dropout(0.30)]);
    layers.extend([dense(2), Softmax]);
    ArchitectureSpec::resolve(ArchId::Cnn4, layers).expect("cnn4 layer chain is valid")
}

/// A built architecture with its layer state.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ArchitectureSpec,
    pub layers: Vec<Layer>,
    pub seed: u64,
    pub epoch: u64,
}

impl Model {
    /// Initializes every layer from its own `(seed, layer index)` stream.
    pub fn new(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        let mut shape = vec![spec.input.h, spec.input.w, spec.input.c];
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, desc) in spec.layers.iter().enumerate() {
            let mut r = rng::stream(seed, Purpose::Init, &[i as u64]);
            let layer = Layer::new(desc.clone(), &shape, &mut r)?;
            shape = layer.output_shape.clone();
            layers.push(layer);
        }
        Ok(Model {
            spec,
            layers,
            seed,
            epoch: 0,
        })
    }

    pub fn build(id: ArchId, seed: u64) -> Result<Self> {
        Model::new(id.spec(), seed)
    }

    pub fn id(&self) -> ArchId {
        self.spec.id
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Names like `conv2d_1` or `dense_3`, numbered per kind from 1.
    pub fn layer_names(&self) -> Vec<String> {
        let mut counts = std::collections::HashMap::new();
        self.layers
            .iter()
            .map(|l| {
                let k = counts.entry(l.desc.kind()).or_insert(0);
                *k += 1;
                format!("{}_{}", l.desc.kind(), k)
            })
            .collect()
    }

    /// `(layer index, "layer.param", param)` for every trainable tensor.
    pub fn named_params(&self) -> Vec<(usize, String, &Param)> {
        let names = self.layer_names();
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let name = &names[i];
                l.state
                    .params
                    .iter()
                    .map(move |p| (i, format!("{name}.{}", p.name), p))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.state.params.iter_mut())
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| l.state.params.iter().map(|p| p.value.shape().to_vec()))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for l in &mut self.layers {
            l.state.zero_grads();
        }
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        let s = x.shape4()?;
        if (s.h, s.w, s.c) != (self.spec.input.h, self.spec.input.w, self.spec.input.c) {
            return Err(Error::dim(format!(
                "{} expects {}x{}x{} images, got batch {:?}",
                self.spec.id,
                self.spec.input.h,
                self.spec.input.w,
                self.spec.input.c,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass that fills the layer caches for [`Model::backward`].
    /// Returns the softmax probabilities.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, keys: &StreamKeys<'_>) -> Result<Tensor> {
        self.check_batch(x)?;
        let mut a = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            a = layer.forward(&a, mode, keys, i)?;
        }
        Ok(a)
    }

    /// Backpropagates the mean cross-entropy of the last forward pass,
    /// accumulating parameter gradients. The softmax and loss are
    /// differentiated together. Returns the gradient at the input.
    pub fn backward(&mut self, probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let mut g = optim::softmax_xent_grad(probs, labels)?;
        let last = self.layers.len() - 1;
        self.layers[last].state.clear_cache();
        for layer in self.layers[..last].iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Inference-mode probabilities; leaves the model untouched.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let mut a = x.clone();
        for layer in &self.layers {
            a = layer.apply(&a, Mode::Infer, None)?;
        }
        Ok(a)
    }
}
