//! Dense row-major tensors and the numeric kernels the layers are built on.
//!
//! Image batches use `(sample, row, column, channel)` order, so a grayscale
//! image is one contiguous `h * w` block. All kernels run in `f64`.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Samples per partial sum when reducing parameter gradients over a batch.
/// Partials are summed in sample order, so the result does not depend on
/// how many worker threads computed them.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape4 {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::dim(format!(
                "shape extents must be positive, got {n}x{h}x{w}x{c}"
            )));
        }
        Ok(Shape4 { n, h, w, c })
    }

    pub fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Interprets a rank-4 tensor as an image batch.
    pub fn shape4(&self) -> Result<Shape4> {
        match self.shape[..] {
            [n, h, w, c] => Shape4::new(n, h, w, c),
            _ => Err(Error::dim(format!(
                "expected rank-4 (n, h, w, c) tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Returns `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::dim(format!(
                "index rank {} does not match tensor rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0;
        for (axis, (&i, &d)) in index.iter().zip(&self.shape).enumerate() {
            if i >= d {
                return Err(Error::dim(format!(
                    "index {i} out of range for axis {axis} of extent {d}"
                )));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Size of the last axis; the channel count for image batches.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }
}

/// Output extents of a stride-1 valid convolution.
pub fn conv_output_shape(input: Shape4, kh: usize, kw: usize, cout: usize) -> Result<Shape4> {
    if kh > input.h || kw > input.w {
        return Err(Error::dim(format!(
            "kernel {kh}x{kw} larger than input rows/cols {}x{}",
            input.h, input.w
        )));
    }
    Shape4::new(input.n, input.h - kh + 1, input.w - kw + 1, cout)
}

fn check_conv_args(input: &Tensor, kernels: &Tensor) -> Result<(Shape4, [usize; 4], Shape4)> {
    let xs = input.shape4()?;
    let kd: [usize; 4] = match kernels.shape()[..] {
        [a, b, c, d] => [a, b, c, d],
        _ => {
            return Err(Error::dim(format!(
                "kernels must be rank 4 (kh, kw, cin, cout), got {:?}",
                kernels.shape()
            )))
        }
    };
    if kd[2] != xs.c {
        return Err(Error::dim(format!(
            "channel axis mismatch: input has {} channels, kernels expect {}",
            xs.c, kd[2]
        )));
    }
    let out = conv_output_shape(xs, kd[0], kd[1], kd[3])?;
    Ok((xs, kd, out))
}

/// Valid (unpadded), stride-1 2-D convolution in cross-correlation form:
/// `out[n,i,j,o] = bias[o] + sum over di,dj,ci of input[n,i+di,j+dj,ci] * kernels[di,dj,ci,o]`.
pub fn conv2d_valid(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (xs, kd, os) = check_conv_args(input, kernels)?;
    let [kh, kw, cin, cout] = kd;
    if bias.len() != cout {
        return Err(Error::dim(format!(
            "bias length {} does not match output channels {cout}",
            bias.len()
        )));
    }
    let x = input.data();
    let k = kernels.data();
    let b = bias.data();
    let in_sample = xs.h * xs.w * cin;
    let out_sample = os.h * os.w * cout;
    let mut out = vec![0.0; os.len()];
    out.par_chunks_mut(out_sample)
        .enumerate()
        .for_each(|(n, dst)| {
            let src = &x[n * in_sample..(n + 1) * in_sample];
            for i in 0..os.h {
                for j in 0..os.w {
                    let acc = &mut dst[(i * os.w + j) * cout..(i * os.w + j + 1) * cout];
                    acc.copy_from_slice(b);
                    for di in 0..kh {
                        for dj in 0..kw {
                            let px = ((i + di) * xs.w + (j + dj)) * cin;
                            let kb = (di * kw + dj) * cin;
                            for ci in 0..cin {
                                let v = src[px + ci];
                                let krow = &k[(kb + ci) * cout..(kb + ci + 1) * cout];
                                for (a, &kv) in acc.iter_mut().zip(krow) {
                                    *a += v * kv;
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::from_vec(&os.dims(), out)
}

/// Gradients of `sum(upstream * conv2d_valid(input, kernels, bias))`.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_grads(input: &Tensor, kernels: &Tensor, upstream: &Tensor) -> Result<ConvGrads> {
    let (xs, kd, os) = check_conv_args(input, kernels)?;
    if upstream.shape() != os.dims() {
        return Err(Error::dim(format!(
            "upstream gradient shape {:?} does not match conv output {:?}",
            upstream.shape(),
            os.dims()
        )));
    }
    let [kh, kw, cin, cout] = kd;
    let x = input.data();
    let k = kernels.data();
    let g = upstream.data();
    let in_sample = xs.h * xs.w * cin;
    let out_sample = os.h * os.w * cout;

    let mut dx = vec![0.0; xs.len()];
    dx.par_chunks_mut(in_sample)
        .enumerate()
        .for_each(|(n, dst)| {
            let gs = &g[n * out_sample..(n + 1) * out_sample];
            for i in 0..os.h {
                for j in 0..os.w {
                    let grow = &gs[(i * os.w + j) * cout..(i * os.w + j + 1) * cout];
                    for di in 0..kh {
                        for dj in 0..kw {
                            let px = ((i + di) * xs.w + (j + dj)) * cin;
                            let kb = (di * kw + dj) * cin;
                            for ci in 0..cin {
                                let krow = &k[(kb + ci) * cout..(kb + ci + 1) * cout];
                                let dot: f64 = grow.iter().zip(krow).map(|(a, b)| a * b).sum();
                                dst[px + ci] += dot;
                            }
                        }
                    }
                }
            }
        });

    let ksize = k.len();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..xs.n)
        .collect::<Vec<_>>()
        .par_chunks(GRAD_CHUNK)
        .map(|samples| {
            let mut dk = vec![0.0; ksize];
            let mut db = vec![0.0; cout];
            for &n in samples {
                let src = &x[n * in_sample..(n + 1) * in_sample];
                let gs = &g[n * out_sample..(n + 1) * out_sample];
                for i in 0..os.h {
                    for j in 0..os.w {
                        let grow = &gs[(i * os.w + j) * cout..(i * os.w + j + 1) * cout];
                        for (a, &gv) in db.iter_mut().zip(grow) {
                            *a += gv;
                        }
                        for di in 0..kh {
                            for dj in 0..kw {
                                let px = ((i + di) * xs.w + (j + dj)) * cin;
                                let kb = (di * kw + dj) * cin;
                                for ci in 0..cin {
                                    let v = src[px + ci];
                                    if v == 0.0 {
                                        continue;
                                    }
                                    let drow = &mut dk[(kb + ci) * cout..(kb + ci + 1) * cout];
                                    for (a, &gv) in drow.iter_mut().zip(grow) {
                                        *a += v * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (dk, db)
        })
        .collect();

    let mut dk = vec![0.0; ksize];
    let mut db = vec![0.0; cout];
    for (pk, pb) in &partials {
        for (a, b) in dk.iter_mut().zip(pk) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }

    Ok(ConvGrads {
        input: Tensor::from_vec(&xs.dims(), dx)?,
        kernels: Tensor::from_vec(kernels.shape(), dk)?,
        bias: Tensor::from_vec(&[cout], db)?,
    })
}

/// Winning input position of every 2x2 pooling window, as flat offsets into
/// the forward input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolArgmax {
    pub input_shape: Shape4,
    pub output_shape: Shape4,
    pub index: Vec<usize>,
}

/// Non-overlapping 2x2 max pooling with stride 2. A trailing odd row or
/// column is dropped. Ties go to the first element in scan order.
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, PoolArgmax)> {
    let xs = input.shape4()?;
    if xs.h < 2 || xs.w < 2 {
        return Err(Error::dim(format!(
            "2x2 pooling needs rows and cols >= 2, got {}x{}",
            xs.h, xs.w
        )));
    }
    let os = Shape4::new(xs.n, xs.h / 2, xs.w / 2, xs.c)?;
    let x = input.data();
    let mut out = Vec::with_capacity(os.len());
    let mut index = Vec::with_capacity(os.len());
    for n in 0..os.n {
        for i in 0..os.h {
            for j in 0..os.w {
                for c in 0..os.c {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let off = ((n * xs.h + 2 * i + di) * xs.w + 2 * j + dj) * xs.c + c;
                        // strict comparison keeps the first maximum
                        if best == usize::MAX || x[off] > best_v {
                            best = off;
                            best_v = x[off];
                        }
                    }
                    out.push(best_v);
                    index.push(best);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&os.dims(), out)?,
        PoolArgmax {
            input_shape: xs,
            output_shape: os,
            index,
        },
    ))
}

pub fn maxpool2x2_backward(
    argmax: &PoolArgmax,
    upstream: &Tensor,
    input_shape: Shape4,
) -> Result<Tensor> {
    if input_shape != argmax.input_shape {
        return Err(Error::dim(format!(
            "input shape {:?} differs from the pooled shape {:?}",
            input_shape.dims(),
            argmax.input_shape.dims()
        )));
    }
    if upstream.shape() != argmax.output_shape.dims() {
        return Err(Error::dim(format!(
            "upstream gradient shape {:?} does not match pooled output {:?}",
            upstream.shape(),
            argmax.output_shape.dims()
        )));
    }
    let mut dx = vec![0.0; input_shape.len()];
    for (&pos, &g) in argmax.index.iter().zip(upstream.data()) {
        dx[pos] += g;
    }
    Tensor::from_vec(&input_shape.dims(), dx)
}

/// `a (m x k) . b (k x p)`. Each output element accumulates in `k` order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, p) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "inner dimensions differ: {m}x{k} . {k2}x{p}"
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * p];
    out.par_chunks_mut(p).enumerate().for_each(|(i, row)| {
        for (kk, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[kk * p..(kk + 1) * p]) {
                *o += av * bv;
            }
        }
    });
    Tensor::from_vec(&[m, p], out)
}

/// `aᵀ . b` for `a: n x k`, `b: n x p`, accumulating over `n` in order.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (n2, p) = b.dims2()?;
    if n != n2 {
        return Err(Error::dim(format!(
            "row counts differ: ({n}x{k})ᵀ . {n2}x{p}"
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; k * p];
    out.par_chunks_mut(p).enumerate().for_each(|(i, row)| {
        for s in 0..n {
            let av = ad[s * k + i];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[s * p..(s + 1) * p]) {
                *o += av * bv;
            }
        }
    });
    Tensor::from_vec(&[k, p], out)
}

/// `a . bᵀ` for `a: m x p`, `b: k x p`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p) = a.dims2()?;
    let (k, p2) = b.dims2()?;
    if p != p2 {
        return Err(Error::dim(format!(
            "column counts differ: {m}x{p} . ({k}x{p2})ᵀ"
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * k];
    out.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let arow = &ad[i * p..(i + 1) * p];
        for (j, o) in row.iter_mut().enumerate() {
            *o = arow
                .iter()
                .zip(&bd[j * p..(j + 1) * p])
                .map(|(x, y)| x * y)
                .sum();
        }
    });
    Tensor::from_vec(&[m, k], out)
}
