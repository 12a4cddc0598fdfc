//! Layer specifications and their batched forward/backward kernels.
//!
//! Every kernel works on a flat row-major batch `[n, ..sample_shape]`.
//! Convolutional feature maps are channels-last (`[rows, cols, channels]`),
//! recurrent inputs are `[timesteps, features]`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Side length of every convolution kernel.
pub const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize, activation: Activation },
    /// 3×3 kernel, stride 1, "same" zero padding.
    Conv2D { filters: usize, activation: Activation },
    /// 2×2 window, stride 2.
    MaxPool2D,
    Dropout { rate: f64 },
    Flatten,
    Reshape { rows: usize, cols: usize },
    Lstm { units: usize, return_sequences: bool },
    /// Linear projection to `classes` logits; the model applies softmax.
    SoftmaxOutput { classes: usize },
}

impl LayerSpec {
    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense {
            units,
            activation: Activation::Relu,
        }
    }

    pub fn conv(filters: usize) -> Self {
        LayerSpec::Conv2D {
            filters,
            activation: Activation::Relu,
        }
    }

    pub fn lstm(units: usize, return_sequences: bool) -> Self {
        LayerSpec::Lstm {
            units,
            return_sequences,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2D { .. } => "conv2d",
            LayerSpec::MaxPool2D => "maxpool2d",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::Lstm { .. } => "lstm",
            LayerSpec::SoftmaxOutput { .. } => "softmax_output",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match *self {
            LayerSpec::Dense { units, .. } | LayerSpec::Lstm { units, .. } if units == 0 => {
                bad(format!("{} layer needs at least one unit", self.name()))
            }
            LayerSpec::Conv2D { filters: 0, .. } => bad("conv2d needs at least one filter".into()),
            LayerSpec::SoftmaxOutput { classes } if classes < 2 => {
                bad("softmax output needs at least two classes".into())
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                bad(format!("dropout rate {rate} outside [0, 1)"))
            }
            LayerSpec::Reshape { rows, cols } if rows == 0 || cols == 0 => {
                bad("reshape dimensions must be positive".into())
            }
            _ => Ok(()),
        }
    }

    /// Per-sample output shape for a given per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let mismatch = |expected: Vec<usize>| Error::ShapeMismatch {
            context: self.name(),
            expected,
            found: input.to_vec(),
        };
        match *self {
            LayerSpec::Dense { units, .. } => match input {
                [_] => Ok(vec![units]),
                _ => Err(mismatch(vec![0])),
            },
            LayerSpec::SoftmaxOutput { classes } => match input {
                [_] => Ok(vec![classes]),
                _ => Err(mismatch(vec![0])),
            },
            LayerSpec::Conv2D { filters, .. } => match input {
                [h, w] | [h, w, _] => Ok(vec![*h, *w, filters]),
                _ => Err(mismatch(vec![0, 0, 0])),
            },
            LayerSpec::MaxPool2D => match input {
                [h, w] if *h >= 2 && *w >= 2 => Ok(vec![h / 2, w / 2, 1]),
                [h, w, c] if *h >= 2 && *w >= 2 => Ok(vec![h / 2, w / 2, *c]),
                _ => Err(mismatch(vec![2, 2, 0])),
            },
            LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Reshape { rows, cols } => {
                if input.iter().product::<usize>() == rows * cols {
                    Ok(vec![rows, cols])
                } else {
                    Err(mismatch(vec![rows * cols]))
                }
            }
            LayerSpec::Lstm {
                units,
                return_sequences,
            } => match input {
                [t, _] if return_sequences => Ok(vec![*t, units]),
                [_, _] => Ok(vec![units]),
                _ => Err(mismatch(vec![0, 0])),
            },
        }
    }

    /// Parameter tensor shapes, in storage order.
    pub fn param_shapes(&self, input: &[usize]) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { units, .. } => vec![vec![input[0], units], vec![units]],
            LayerSpec::SoftmaxOutput { classes } => vec![vec![input[0], classes], vec![classes]],
            LayerSpec::Conv2D { filters, .. } => {
                let c = channels(input);
                vec![vec![KERNEL, KERNEL, c, filters], vec![filters]]
            }
            LayerSpec::Lstm { units, .. } => {
                vec![vec![input[1], 4 * units], vec![units, 4 * units], vec![4 * units]]
            }
            _ => Vec::new(),
        }
    }
}

fn channels(shape: &[usize]) -> usize {
    shape.get(2).copied().unwrap_or(1)
}

fn glorot(rng: &mut dyn RngCore, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-limit..=limit)).collect()
}

/// A layer bound to concrete input dimensions and holding its parameters.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub params: Vec<Tensor>,
}

pub(crate) enum Cache {
    Identity,
    Dense { input: Vec<f64>, output: Vec<f64> },
    Conv { patches: Vec<f64>, output: Vec<f64> },
    Pool { argmax: Vec<usize> },
    Dropout { mask: Vec<f64> },
    Lstm(LstmCache),
}

pub(crate) struct LstmCache {
    inputs: Vec<Vec<f64>>,
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
}

impl Layer {
    pub fn new(spec: LayerSpec, in_shape: &[usize], rng: &mut dyn RngCore) -> Result<Self> {
        let out_shape = spec.output_shape(in_shape)?;
        let shapes = spec.param_shapes(in_shape);
        let params = match spec {
            LayerSpec::Dense { units, .. } | LayerSpec::SoftmaxOutput { classes: units } => {
                let fan_in = in_shape[0];
                vec![
                    Tensor::new(shapes[0].clone(), glorot(rng, fan_in, units, fan_in * units))?,
                    Tensor::zeros(shapes[1].clone()),
                ]
            }
            LayerSpec::Conv2D { filters, .. } => {
                let c = channels(in_shape);
                let taps = KERNEL * KERNEL;
                vec![
                    Tensor::new(
                        shapes[0].clone(),
                        glorot(rng, taps * c, taps * filters, taps * c * filters),
                    )?,
                    Tensor::zeros(shapes[1].clone()),
                ]
            }
            LayerSpec::Lstm { units, .. } => {
                let features = in_shape[1];
                let kernel = glorot(rng, features, 4 * units, features * 4 * units);
                let recurrent = glorot(rng, units, 4 * units, units * 4 * units);
                let mut bias = vec![0.0; 4 * units];
                // Forget gate starts open.
                bias[units..2 * units].fill(1.0);
                vec![
                    Tensor::new(shapes[0].clone(), kernel)?,
                    Tensor::new(shapes[1].clone(), recurrent)?,
                    Tensor::new(shapes[2].clone(), bias)?,
                ]
            }
            _ => Vec::new(),
        };
        Ok(Self {
            spec,
            in_shape: in_shape.to_vec(),
            out_shape,
            params,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// `dropout_rng` is `Some` in training mode.
    pub fn forward(
        &self,
        x: Vec<f64>,
        n: usize,
        dropout_rng: Option<&mut dyn RngCore>,
        keep_cache: bool,
    ) -> (Vec<f64>, Cache) {
        match self.spec {
            LayerSpec::Dense { activation, .. } => self.dense_forward(x, n, activation, keep_cache),
            LayerSpec::SoftmaxOutput { .. } => {
                self.dense_forward(x, n, Activation::Linear, keep_cache)
            }
            LayerSpec::Conv2D { activation, .. } => self.conv_forward(&x, n, activation, keep_cache),
            LayerSpec::MaxPool2D => self.pool_forward(&x, n),
            LayerSpec::Dropout { rate } => match dropout_rng {
                Some(rng) if rate > 0.0 => {
                    let keep = 1.0 - rate;
                    let mask: Vec<f64> = (0..x.len())
                        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
                        .collect();
                    let y = x.iter().zip(&mask).map(|(v, m)| v * m).collect();
                    (y, Cache::Dropout { mask })
                }
                _ => (x, Cache::Identity),
            },
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => (x, Cache::Identity),
            LayerSpec::Lstm {
                units,
                return_sequences,
            } => self.lstm_forward(&x, n, units, return_sequences),
        }
    }

    /// Returns the input gradient and, when requested, one gradient buffer
    /// per parameter tensor.
    pub fn backward(
        &self,
        cache: &Cache,
        dy: Vec<f64>,
        n: usize,
        param_grads: bool,
    ) -> (Vec<f64>, Option<Vec<Vec<f64>>>) {
        match (&self.spec, cache) {
            (LayerSpec::Dense { activation, .. }, Cache::Dense { input, output }) => {
                self.dense_backward(input, output, dy, n, *activation, param_grads)
            }
            (LayerSpec::SoftmaxOutput { .. }, Cache::Dense { input, output }) => {
                self.dense_backward(input, output, dy, n, Activation::Linear, param_grads)
            }
            (LayerSpec::Conv2D { activation, .. }, Cache::Conv { patches, output }) => {
                self.conv_backward(patches, output, dy, n, *activation, param_grads)
            }
            (LayerSpec::MaxPool2D, Cache::Pool { argmax }) => {
                let mut dx = vec![0.0; n * self.in_len()];
                for (g, &idx) in dy.iter().zip(argmax) {
                    dx[idx] += g;
                }
                (dx, None)
            }
            (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => {
                (dy.iter().zip(mask).map(|(g, m)| g * m).collect(), None)
            }
            (LayerSpec::Lstm { units, return_sequences }, Cache::Lstm(c)) => {
                self.lstm_backward(c, &dy, n, *units, *return_sequences, param_grads)
            }
            (_, Cache::Identity) => (dy, None),
            _ => unreachable!("cache does not belong to layer {}", self.spec.name()),
        }
    }

    fn dense_forward(
        &self,
        x: Vec<f64>,
        n: usize,
        activation: Activation,
        keep_cache: bool,
    ) -> (Vec<f64>, Cache) {
        let (inp, out) = (self.in_shape[0], self.out_shape[0]);
        let (w, b) = (self.params[0].data(), self.params[1].data());
        let mut y = Vec::with_capacity(n * out);
        for _ in 0..n {
            y.extend_from_slice(b);
        }
        gemm_nn(&x, w, &mut y, n, inp, out);
        if activation == Activation::Relu {
            relu_in_place(&mut y);
        }
        let cache = if keep_cache {
            Cache::Dense {
                input: x,
                output: y.clone(),
            }
        } else {
            Cache::Identity
        };
        (y, cache)
    }

    fn dense_backward(
        &self,
        input: &[f64],
        output: &[f64],
        mut dz: Vec<f64>,
        n: usize,
        activation: Activation,
        param_grads: bool,
    ) -> (Vec<f64>, Option<Vec<Vec<f64>>>) {
        let (inp, out) = (self.in_shape[0], self.out_shape[0]);
        if activation == Activation::Relu {
            relu_mask(&mut dz, output);
        }
        let mut dx = vec![0.0; n * inp];
        gemm_nt(&dz, self.params[0].data(), &mut dx, n, out, inp);
        let grads = param_grads.then(|| {
            let mut dw = vec![0.0; inp * out];
            gemm_tn(input, &dz, &mut dw, n, inp, out);
            (dw, column_sums(&dz, out))
        });
        (dx, grads.map(|(dw, db)| vec![dw, db]))
    }

    fn conv_forward(
        &self,
        x: &[f64],
        n: usize,
        activation: Activation,
        keep_cache: bool,
    ) -> (Vec<f64>, Cache) {
        let (h, w, c) = (self.in_shape[0], self.in_shape[1], channels(&self.in_shape));
        let f = self.out_shape[2];
        let cols = KERNEL * KERNEL * c;
        let patches = im2col(x, n, h, w, c);
        let bias = self.params[1].data();
        let mut y = Vec::with_capacity(n * h * w * f);
        for _ in 0..n * h * w {
            y.extend_from_slice(bias);
        }
        gemm_nn(&patches, self.params[0].data(), &mut y, n * h * w, cols, f);
        if activation == Activation::Relu {
            relu_in_place(&mut y);
        }
        let cache = if keep_cache {
            Cache::Conv {
                patches,
                output: y.clone(),
            }
        } else {
            Cache::Identity
        };
        (y, cache)
    }

    fn conv_backward(
        &self,
        patches: &[f64],
        output: &[f64],
        mut dz: Vec<f64>,
        n: usize,
        activation: Activation,
        param_grads: bool,
    ) -> (Vec<f64>, Option<Vec<Vec<f64>>>) {
        let (h, w, c) = (self.in_shape[0], self.in_shape[1], channels(&self.in_shape));
        let f = self.out_shape[2];
        let cols = KERNEL * KERNEL * c;
        let positions = n * h * w;
        if activation == Activation::Relu {
            relu_mask(&mut dz, output);
        }
        let mut dpatches = vec![0.0; positions * cols];
        gemm_nt(&dz, self.params[0].data(), &mut dpatches, positions, f, cols);
        let dx = col2im(&dpatches, n, h, w, c);
        let grads = param_grads.then(|| {
            let mut dk = vec![0.0; cols * f];
            gemm_tn(patches, &dz, &mut dk, positions, cols, f);
            vec![dk, column_sums(&dz, f)]
        });
        (dx, grads)
    }

    fn pool_forward(&self, x: &[f64], n: usize) -> (Vec<f64>, Cache) {
        let (h, w, c) = (self.in_shape[0], self.in_shape[1], channels(&self.in_shape));
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for s in 0..n {
            let base = s * h * w * c;
            for r in 0..oh {
                for col in 0..ow {
                    for ch in 0..c {
                        let mut best_idx = base + ((2 * r) * w + 2 * col) * c + ch;
                        let mut best = x[best_idx];
                        for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + ((2 * r + dr) * w + 2 * col + dc) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                        y.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        (y, Cache::Pool { argmax })
    }

    fn lstm_forward(
        &self,
        x: &[f64],
        n: usize,
        units: usize,
        return_sequences: bool,
    ) -> (Vec<f64>, Cache) {
        let (steps, features) = (self.in_shape[0], self.in_shape[1]);
        let (kernel, recurrent, bias) = (
            self.params[0].data(),
            self.params[1].data(),
            self.params[2].data(),
        );
        let g4 = 4 * units;
        let mut cache = LstmCache {
            inputs: Vec::with_capacity(steps),
            gates: Vec::with_capacity(steps),
            cells: vec![vec![0.0; n * units]],
            hidden: vec![vec![0.0; n * units]],
        };
        for t in 0..steps {
            let mut xt = Vec::with_capacity(n * features);
            for s in 0..n {
                let off = (s * steps + t) * features;
                xt.extend_from_slice(&x[off..off + features]);
            }
            let mut z = Vec::with_capacity(n * g4);
            for _ in 0..n {
                z.extend_from_slice(bias);
            }
            gemm_nn(&xt, kernel, &mut z, n, features, g4);
            gemm_nn(&cache.hidden[t], recurrent, &mut z, n, units, g4);
            let c_prev = &cache.cells[t];
            let mut c_new = vec![0.0; n * units];
            let mut h_new = vec![0.0; n * units];
            for s in 0..n {
                let zs = &mut z[s * g4..(s + 1) * g4];
                for u in 0..units {
                    let i = sigmoid(zs[u]);
                    let f = sigmoid(zs[units + u]);
                    let g = zs[2 * units + u].tanh();
                    let o = sigmoid(zs[3 * units + u]);
                    zs[u] = i;
                    zs[units + u] = f;
                    zs[2 * units + u] = g;
                    zs[3 * units + u] = o;
                    let c = f * c_prev[s * units + u] + i * g;
                    c_new[s * units + u] = c;
                    h_new[s * units + u] = o * c.tanh();
                }
            }
            cache.inputs.push(xt);
            cache.gates.push(z);
            cache.cells.push(c_new);
            cache.hidden.push(h_new);
        }
        let y = if return_sequences {
            let mut y = vec![0.0; n * steps * units];
            for t in 0..steps {
                let h = &cache.hidden[t + 1];
                for s in 0..n {
                    let dst = (s * steps + t) * units;
                    y[dst..dst + units].copy_from_slice(&h[s * units..(s + 1) * units]);
                }
            }
            y
        } else {
            cache.hidden[steps].clone()
        };
        (y, Cache::Lstm(cache))
    }

    fn lstm_backward(
        &self,
        cache: &LstmCache,
        dy: &[f64],
        n: usize,
        units: usize,
        return_sequences: bool,
        param_grads: bool,
    ) -> (Vec<f64>, Option<Vec<Vec<f64>>>) {
        let (steps, features) = (self.in_shape[0], self.in_shape[1]);
        let (kernel, recurrent) = (self.params[0].data(), self.params[1].data());
        let g4 = 4 * units;
        let mut dx = vec![0.0; n * steps * features];
        let mut dkernel = vec![0.0; if param_grads { features * g4 } else { 0 }];
        let mut drecurrent = vec![0.0; if param_grads { units * g4 } else { 0 }];
        let mut dbias = vec![0.0; if param_grads { g4 } else { 0 }];
        let mut dh_next = vec![0.0; n * units];
        let mut dc_next = vec![0.0; n * units];
        let mut dz = vec![0.0; n * g4];
        for t in (0..steps).rev() {
            let gates = &cache.gates[t];
            let c_prev = &cache.cells[t];
            let c_cur = &cache.cells[t + 1];
            for s in 0..n {
                for u in 0..units {
                    let k = s * units + u;
                    let mut dh = dh_next[k];
                    if return_sequences {
                        dh += dy[(s * steps + t) * units + u];
                    } else if t + 1 == steps {
                        dh += dy[k];
                    }
                    let gs = &gates[s * g4..(s + 1) * g4];
                    let (i, f, g, o) = (gs[u], gs[units + u], gs[2 * units + u], gs[3 * units + u]);
                    let tc = c_cur[k].tanh();
                    let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
                    dc_next[k] = dc * f;
                    let dzs = &mut dz[s * g4..(s + 1) * g4];
                    dzs[u] = dc * g * i * (1.0 - i);
                    dzs[units + u] = dc * c_prev[k] * f * (1.0 - f);
                    dzs[2 * units + u] = dc * i * (1.0 - g * g);
                    dzs[3 * units + u] = dh * tc * o * (1.0 - o);
                }
            }
            let mut dxt = vec![0.0; n * features];
            gemm_nt(&dz, kernel, &mut dxt, n, g4, features);
            for s in 0..n {
                let off = (s * steps + t) * features;
                dx[off..off + features].copy_from_slice(&dxt[s * features..(s + 1) * features]);
            }
            dh_next.fill(0.0);
            gemm_nt(&dz, recurrent, &mut dh_next, n, g4, units);
            if param_grads {
                gemm_tn(&cache.inputs[t], &dz, &mut dkernel, n, features, g4);
                gemm_tn(&cache.hidden[t], &dz, &mut drecurrent, n, units, g4);
                for (acc, v) in dbias.iter_mut().zip(column_sums(&dz, g4)) {
                    *acc += v;
                }
            }
        }
        (dx, param_grads.then(|| vec![dkernel, drecurrent, dbias]))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn relu_in_place(y: &mut [f64]) {
    for v in y {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradients where the ReLU output was not positive.
fn relu_mask(dz: &mut [f64], output: &[f64]) {
    for (g, &o) in dz.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

fn column_sums(m: &[f64], cols: usize) -> Vec<f64> {
    let mut sums = vec![0.0; cols];
    for row in m.chunks_exact(cols) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

/// Expands each 3×3 neighbourhood (zero padded) into a row of
/// `9·channels` values ordered (ky, kx, channel).
fn im2col(x: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let cols = KERNEL * KERNEL * c;
    let mut patches = vec![0.0; n * h * w * cols];
    for s in 0..n {
        for r in 0..h {
            for col in 0..w {
                let row = &mut patches[((s * h + r) * w + col) * cols..][..cols];
                for ky in 0..KERNEL {
                    let yy = r as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let xx = col as isize + kx as isize - 1;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let src = ((s * h + yy as usize) * w + xx as usize) * c;
                        let dst = (ky * KERNEL + kx) * c;
                        row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    patches
}

fn col2im(dpatches: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let cols = KERNEL * KERNEL * c;
    let mut dx = vec![0.0; n * h * w * c];
    for s in 0..n {
        for r in 0..h {
            for col in 0..w {
                let row = &dpatches[((s * h + r) * w + col) * cols..][..cols];
                for ky in 0..KERNEL {
                    let yy = r as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let xx = col as isize + kx as isize - 1;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let dst = ((s * h + yy as usize) * w + xx as usize) * c;
                        let src = (ky * KERNEL + kx) * c;
                        for ch in 0..c {
                            dx[dst + ch] += row[src + ch];
                        }
                    }
                }
            }
        }
    }
    dx
}
