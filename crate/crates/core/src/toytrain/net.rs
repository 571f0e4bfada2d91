//! A small CNN with hand-written backpropagation and quantizers in the
//! forward pass.
//!
//! Every conv/fc layer fake-quantizes its input activations and its weights
//! according to the network's [`QuantSpec`] before the product. The backward
//! pass routes gradients through each quantizer with the clipped
//! straight-through estimator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{col2im, im2col, ConvGeometry, FeatureMap, Matrix};
use crate::netspec::{Layer, NetworkSpec, PoolKind, Shape};
use crate::quant::{self, QuantSpec, ACT_RANGE, FULL_PRECISION_BITS, WEIGHT_RANGE};

/// Weights are drawn from `U(-INIT_BOUND, INIT_BOUND)`, which spans the
/// whole quantizer range so ternary weights start with nonzero codes.
pub const INIT_BOUND: f64 = 1.0;

/// Each conv/fc output is multiplied by the fixed, untrained factor
/// `LAYER_GAIN / sqrt(fan_in)`. With [`INIT_BOUND`] weights this keeps the
/// forward signal at unit scale, and it leaves the integer product intact.
pub const LAYER_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Conv {
        param: usize,
        scale: f64,
        geom: ConvGeometry,
        input: Shape,
        output: Shape,
    },
    Fc {
        param: usize,
        scale: f64,
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Pool {
        kind: PoolKind,
        k: usize,
        stride: usize,
        input: Shape,
        output: Shape,
    },
}

/// Shape of one parameter tensor: `[kh, kw, C, F]` for conv, `[in, out]`
/// for fc.
pub type ParamDims = Vec<usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    topology: NetworkSpec,
    params: Vec<Vec<f64>>,
    dims: Vec<ParamDims>,
    quant: QuantSpec,
    width_factor: f64,
    ops: Vec<Op>,
}

fn plan(topology: &NetworkSpec) -> Result<(Vec<Op>, Vec<ParamDims>)> {
    let mut ops = Vec::new();
    let mut dims = Vec::new();
    for (layer, info) in topology.layers().iter().zip(topology.info()).skip(1) {
        match layer {
            Layer::Input { .. } => {
                return Err(Error::InvalidSpec("input layer after the first".into()))
            }
            Layer::Conv {
                kh, kw, stride, pad, ..
            } => {
                ops.push(Op::Conv {
                    param: dims.len(),
                    scale: layer_scale(kh * kw * info.input.channels),
                    geom: ConvGeometry {
                        kh: *kh,
                        kw: *kw,
                        stride: *stride,
                        pad: *pad,
                    },
                    input: info.input,
                    output: info.output,
                });
                dims.push(vec![*kh, *kw, info.input.channels, info.output.channels]);
            }
            Layer::Fc { .. } => {
                ops.push(Op::Fc {
                    param: dims.len(),
                    scale: layer_scale(info.input.elements()),
                    inputs: info.input.elements(),
                    outputs: info.output.channels,
                });
                dims.push(vec![info.input.elements(), info.output.channels]);
            }
            Layer::Relu => ops.push(Op::Relu),
            Layer::Pool { pool, k, stride } => ops.push(Op::Pool {
                kind: *pool,
                k: *k,
                stride: *stride,
                input: info.input,
                output: info.output,
            }),
        }
    }
    if !matches!(ops.last(), Some(Op::Fc { .. })) {
        return Err(Error::InvalidSpec(
            "training topology must end with an fc layer".into(),
        ));
    }
    Ok((ops, dims))
}

fn layer_scale(fan_in: usize) -> f64 {
    LAYER_GAIN / (fan_in as f64).sqrt()
}

/// Per-layer values retained for the backward pass of one sample.
#[derive(Debug, Clone)]
enum LayerCache {
    /// Pre-quantization input and the im2col matrix of its quantized form.
    Conv { x: Vec<f64>, cols: Matrix<f64> },
    Fc { x: Vec<f64>, xq: Vec<f64> },
    Relu { x: Vec<f64> },
    MaxPool { argmax: Vec<usize> },
    Pool,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    weights_q: Vec<Vec<f64>>,
    samples: Vec<Vec<LayerCache>>,
    batch: usize,
    classes: usize,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Gradients, one tensor per parameter tensor.
pub type Gradients = Vec<Vec<f64>>;

/// `out[m x n] += a[m x k] * b[k x n]`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

impl ToyNet {
    /// Builds a network with seeded uniform weights.
    pub fn new(topology: NetworkSpec, quant: QuantSpec, width_factor: f64, seed: u64) -> Result<Self> {
        let (ops, dims) = plan(&topology)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = dims
            .iter()
            .map(|d| {
                let n: usize = d.iter().product();
                (0..n).map(|_| rng.random_range(-INIT_BOUND..INIT_BOUND)).collect()
            })
            .collect();
        Ok(ToyNet {
            topology,
            params,
            dims,
            quant,
            width_factor,
            ops,
        })
    }

    /// Builds a network from explicit parameter tensors.
    pub fn from_params(
        topology: NetworkSpec,
        quant: QuantSpec,
        width_factor: f64,
        params: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let (ops, dims) = plan(&topology)?;
        if params.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "topology has {} parameter tensors, got {}",
                dims.len(),
                params.len()
            )));
        }
        for (i, (p, d)) in params.iter().zip(&dims).enumerate() {
            if p.len() != d.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {i} expects {:?}, got {} values",
                    d,
                    p.len()
                )));
            }
        }
        Ok(ToyNet {
            topology,
            params,
            dims,
            quant,
            width_factor,
            ops,
        })
    }

    pub fn topology(&self) -> &NetworkSpec {
        &self.topology
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn param_dims(&self) -> &[ParamDims] {
        &self.dims
    }

    pub fn quant(&self) -> QuantSpec {
        self.quant
    }

    pub fn width_factor(&self) -> f64 {
        self.width_factor
    }

    pub fn classes(&self) -> usize {
        self.topology.output_shape().channels
    }

    pub fn input_shape(&self) -> Shape {
        self.topology.input_shape()
    }

    fn quantize_act(&self, x: &[f64]) -> Vec<f64> {
        if self.quant.act_bits() == FULL_PRECISION_BITS {
            x.to_vec()
        } else {
            let bits = self.quant.act_bits();
            let scale = 1.0 / quant::act_qmax(bits) as f64;
            x.iter().map(|&v| quant::act_code(v, bits) as f64 * scale).collect()
        }
    }

    fn act_ste(&self, grad: Vec<f64>, x: &[f64]) -> Vec<f64> {
        if self.quant.act_bits() == FULL_PRECISION_BITS {
            grad
        } else {
            quant::ste_grad(&grad, x, ACT_RANGE.0, ACT_RANGE.1).expect("matching lengths")
        }
    }

    /// Fake-quantized copies of every weight tensor.
    pub fn quantized_weights(&self) -> Result<Vec<Vec<f64>>> {
        self.params
            .iter()
            .map(|w| quant::fake_quantize_weights(w, self.quant.weight_bits()))
            .collect()
    }

    fn forward_one(&self, wq: &[Vec<f64>], img: &FeatureMap<f64>) -> Result<(Vec<f64>, Vec<LayerCache>)> {
        let mut x = img.data().to_vec();
        let mut cache = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            match op {
                Op::Conv {
                    param,
                    scale,
                    geom,
                    input,
                    output,
                } => {
                    let xq = self.quantize_act(&x);
                    let map = FeatureMap::from_vec(input.height, input.width, input.channels, xq)?;
                    let cols = im2col(&map, *geom)?;
                    let mut out = vec![0.0; output.elements()];
                    matmul_acc(
                        cols.data(),
                        &wq[*param],
                        &mut out,
                        cols.rows(),
                        cols.cols(),
                        output.channels,
                    );
                    out.iter_mut().for_each(|v| *v *= scale);
                    cache.push(LayerCache::Conv { x, cols });
                    x = out;
                }
                Op::Fc {
                    param,
                    scale,
                    inputs,
                    outputs,
                } => {
                    let xq = self.quantize_act(&x);
                    let mut out = vec![0.0; *outputs];
                    matmul_acc(&xq, &wq[*param], &mut out, 1, *inputs, *outputs);
                    out.iter_mut().for_each(|v| *v *= scale);
                    cache.push(LayerCache::Fc { x, xq });
                    x = out;
                }
                Op::Relu => {
                    let y = x.iter().map(|&v| v.max(0.0)).collect();
                    cache.push(LayerCache::Relu { x });
                    x = y;
                }
                Op::Pool {
                    kind,
                    k,
                    stride,
                    input,
                    output,
                } => {
                    let (y, argmax) = pool_forward(&x, *kind, *k, *stride, *input, *output);
                    cache.push(match argmax {
                        Some(argmax) => LayerCache::MaxPool { argmax },
                        None => LayerCache::Pool,
                    });
                    x = y;
                }
            }
        }
        Ok((x, cache))
    }

    fn check_batch(&self, batch: &[FeatureMap<f64>]) -> Result<()> {
        let s = self.input_shape();
        for (i, img) in batch.iter().enumerate() {
            if (img.height(), img.width(), img.channels()) != (s.height, s.width, s.channels) {
                return Err(Error::ShapeMismatch(format!(
                    "sample {i} is {}x{}x{}, network expects {s}",
                    img.height(),
                    img.width(),
                    img.channels()
                )));
            }
        }
        Ok(())
    }

    /// Logits (one row per sample) and the cache for [`ToyNet::backward`].
    pub fn forward(&self, batch: &[FeatureMap<f64>]) -> Result<(Matrix<f64>, ForwardCache)> {
        self.check_batch(batch)?;
        let wq = self.quantized_weights()?;
        let results: Vec<(Vec<f64>, Vec<LayerCache>)> = batch
            .par_iter()
            .map(|img| self.forward_one(&wq, img))
            .collect::<Result<_>>()?;
        let classes = self.classes();
        let mut logits = Vec::with_capacity(batch.len() * classes);
        let mut samples = Vec::with_capacity(batch.len());
        for (l, c) in results {
            logits.extend(l);
            samples.push(c);
        }
        Ok((
            Matrix::from_vec(batch.len(), classes, logits)?,
            ForwardCache {
                weights_q: wq,
                samples,
                batch: batch.len(),
                classes,
            },
        ))
    }

    /// Logits only.
    pub fn predict(&self, batch: &[FeatureMap<f64>]) -> Result<Matrix<f64>> {
        self.check_batch(batch)?;
        let wq = self.quantized_weights()?;
        let rows: Vec<Vec<f64>> = batch
            .par_iter()
            .map(|img| self.forward_one(&wq, img).map(|(l, _)| l))
            .collect::<Result<_>>()?;
        Matrix::from_vec(batch.len(), self.classes(), rows.concat())
    }

    fn backward_one(&self, wq: &[Vec<f64>], cache: &[LayerCache], dlogits: &[f64]) -> Result<Gradients> {
        let mut grads: Gradients = self.dims.iter().map(|d| vec![0.0; d.iter().product()]).collect();
        let mut dy = dlogits.to_vec();
        let first_weighted = self
            .ops
            .iter()
            .position(|o| matches!(o, Op::Conv { .. } | Op::Fc { .. }))
            .unwrap_or(0);
        for (idx, (op, c)) in self.ops.iter().zip(cache).enumerate().rev() {
            let need_dx = idx > first_weighted;
            dy = match (op, c) {
                (
                    Op::Conv {
                        param,
                        scale,
                        geom,
                        input,
                        output,
                    },
                    LayerCache::Conv { x, cols },
                ) => {
                    dy.iter_mut().for_each(|v| *v *= scale);
                    let (p, r, f) = (cols.rows(), cols.cols(), output.channels);
                    let g = &mut grads[*param];
                    for pi in 0..p {
                        let crow = cols.row(pi);
                        let drow = &dy[pi * f..(pi + 1) * f];
                        for (ri, &cv) in crow.iter().enumerate() {
                            if cv == 0.0 {
                                continue;
                            }
                            for (gv, &dv) in g[ri * f..(ri + 1) * f].iter_mut().zip(drow) {
                                *gv += cv * dv;
                            }
                        }
                    }
                    if !need_dx {
                        break;
                    }
                    let w = &wq[*param];
                    let mut dcols = vec![0.0; p * r];
                    for pi in 0..p {
                        let drow = &dy[pi * f..(pi + 1) * f];
                        for ri in 0..r {
                            dcols[pi * r + ri] = w[ri * f..(ri + 1) * f]
                                .iter()
                                .zip(drow)
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    let dxq = col2im(
                        &Matrix::from_vec(p, r, dcols)?,
                        input.height,
                        input.width,
                        input.channels,
                        *geom,
                    )?
                    .into_vec();
                    self.act_ste(dxq, x)
                }
                (
                    Op::Fc {
                        param,
                        scale,
                        inputs,
                        outputs,
                    },
                    LayerCache::Fc { x, xq },
                ) => {
                    dy.iter_mut().for_each(|v| *v *= scale);
                    let g = &mut grads[*param];
                    for (i, &xv) in xq.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (gv, &dv) in g[i * outputs..(i + 1) * outputs].iter_mut().zip(&dy) {
                            *gv += xv * dv;
                        }
                    }
                    if !need_dx {
                        break;
                    }
                    let w = &wq[*param];
                    let dxq: Vec<f64> = (0..*inputs)
                        .map(|i| w[i * outputs..(i + 1) * outputs].iter().zip(&dy).map(|(a, b)| a * b).sum())
                        .collect();
                    self.act_ste(dxq, x)
                }
                (Op::Relu, LayerCache::Relu { x }) => dy
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect(),
                (
                    Op::Pool {
                        kind,
                        k,
                        stride,
                        input,
                        output,
                    },
                    c,
                ) => {
                    let argmax = match c {
                        LayerCache::MaxPool { argmax } => Some(argmax.as_slice()),
                        _ => None,
                    };
                    pool_backward(&dy, *kind, *k, *stride, *input, *output, argmax)
                }
                _ => return Err(Error::ShapeMismatch("cache does not match network".into())),
            };
        }
        Ok(grads)
    }

    /// Parameter gradients for `dL/dlogits`.
    ///
    /// Samples are processed in parallel and summed in batch order, so the
    /// result does not depend on the thread count. Weight gradients pass the
    /// straight-through mask `[-1, 1]` when weights are quantized.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix<f64>) -> Result<Gradients> {
        if dlogits.rows() != cache.batch
            || dlogits.cols() != cache.classes
            || cache.classes != self.classes()
            || cache.weights_q.len() != self.params.len()
            || cache.samples.iter().any(|s| s.len() != self.ops.len())
        {
            return Err(Error::ShapeMismatch(
                "stale cache: does not match this network or gradient".into(),
            ));
        }
        for (w, p) in cache.weights_q.iter().zip(&self.params) {
            if w.len() != p.len() {
                return Err(Error::ShapeMismatch("stale cache: parameter sizes differ".into()));
            }
        }
        let per_sample: Vec<Gradients> = cache
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, c)| self.backward_one(&cache.weights_q, c, dlogits.row(i)))
            .collect::<Result<_>>()?;
        let mut total: Gradients = self.dims.iter().map(|d| vec![0.0; d.iter().product()]).collect();
        for g in &per_sample {
            for (t, s) in total.iter_mut().zip(g) {
                for (a, b) in t.iter_mut().zip(s) {
                    *a += b;
                }
            }
        }
        if self.quant.weight_bits() != FULL_PRECISION_BITS {
            for (g, w) in total.iter_mut().zip(&self.params) {
                *g = quant::ste_grad(g, w, WEIGHT_RANGE.0, WEIGHT_RANGE.1)?;
            }
        }
        Ok(total)
    }
}

fn pool_forward(
    x: &[f64],
    kind: PoolKind,
    k: usize,
    stride: usize,
    input: Shape,
    output: Shape,
) -> (Vec<f64>, Option<Vec<usize>>) {
    let c = input.channels;
    match kind {
        PoolKind::Global => {
            let n = (input.height * input.width) as f64;
            let mut y = vec![0.0; c];
            for px in x.chunks(c) {
                for (a, b) in y.iter_mut().zip(px) {
                    *a += b;
                }
            }
            (y.into_iter().map(|v| v / n).collect(), None)
        }
        PoolKind::Max | PoolKind::Avg => {
            let mut y = vec![0.0; output.elements()];
            let mut argmax = vec![0; output.elements()];
            for oy in 0..output.height {
                for ox in 0..output.width {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        let mut sum = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                let i = ((oy * stride + dy) * input.width + ox * stride + dx) * c + ch;
                                sum += x[i];
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = (oy * output.width + ox) * c + ch;
                        if kind == PoolKind::Max {
                            y[o] = best;
                            argmax[o] = best_i;
                        } else {
                            y[o] = sum / (k * k) as f64;
                        }
                    }
                }
            }
            let argmax = (kind == PoolKind::Max).then_some(argmax);
            (y, argmax)
        }
    }
}

fn pool_backward(
    dy: &[f64],
    kind: PoolKind,
    k: usize,
    stride: usize,
    input: Shape,
    output: Shape,
    argmax: Option<&[usize]>,
) -> Vec<f64> {
    let c = input.channels;
    let mut dx = vec![0.0; input.elements()];
    match (kind, argmax) {
        (PoolKind::Global, _) => {
            let n = (input.height * input.width) as f64;
            for px in dx.chunks_mut(c) {
                for (a, b) in px.iter_mut().zip(dy) {
                    *a = b / n;
                }
            }
        }
        (PoolKind::Max, Some(argmax)) => {
            for (&i, &d) in argmax.iter().zip(dy) {
                dx[i] += d;
            }
        }
        _ => {
            let share = 1.0 / (k * k) as f64;
            for oy in 0..output.height {
                for ox in 0..output.width {
                    for ch in 0..c {
                        let d = dy[(oy * output.width + ox) * c + ch] * share;
                        for ky in 0..k {
                            for kx in 0..k {
                                dx[((oy * stride + ky) * input.width + ox * stride + kx) * c + ch] += d;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
