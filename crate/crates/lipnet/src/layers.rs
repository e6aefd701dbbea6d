//! Layer definitions, forward evaluation in train/eval modes and manual
//! backpropagation.
//!
//! All layer inputs carry a leading batch axis: dense layers see `(N, n_in)`,
//! spatial layers see `(N, C, H, W)`. Forward passes return a cache holding
//! whatever backward needs (inputs, masks, pooling indices, batch
//! statistics); a cache is only valid for the pass that produced it.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_transpose, matmul, maxpool2d, ConvGeometry, Tensor};

/// Whether a forward pass uses training behaviour (batch statistics, random
/// dropout masks) or deterministic evaluation behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Loss functions a network can be trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean squared error over all output elements.
    Mse,
    /// Softmax fused with log-loss; targets are class indices.
    SoftmaxCrossEntropy,
}

/// One layer of a feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Affine map `y = W x + b` with `w` of shape `(n_out, n_in)`.
    Dense { w: Tensor, b: Tensor },
    /// 2-D convolution with filters `(C_out, C_in, k_h, k_w)` and one bias
    /// per output channel.
    Conv2d {
        f: Tensor,
        b: Tensor,
        geom: ConvGeometry,
    },
    Relu,
    Maxpool {
        window: (usize, usize),
        stride: (usize, usize),
    },
    /// Channel-wise normalisation. In train mode normalises by batch
    /// statistics and updates the running statistics in place; in eval mode
    /// uses the running statistics.
    Batchnorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        epsilon: f64,
        momentum: f64,
    },
    /// Train mode multiplies by a Bernoulli(retain_prob) 0/1 mask with no
    /// rescaling; eval mode multiplies by the scalar retain_prob.
    Dropout { retain_prob: f64 },
    /// Skip connection: `y = x + inner(x)`. The inner chain must preserve
    /// the input shape.
    Residual { inner: Vec<Layer> },
    /// Normalises along the last axis.
    Softmax,
}

/// Saved state from one forward pass through one layer.
#[derive(Debug, Clone)]
pub enum ForwardCache {
    Dense { input: Tensor },
    Conv { input: Tensor },
    Relu { input: Tensor },
    Maxpool {
        input_shape: Vec<usize>,
        out_shape: Vec<usize>,
        /// Per sample, the flat index into that sample's `(C,H,W)` block
        /// chosen for each output cell.
        indices: Vec<Vec<usize>>,
    },
    Batchnorm {
        input: Tensor,
        mode: Mode,
        /// Statistics the forward pass normalised with: batch statistics in
        /// train mode, running statistics in eval mode.
        mean: Tensor,
        var: Tensor,
    },
    Dropout { mode: Mode, mask: Option<Tensor> },
    Residual { inner: Vec<ForwardCache> },
    Softmax { output: Tensor },
}

/// Parameter gradients mirroring a layer's parameter tensors. Layers
/// without parameters produce `None`.
#[derive(Debug, Clone)]
pub enum ParamGrads {
    None,
    Dense { dw: Tensor, db: Tensor },
    Conv { df: Tensor, db: Tensor },
    Batchnorm { dgamma: Tensor, dbeta: Tensor },
    Residual { inner: Vec<ParamGrads> },
}

/// An ordered chain of layers with the loss it is trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub loss: LossKind,
}

impl Layer {
    /// Output feature shape (without the batch axis) for a given input
    /// feature shape, validating parameter consistency along the way.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense { w, b } => {
                let (n_out, n_in) = w.matrix_dims()?;
                if b.shape() != [n_out] {
                    return Err(Error::dims("dense bias", &[n_out], b.shape()));
                }
                if input != [n_in] {
                    return Err(Error::dims("dense input", &[n_in], input));
                }
                Ok(vec![n_out])
            }
            Layer::Conv2d { f, b, geom } => {
                if f.rank() != 4 {
                    return Err(Error::InvalidShape(format!(
                        "conv filters must be rank 4, got {:?}",
                        f.shape()
                    )));
                }
                let (c_out, c_in) = (f.shape()[0], f.shape()[1]);
                if b.shape() != [c_out] {
                    return Err(Error::dims("conv bias", &[c_out], b.shape()));
                }
                match input {
                    [c, h, w] if *c == c_in => {
                        let (oh, ow) = geom.output_size((*h, *w))?;
                        Ok(vec![c_out, oh, ow])
                    }
                    other => Err(Error::dims("conv input", &[c_in, 0, 0], other)),
                }
            }
            Layer::Relu | Layer::Dropout { .. } | Layer::Softmax => Ok(input.to_vec()),
            Layer::Maxpool { window, stride } => match input {
                [c, h, w] => {
                    if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
                        return Err(Error::Geometry(
                            "pool window and stride must be >= 1".into(),
                        ));
                    }
                    if window.0 > *h || window.1 > *w {
                        return Err(Error::Geometry(format!(
                            "pool window {window:?} larger than input ({h},{w})"
                        )));
                    }
                    Ok(vec![
                        *c,
                        (h - window.0) / stride.0 + 1,
                        (w - window.1) / stride.1 + 1,
                    ])
                }
                other => Err(Error::InvalidShape(format!(
                    "pool input must be (C,H,W), got {other:?}"
                ))),
            },
            Layer::Batchnorm { gamma, .. } => {
                let c = gamma.len();
                if input.first() != Some(&c) {
                    return Err(Error::dims("batchnorm channels", &[c], input));
                }
                Ok(input.to_vec())
            }
            Layer::Residual { inner } => {
                let mut shape = input.to_vec();
                for layer in inner {
                    shape = layer.output_shape(&shape)?;
                }
                if shape != input {
                    return Err(Error::InvalidShape(format!(
                        "residual inner chain maps {input:?} to {shape:?}; shapes must match"
                    )));
                }
                Ok(shape)
            }
        }
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>, loss: LossKind) -> Self {
        Network { layers, loss }
    }

    /// Output feature shape for a given input feature shape; errors if any
    /// adjacent pair of layers is incompatible.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape)
    }
}

fn batch_split(shape: &[usize]) -> Result<(usize, Vec<usize>)> {
    match shape.split_first() {
        Some((&n, rest)) if !rest.is_empty() => Ok((n, rest.to_vec())),
        _ => Err(Error::InvalidShape(format!(
            "batched input needs a batch axis plus features, got {shape:?}"
        ))),
    }
}

/// Copy sample `n` out of a batched tensor.
fn sample(t: &Tensor, n: usize, feat: &[usize]) -> Tensor {
    let size: usize = feat.iter().product();
    let data = t.data()[n * size..(n + 1) * size].to_vec();
    Tensor::new(feat.to_vec(), data).expect("sample slice matches feature shape")
}

/// Run one layer forward. Train-mode batchnorm updates the layer's running
/// statistics in place, which is why the layer is taken mutably; every other
/// case leaves the layer untouched.
pub fn layer_forward(
    layer: &mut Layer,
    input: &Tensor,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(Tensor, ForwardCache)> {
    match layer {
        Layer::Dense { w, b } => {
            let (n, feat) = batch_split(input.shape())?;
            let (n_out, n_in) = w.matrix_dims()?;
            if feat != [n_in] {
                return Err(Error::dims("dense input", &[n_in], input.shape()));
            }
            let mut out = matmul(input, &w.transpose2d()?)?;
            for row in 0..n {
                for (o, bi) in out.data_mut()[row * n_out..(row + 1) * n_out]
                    .iter_mut()
                    .zip(b.data())
                {
                    *o += bi;
                }
            }
            Ok((out, ForwardCache::Dense {
                input: input.clone(),
            }))
        }
        Layer::Conv2d { f, b, geom } => {
            let (n, feat) = batch_split(input.shape())?;
            if feat.len() != 3 {
                return Err(Error::InvalidShape(format!(
                    "conv input must be (N,C,H,W), got {:?}",
                    input.shape()
                )));
            }
            let mut out_data = Vec::new();
            let mut out_feat = Vec::new();
            for s in 0..n {
                let x = sample(input, s, &feat);
                let y = conv2d(&x, f, Some(b), geom)?;
                out_feat = y.shape().to_vec();
                out_data.extend_from_slice(y.data());
            }
            let mut shape = vec![n];
            shape.extend(&out_feat);
            Ok((Tensor::new(shape, out_data)?, ForwardCache::Conv {
                input: input.clone(),
            }))
        }
        Layer::Relu => {
            let out = input.map(|x| x.max(0.0));
            Ok((out, ForwardCache::Relu {
                input: input.clone(),
            }))
        }
        Layer::Maxpool { window, stride } => {
            let (n, feat) = batch_split(input.shape())?;
            let mut out_data = Vec::new();
            let mut out_feat = Vec::new();
            let mut indices = Vec::with_capacity(n);
            for s in 0..n {
                let x = sample(input, s, &feat);
                let (y, idx) = maxpool2d(&x, *window, *stride)?;
                out_feat = y.shape().to_vec();
                out_data.extend_from_slice(y.data());
                indices.push(idx);
            }
            let mut shape = vec![n];
            shape.extend(&out_feat);
            let mut out_shape_full = vec![n];
            out_shape_full.extend(&out_feat);
            Ok((
                Tensor::new(shape, out_data)?,
                ForwardCache::Maxpool {
                    input_shape: input.shape().to_vec(),
                    out_shape: out_shape_full,
                    indices,
                },
            ))
        }
        Layer::Batchnorm {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon,
            momentum,
        } => {
            if *epsilon <= 0.0 {
                return Err(Error::Config(format!(
                    "batchnorm epsilon must be > 0, got {epsilon}"
                )));
            }
            let (n, feat) = batch_split(input.shape())?;
            let c = gamma.len();
            if feat.first() != Some(&c) {
                return Err(Error::dims("batchnorm channels", &[c], input.shape()));
            }
            let spatial: usize = feat[1..].iter().product();
            let (mean, var) = match mode {
                Mode::Train => {
                    if n < 2 {
                        return Err(Error::DegenerateBatchStats(format!(
                            "batchnorm needs batch size >= 2 in train mode, got {n}"
                        )));
                    }
                    let m = (n * spatial) as f64;
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * spatial;
                            for k in 0..spatial {
                                mean[ch] += input.data()[base + k];
                            }
                        }
                    }
                    mean.iter_mut().for_each(|v| *v /= m);
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * spatial;
                            for k in 0..spatial {
                                let d = input.data()[base + k] - mean[ch];
                                var[ch] += d * d;
                            }
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= m);
                    // Exponential moving average toward the batch statistics.
                    for ch in 0..c {
                        let rm = running_mean.data()[ch];
                        let rv = running_var.data()[ch];
                        running_mean.data_mut()[ch] = (1.0 - *momentum) * rm + *momentum * mean[ch];
                        running_var.data_mut()[ch] = (1.0 - *momentum) * rv + *momentum * var[ch];
                    }
                    (Tensor::from_vec(mean)?, Tensor::from_vec(var)?)
                }
                Mode::Eval => {
                    if running_var.data().iter().any(|&v| v < 0.0) {
                        return Err(Error::Config(
                            "batchnorm running variance must be >= 0".into(),
                        ));
                    }
                    (running_mean.clone(), running_var.clone())
                }
            };
            let mut out = input.clone();
            for s in 0..n {
                for ch in 0..c {
                    let inv_std = 1.0 / (var.data()[ch] + *epsilon).sqrt();
                    let g = gamma.data()[ch];
                    let be = beta.data()[ch];
                    let mu = mean.data()[ch];
                    let base = (s * c + ch) * spatial;
                    for k in 0..spatial {
                        let x = input.data()[base + k];
                        out.data_mut()[base + k] = g * (x - mu) * inv_std + be;
                    }
                }
            }
            Ok((
                out,
                ForwardCache::Batchnorm {
                    input: input.clone(),
                    mode,
                    mean,
                    var,
                },
            ))
        }
        Layer::Dropout { retain_prob } => {
            let r = *retain_prob;
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!(
                    "dropout retain probability must be in (0,1], got {r}"
                )));
            }
            match mode {
                Mode::Train => {
                    let mask_data: Vec<f64> = (0..input.len())
                        .map(|_| if rng.random::<f64>() < r { 1.0 } else { 0.0 })
                        .collect();
                    let mask = Tensor::new(input.shape().to_vec(), mask_data)?;
                    let out = Tensor::new(
                        input.shape().to_vec(),
                        input
                            .data()
                            .iter()
                            .zip(mask.data())
                            .map(|(x, m)| x * m)
                            .collect(),
                    )?;
                    Ok((out, ForwardCache::Dropout {
                        mode,
                        mask: Some(mask),
                    }))
                }
                Mode::Eval => Ok((input.scale(r), ForwardCache::Dropout { mode, mask: None })),
            }
        }
        Layer::Residual { inner } => {
            let mut caches = Vec::with_capacity(inner.len());
            let mut cur = input.clone();
            for l in inner.iter_mut() {
                let (next, cache) = layer_forward(l, &cur, mode, rng)?;
                caches.push(cache);
                cur = next;
            }
            if cur.shape() != input.shape() {
                return Err(Error::dims("residual skip", input.shape(), cur.shape()));
            }
            Ok((input.add(&cur)?, ForwardCache::Residual { inner: caches }))
        }
        Layer::Softmax => {
            let out = softmax_last_axis(input);
            Ok((out.clone(), ForwardCache::Softmax { output: out }))
        }
    }
}

fn softmax_last_axis(input: &Tensor) -> Tensor {
    let k = *input.shape().last().expect("tensor shape is non-empty");
    let rows = input.len() / k;
    let mut out = input.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * k..(r + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Backpropagate through one layer using the cache its forward pass
/// produced. Returns the gradient with respect to the input and the
/// gradients of the layer's parameters.
pub fn layer_backward(
    layer: &Layer,
    cache: &ForwardCache,
    grad_out: &Tensor,
) -> Result<(Tensor, ParamGrads)> {
    match (layer, cache) {
        (Layer::Dense { w, .. }, ForwardCache::Dense { input }) => {
            let (n, _) = batch_split(input.shape())?;
            let (n_out, _) = w.matrix_dims()?;
            if grad_out.shape() != [n, n_out] {
                return Err(Error::dims("dense grad", &[n, n_out], grad_out.shape()));
            }
            let grad_in = matmul(grad_out, w)?;
            let dw = matmul(&grad_out.transpose2d()?, input)?;
            let mut db = vec![0.0; n_out];
            for row in 0..n {
                for (d, g) in db.iter_mut().zip(&grad_out.data()[row * n_out..]) {
                    *d += g;
                }
            }
            Ok((grad_in, ParamGrads::Dense {
                dw,
                db: Tensor::from_vec(db)?,
            }))
        }
        (Layer::Conv2d { f, geom, .. }, ForwardCache::Conv { input }) => {
            let (n, feat) = batch_split(input.shape())?;
            let (gn, gfeat) = batch_split(grad_out.shape())?;
            if gn != n {
                return Err(Error::dims("conv grad batch", input.shape(), grad_out.shape()));
            }
            let (c_out, c_in) = (f.shape()[0], f.shape()[1]);
            let (kh, kw) = geom.kernel;
            let (sh, sw) = geom.stride;
            let (ph, pw) = geom.padding;
            let (h, w) = (feat[1], feat[2]);
            let (oh, ow) = (gfeat[1], gfeat[2]);

            let mut grad_in_data = Vec::with_capacity(input.len());
            let mut df = Tensor::zeros(f.shape());
            let mut db = vec![0.0; c_out];
            for s in 0..n {
                let g = sample(grad_out, s, &gfeat);
                let gi = conv2d_transpose(&g, f, geom, (h, w))?;
                grad_in_data.extend_from_slice(gi.data());
                let x = sample(input, s, &feat);
                let gdat = g.data();
                let xdat = x.data();
                for i in 0..c_out {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = gdat[(i * oh + y) * ow + xx];
                            if gv == 0.0 {
                                continue;
                            }
                            db[i] += gv;
                            for j in 0..c_in {
                                let fbase = ((i * c_in + j) * kh) * kw;
                                for u in 0..kh {
                                    let iy = (y * sh + u) as isize - ph as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let xrow = (j * h + iy as usize) * w;
                                    for v in 0..kw {
                                        let ix = (xx * sw + v) as isize - pw as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        df.data_mut()[fbase + u * kw + v] +=
                                            gv * xdat[xrow + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Ok((
                Tensor::new(input.shape().to_vec(), grad_in_data)?,
                ParamGrads::Conv {
                    df,
                    db: Tensor::from_vec(db)?,
                },
            ))
        }
        (Layer::Relu, ForwardCache::Relu { input }) => {
            if grad_out.shape() != input.shape() {
                return Err(Error::dims("relu grad", input.shape(), grad_out.shape()));
            }
            let data = input
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect();
            Ok((
                Tensor::new(input.shape().to_vec(), data)?,
                ParamGrads::None,
            ))
        }
        (
            Layer::Maxpool { .. },
            ForwardCache::Maxpool {
                input_shape,
                out_shape,
                indices,
            },
        ) => {
            if grad_out.shape() != &out_shape[..] {
                return Err(Error::dims("pool grad", out_shape, grad_out.shape()));
            }
            let feat_size: usize = input_shape[1..].iter().product();
            let out_size: usize = out_shape[1..].iter().product();
            let mut grad_in = vec![0.0; input_shape.iter().product()];
            for (s, idx) in indices.iter().enumerate() {
                for (o, &src) in idx.iter().enumerate() {
                    grad_in[s * feat_size + src] += grad_out.data()[s * out_size + o];
                }
            }
            Ok((
                Tensor::new(input_shape.clone(), grad_in)?,
                ParamGrads::None,
            ))
        }
        (
            Layer::Batchnorm { gamma, epsilon, .. },
            ForwardCache::Batchnorm {
                input,
                mode,
                mean,
                var,
            },
        ) => {
            if grad_out.shape() != input.shape() {
                return Err(Error::dims("batchnorm grad", input.shape(), grad_out.shape()));
            }
            let (n, feat) = batch_split(input.shape())?;
            let c = gamma.len();
            let spatial: usize = feat[1..].iter().product();
            let m = (n * spatial) as f64;

            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut grad_in = vec![0.0; input.len()];
            for ch in 0..c {
                let mu = mean.data()[ch];
                let inv_std = 1.0 / (var.data()[ch] + *epsilon).sqrt();
                let g_ch = gamma.data()[ch];

                // First pass: parameter grads plus the sums the train-mode
                // Jacobian needs.
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * spatial;
                    for k in 0..spatial {
                        let xhat = (input.data()[base + k] - mu) * inv_std;
                        let go = grad_out.data()[base + k];
                        dgamma[ch] += go * xhat;
                        dbeta[ch] += go;
                        let dxhat = go * g_ch;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
                for s in 0..n {
                    let base = (s * c + ch) * spatial;
                    for k in 0..spatial {
                        let go = grad_out.data()[base + k];
                        let dxhat = go * g_ch;
                        grad_in[base + k] = match mode {
                            // Batch statistics depend on the input, so the
                            // Jacobian carries the mean/variance terms.
                            Mode::Train => {
                                let xhat = (input.data()[base + k] - mu) * inv_std;
                                inv_std * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m)
                            }
                            // Running statistics are constants.
                            Mode::Eval => dxhat * inv_std,
                        };
                    }
                }
            }
            Ok((
                Tensor::new(input.shape().to_vec(), grad_in)?,
                ParamGrads::Batchnorm {
                    dgamma: Tensor::from_vec(dgamma)?,
                    dbeta: Tensor::from_vec(dbeta)?,
                },
            ))
        }
        (Layer::Dropout { retain_prob }, ForwardCache::Dropout { mode, mask }) => match mode {
            Mode::Train => {
                let mask = mask
                    .as_ref()
                    .ok_or(Error::CacheMismatch("train-mode dropout cache lost its mask"))?;
                if grad_out.shape() != mask.shape() {
                    return Err(Error::dims("dropout grad", mask.shape(), grad_out.shape()));
                }
                let data = grad_out
                    .data()
                    .iter()
                    .zip(mask.data())
                    .map(|(g, m)| g * m)
                    .collect();
                Ok((
                    Tensor::new(grad_out.shape().to_vec(), data)?,
                    ParamGrads::None,
                ))
            }
            Mode::Eval => Ok((grad_out.scale(*retain_prob), ParamGrads::None)),
        },
        (Layer::Residual { inner }, ForwardCache::Residual { inner: caches }) => {
            if inner.len() != caches.len() {
                return Err(Error::CacheMismatch("residual cache length mismatch"));
            }
            let mut g = grad_out.clone();
            let mut grads_rev = Vec::with_capacity(inner.len());
            for (l, cch) in inner.iter().zip(caches).rev() {
                let (gi, pg) = layer_backward(l, cch, &g)?;
                grads_rev.push(pg);
                g = gi;
            }
            grads_rev.reverse();
            Ok((grad_out.add(&g)?, ParamGrads::Residual { inner: grads_rev }))
        }
        (Layer::Softmax, ForwardCache::Softmax { output }) => {
            if grad_out.shape() != output.shape() {
                return Err(Error::dims("softmax grad", output.shape(), grad_out.shape()));
            }
            let k = *output.shape().last().expect("non-empty shape");
            let rows = output.len() / k;
            let mut data = vec![0.0; output.len()];
            for r in 0..rows {
                let s = &output.data()[r * k..(r + 1) * k];
                let g = &grad_out.data()[r * k..(r + 1) * k];
                let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
                for j in 0..k {
                    data[r * k + j] = s[j] * (g[j] - dot);
                }
            }
            Ok((
                Tensor::new(output.shape().to_vec(), data)?,
                ParamGrads::None,
            ))
        }
        _ => Err(Error::CacheMismatch("cache does not match layer kind")),
    }
}

/// Forward pass through the whole chain. Returns the network output and the
/// per-layer caches needed by [`network_backward`].
pub fn network_forward(
    net: &mut Network,
    batch: &Tensor,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(Tensor, Vec<ForwardCache>)> {
    let mut caches = Vec::with_capacity(net.layers.len());
    let mut cur = batch.clone();
    for layer in net.layers.iter_mut() {
        let (next, cache) = layer_forward(layer, &cur, mode, rng)?;
        caches.push(cache);
        cur = next;
    }
    Ok((cur, caches))
}

/// Backward pass through the whole chain. `grad_of_loss` is the gradient of
/// the loss with respect to the network output; returns the gradient with
/// respect to the input batch and per-layer parameter gradients in layer
/// order.
pub fn network_backward(
    net: &Network,
    caches: &[ForwardCache],
    grad_of_loss: &Tensor,
) -> Result<(Tensor, Vec<ParamGrads>)> {
    if caches.len() != net.layers.len() {
        return Err(Error::CacheMismatch("cache count does not match layer count"));
    }
    let mut g = grad_of_loss.clone();
    let mut grads_rev = Vec::with_capacity(net.layers.len());
    for (layer, cache) in net.layers.iter().zip(caches).rev() {
        let (gi, pg) = layer_backward(layer, cache, &g)?;
        grads_rev.push(pg);
        g = gi;
    }
    grads_rev.reverse();
    Ok((g, grads_rev))
}

/// Uniform initialisation over `[-sqrt(6/(fan_in+fan_out)), +sqrt(...)]`.
/// For shapes with more than two axes the trailing axes count as receptive
/// field, so a conv filter `(C_out, C_in, k_h, k_w)` has fans
/// `C_in*k_h*k_w` and `C_out*k_h*k_w`.
pub fn glorot_init(shape: &[usize], rng: &mut dyn RngCore) -> Result<Tensor> {
    if shape.len() < 2 {
        return Err(Error::Init(format!(
            "glorot needs at least 2 axes to compute fans, got {shape:?}"
        )));
    }
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Evaluate a loss and its gradient with respect to the predictions.
///
/// `Mse` averages squared error over every element. `SoftmaxCrossEntropy`
/// takes raw logits of shape `(N, k)` and integer class indices of shape
/// `(N)`; the softmax is fused into the loss.
pub fn compute_loss(kind: LossKind, predictions: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    match kind {
        LossKind::Mse => {
            if predictions.shape() != targets.shape() {
                return Err(Error::dims("mse", predictions.shape(), targets.shape()));
            }
            let m = predictions.len() as f64;
            let mut loss = 0.0;
            let mut grad = predictions.clone();
            for (g, (&p, &t)) in grad
                .data_mut()
                .iter_mut()
                .zip(predictions.data().iter().zip(targets.data()))
            {
                let d = p - t;
                loss += d * d;
                *g = 2.0 * d / m;
            }
            Ok((loss / m, grad))
        }
        LossKind::SoftmaxCrossEntropy => {
            let (n, k) = predictions.matrix_dims()?;
            if targets.rank() != 1 || targets.len() != n {
                return Err(Error::dims("cross-entropy targets", &[n], targets.shape()));
            }
            let probs = softmax_last_axis(predictions);
            let mut loss = 0.0;
            let mut grad = probs.clone();
            for r in 0..n {
                let t = targets.data()[r];
                if t.fract() != 0.0 || t < 0.0 || t as usize >= k {
                    return Err(Error::InvalidShape(format!(
                        "class index {t} out of range for {k} classes"
                    )));
                }
                let cls = t as usize;
                loss -= probs.data()[r * k + cls].max(f64::MIN_POSITIVE).ln();
                grad.data_mut()[r * k + cls] -= 1.0;
            }
            let inv_n = 1.0 / n as f64;
            grad.data_mut().iter_mut().for_each(|g| *g *= inv_n);
            Ok((loss * inv_n, grad))
        }
    }
}
