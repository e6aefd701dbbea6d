//! Seeded random network generation for property tests.
//!
//! Generated networks are always shape-consistent and use only
//! non-overlapping pooling (stride equal to window), so every layer's
//! advertised Lipschitz bound is sound in all three norms.

use lipnet::layers::{Layer, LossKind, Network};
use lipnet::tensor::{ConvGeometry, Tensor};
use rand::{Rng, RngCore};

/// Uniform matrix in `[-scale, scale]`.
pub fn random_matrix(rng: &mut dyn RngCore, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("valid matrix shape")
}

/// Uniform tensor in `[-scale, scale]`.
pub fn random_tensor(rng: &mut dyn RngCore, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid tensor shape")
}

fn random_dense(rng: &mut dyn RngCore, n_in: usize, n_out: usize) -> Layer {
    let scale = rng.random_range(0.3..1.5) / (n_in as f64).sqrt();
    Layer::Dense {
        w: random_matrix(rng, n_out, n_in, scale),
        b: random_tensor(rng, &[n_out], 0.5),
    }
}

fn random_batchnorm(rng: &mut dyn RngCore, channels: usize) -> Layer {
    let gamma = (0..channels)
        .map(|_| {
            let g = rng.random_range(0.2..2.0);
            if rng.random_bool(0.3) {
                -g
            } else {
                g
            }
        })
        .collect();
    let var = (0..channels).map(|_| rng.random_range(0.1..2.0)).collect();
    Layer::Batchnorm {
        gamma: Tensor::new(vec![channels], gamma).unwrap(),
        beta: random_tensor(rng, &[channels], 0.5),
        running_mean: random_tensor(rng, &[channels], 0.5),
        running_var: Tensor::new(vec![channels], var).unwrap(),
        epsilon: if rng.random_bool(0.5) { 1e-5 } else { 1e-3 },
        momentum: 0.1,
    }
}

/// Random dense-stack network on vector inputs. Returns the network and
/// its input feature shape.
pub fn random_dense_network(rng: &mut dyn RngCore, max_depth: usize) -> (Network, Vec<usize>) {
    let mut width = rng.random_range(1..=5);
    let input_shape = vec![width];
    let depth = rng.random_range(1..=max_depth.max(1));
    let mut layers = Vec::new();
    for _ in 0..depth {
        match rng.random_range(0..6) {
            0 | 1 => {
                let n_out = rng.random_range(1..=5);
                layers.push(random_dense(rng, width, n_out));
                width = n_out;
            }
            2 => layers.push(Layer::Relu),
            3 => layers.push(random_batchnorm(rng, width)),
            4 => layers.push(Layer::Dropout {
                retain_prob: rng.random_range(0.5..1.0),
            }),
            _ => {
                let mut inner = vec![random_dense(rng, width, width)];
                if rng.random_bool(0.5) {
                    inner.push(Layer::Relu);
                }
                layers.push(Layer::Residual { inner });
            }
        }
    }
    if rng.random_bool(0.25) {
        layers.push(Layer::Softmax);
    }
    (Network::new(layers, LossKind::Mse), input_shape)
}

fn random_conv(rng: &mut dyn RngCore, shape: &mut Vec<usize>) -> Layer {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let c_out = rng.random_range(1..=3);
    let k = rng.random_range(1..=h.min(w).min(3));
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let geom = ConvGeometry::new((stride, stride), (pad, pad), (k, k));
    let (oh, ow) = geom.output_size((h, w)).expect("k <= input dims");
    *shape = vec![c_out, oh, ow];
    let scale = rng.random_range(0.3..1.2) / ((c * k * k) as f64).sqrt();
    Layer::Conv2d {
        f: random_tensor(rng, &[c_out, c, k, k], scale),
        b: random_tensor(rng, &[c_out], 0.5),
        geom,
    }
}

/// Random convolutional network on `(C, H, W)` inputs. Pool layers always
/// use stride equal to window.
pub fn random_conv_network(rng: &mut dyn RngCore, max_depth: usize) -> (Network, Vec<usize>) {
    let input_shape = vec![
        rng.random_range(1..=2),
        rng.random_range(3..=6),
        rng.random_range(3..=6),
    ];
    let mut shape = input_shape.clone();
    let depth = rng.random_range(1..=max_depth.max(1));
    let mut layers = Vec::new();
    for _ in 0..depth {
        match rng.random_range(0..6) {
            0 | 1 => layers.push(random_conv(rng, &mut shape)),
            2 => layers.push(Layer::Relu),
            3 => layers.push(random_batchnorm(rng, shape[0])),
            4 => {
                let (h, w) = (shape[1], shape[2]);
                if h >= 2 && w >= 2 {
                    let win = rng.random_range(2..=h.min(w).min(3));
                    layers.push(Layer::Maxpool {
                        window: (win, win),
                        stride: (win, win),
                    });
                    shape = vec![shape[0], h / win, w / win];
                } else {
                    layers.push(Layer::Relu);
                }
            }
            _ => {
                let c = shape[0];
                let k = if rng.random_bool(0.5) && shape[1] >= 3 && shape[2] >= 3 {
                    3
                } else {
                    1
                };
                let geom = ConvGeometry::new((1, 1), (k / 2, k / 2), (k, k));
                let scale = rng.random_range(0.3..1.2) / ((c * k * k) as f64).sqrt();
                let mut inner = vec![Layer::Conv2d {
                    f: random_tensor(rng, &[c, c, k, k], scale),
                    b: random_tensor(rng, &[c], 0.5),
                    geom,
                }];
                if rng.random_bool(0.5) {
                    inner.push(Layer::Relu);
                }
                layers.push(Layer::Residual { inner });
            }
        }
    }
    (Network::new(layers, LossKind::Mse), input_shape)
}

/// Either a dense or a conv network, weighted towards dense.
pub fn random_network(rng: &mut dyn RngCore, max_depth: usize) -> (Network, Vec<usize>) {
    if rng.random_bool(0.6) {
        random_dense_network(rng, max_depth)
    } else {
        random_conv_network(rng, max_depth)
    }
}
