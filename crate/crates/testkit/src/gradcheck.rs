//! Finite-difference gradient checking harness shared by the unit and
//! acceptance suites. Randomness inside a layer (dropout masks) is pinned
//! by re-seeding per evaluation, so the differentiated map is fixed.

use lipnet::layers::{
    compute_loss, layer_backward, layer_forward, network_backward, network_forward, Layer, Mode,
    Network, ParamGrads,
};
use lipnet::tensor::Tensor;
use lipnet::Result;
use rand::prelude::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fd;

pub const FD_STEP: f64 = 1e-5;

/// Central differences of an O(1) scalar at the step above carry a few
/// 1e-11 of cancellation noise; differences below this are unresolvable.
pub const FD_NOISE: f64 = 5e-10;

#[derive(Debug, Default, Clone, Copy)]
pub struct GradReport {
    /// Largest relative disagreement over all resolvable coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradReport {
    pub fn absorb(&mut self, other: GradReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }

    fn compare(&mut self, fd_grad: &[f64], bp_grad: &[f64]) {
        assert_eq!(fd_grad.len(), bp_grad.len(), "gradient length mismatch");
        for (a, b) in fd_grad.iter().zip(bp_grad) {
            if (a - b).abs() <= FD_NOISE {
                self.skipped += 1;
            } else {
                self.max_rel_err = self.max_rel_err.max(fd::rel_err(*a, *b));
                self.checked += 1;
            }
        }
    }
}

pub fn collect_params_mut<'a>(layer: &'a mut Layer, out: &mut Vec<&'a mut Tensor>) {
    match layer {
        Layer::Dense { w, b } => {
            out.push(w);
            out.push(b);
        }
        Layer::Conv2d { f, b, .. } => {
            out.push(f);
            out.push(b);
        }
        Layer::Batchnorm { gamma, beta, .. } => {
            out.push(gamma);
            out.push(beta);
        }
        Layer::Residual { inner } => {
            for l in inner {
                collect_params_mut(l, out);
            }
        }
        _ => {}
    }
}

pub fn collect_grads(g: &ParamGrads, out: &mut Vec<Tensor>) {
    match g {
        ParamGrads::None => {}
        ParamGrads::Dense { dw, db } => {
            out.push(dw.clone());
            out.push(db.clone());
        }
        ParamGrads::Conv { df, db } => {
            out.push(df.clone());
            out.push(db.clone());
        }
        ParamGrads::Batchnorm { dgamma, dbeta } => {
            out.push(dgamma.clone());
            out.push(dbeta.clone());
        }
        ParamGrads::Residual { inner } => {
            for g in inner {
                collect_grads(g, out);
            }
        }
    }
}

/// Input values with all magnitudes >= 0.04 and pairwise gaps >= 0.06, so
/// relu and maxpool stay on one linear piece under the difference step.
pub fn kink_safe_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|k| {
            let v = 0.1 * (k + 1) as f64 + rng.random_range(-0.02..0.02);
            if rng.random_bool(0.5) {
                -v
            } else {
                v
            }
        })
        .collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// FD-vs-backprop on `<u, layer(x)>` for the input and every parameter.
/// `input_shape` includes the batch axis.
pub fn check_layer(
    layer: &Layer,
    input_shape: &[usize],
    mode: Mode,
    seed: u64,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = kink_safe_input(&mut rng, input_shape);
    let mask_seed = seed ^ 0xD00D;
    let out_len = {
        let mut probe = layer.clone();
        let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
        layer_forward(&mut probe, &input, mode, &mut r)?.0.len()
    };
    let u: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

    let scalar = |l: &Layer, x: &Tensor| -> f64 {
        let mut lc = l.clone();
        let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
        let (out, _) = layer_forward(&mut lc, x, mode, &mut r).unwrap();
        out.data().iter().zip(&u).map(|(o, w)| o * w).sum()
    };

    let mut lc = layer.clone();
    let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
    let (out, cache) = layer_forward(&mut lc, &input, mode, &mut r)?;
    let grad_out = Tensor::new(out.shape().to_vec(), u.clone())?;
    let (grad_in, pgrads) = layer_backward(layer, &cache, &grad_out)?;

    let mut report = GradReport::default();
    let fd_in = fd::gradient(
        |xs| scalar(layer, &Tensor::new(input_shape.to_vec(), xs.to_vec()).unwrap()),
        input.data(),
        FD_STEP,
    );
    report.compare(&fd_in, grad_in.data());

    let mut bp_params = Vec::new();
    collect_grads(&pgrads, &mut bp_params);
    for (p, bp) in bp_params.iter().enumerate() {
        let base = {
            let mut lc = layer.clone();
            let mut refs = Vec::new();
            collect_params_mut(&mut lc, &mut refs);
            refs[p].data().to_vec()
        };
        let fd_p = fd::gradient(
            |vals| {
                let mut lc = layer.clone();
                {
                    let mut refs = Vec::new();
                    collect_params_mut(&mut lc, &mut refs);
                    refs[p].data_mut().copy_from_slice(vals);
                }
                scalar(&lc, &input)
            },
            &base,
            FD_STEP,
        );
        report.compare(&fd_p, bp.data());
    }
    Ok(report)
}

/// FD-vs-backprop on the training loss of a whole network, for the batch
/// input and every parameter.
pub fn check_network(
    net: &Network,
    batch: &Tensor,
    targets: &Tensor,
    seed: u64,
) -> Result<GradReport> {
    let mask_seed = seed ^ 0xBEEF;
    let loss_of = |n: &Network, x: &Tensor| -> f64 {
        let mut nc = n.clone();
        let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
        let (out, _) = network_forward(&mut nc, x, Mode::Train, &mut r).unwrap();
        compute_loss(nc.loss, &out, targets).unwrap().0
    };

    let mut nc = net.clone();
    let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
    let (out, caches) = network_forward(&mut nc, batch, Mode::Train, &mut r)?;
    let (_, grad_loss) = compute_loss(net.loss, &out, targets)?;
    let (grad_in, layer_grads) = network_backward(net, &caches, &grad_loss)?;

    let mut report = GradReport::default();
    let fd_in = fd::gradient(
        |xs| loss_of(net, &Tensor::new(batch.shape().to_vec(), xs.to_vec()).unwrap()),
        batch.data(),
        FD_STEP,
    );
    report.compare(&fd_in, grad_in.data());

    let mut bp_all = Vec::new();
    for g in &layer_grads {
        collect_grads(g, &mut bp_all);
    }
    for (p, bp) in bp_all.iter().enumerate() {
        let base = {
            let mut nc = net.clone();
            let mut refs = Vec::new();
            for l in &mut nc.layers {
                collect_params_mut(l, &mut refs);
            }
            refs[p].data().to_vec()
        };
        let fd_p = fd::gradient(
            |vals| {
                let mut nc = net.clone();
                {
                    let mut refs = Vec::new();
                    for l in &mut nc.layers {
                        collect_params_mut(l, &mut refs);
                    }
                    refs[p].data_mut().copy_from_slice(vals);
                }
                loss_of(&nc, batch)
            },
            &base,
            FD_STEP,
        );
        report.compare(&fd_p, bp.data());
    }
    Ok(report)
}

/// The mixed five-plus-layer network used by both gradient suites, with a
/// kink-safe batch and matching targets.
pub fn mixed_network(seed: u64) -> (Network, Tensor, Tensor) {
    use lipnet::layers::LossKind;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rv = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let dense = |rv: &mut dyn FnMut(usize) -> Vec<f64>, o: usize, i: usize| Layer::Dense {
        w: Tensor::new(vec![o, i], rv(o * i)).unwrap(),
        b: Tensor::new(vec![o], rv(o)).unwrap(),
    };
    let net = Network::new(
        vec![
            dense(&mut rv, 4, 3),
            Layer::Relu,
            Layer::Batchnorm {
                gamma: Tensor::new(vec![4], rv(4)).unwrap(),
                beta: Tensor::new(vec![4], rv(4)).unwrap(),
                running_mean: Tensor::new(vec![4], vec![0.0; 4]).unwrap(),
                running_var: Tensor::new(vec![4], vec![1.0; 4]).unwrap(),
                epsilon: 1e-5,
                momentum: 0.1,
            },
            Layer::Residual {
                inner: vec![dense(&mut rv, 4, 4), Layer::Relu],
            },
            Layer::Dropout { retain_prob: 0.7 },
            dense(&mut rv, 2, 4),
        ],
        LossKind::Mse,
    );
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0xFACE);
    let batch = kink_safe_input(&mut rng2, &[4, 3]);
    let targets = Tensor::new(
        vec![4, 2],
        (0..8).map(|_| rng2.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    (net, batch, targets)
}
