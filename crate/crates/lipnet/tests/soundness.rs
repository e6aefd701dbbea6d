//! Soundness of the Lipschitz bounds: empirical slopes never exceed the
//! audited upper bounds, per layer and end to end.

use lipnet::layers::{layer_forward, Layer, Mode};
use lipnet::norms::{empirical_lipschitz, layer_lipschitz, network_lipschitz, L2Cfg, NormKind};
use lipnet::tensor::{ConvGeometry, Tensor, VectorNorm};
use lipnet_testkit::netgen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm_kinds() -> Vec<(NormKind, VectorNorm)> {
    vec![
        (NormKind::L1, VectorNorm::L1),
        (NormKind::L2(L2Cfg::audit()), VectorNorm::L2),
        (NormKind::Linf, VectorNorm::Linf),
    ]
}

#[test]
fn empirical_bound_never_exceeds_audited_bound_on_random_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for case in 0..50 {
        let (net, shape) = netgen::random_network(&mut rng, 5);
        for (kind, p) in norm_kinds() {
            let report = network_lipschitz(&net, &kind, &shape, true, &mut rng).unwrap();
            let empirical =
                empirical_lipschitz(&net, p, &shape, (-1.0, 1.0), 400, &mut rng).unwrap();
            assert!(
                empirical <= report.network_bound + 1e-6,
                "case {case} {p:?}: empirical {empirical} > bound {}",
                report.network_bound
            );
        }
    }
}

fn vec_norm(data: &[f64], p: VectorNorm) -> f64 {
    match p {
        VectorNorm::L1 => data.iter().map(|v| v.abs()).sum(),
        VectorNorm::L2 => data.iter().map(|v| v * v).sum::<f64>().sqrt(),
        VectorNorm::Linf => data.iter().fold(0.0, |m, v| m.max(v.abs())),
    }
}

/// 1000 random eval-mode input pairs per layer and norm: the output
/// distance never exceeds the reported constant times the input distance.
#[test]
fn every_layer_respects_its_reported_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let dense = Layer::Dense {
        w: netgen::random_matrix(&mut rng, 4, 3, 1.0),
        b: netgen::random_tensor(&mut rng, &[4], 0.5),
    };
    let conv = Layer::Conv2d {
        f: netgen::random_tensor(&mut rng, &[2, 2, 3, 3], 0.4),
        b: netgen::random_tensor(&mut rng, &[2], 0.5),
        geom: ConvGeometry::new((1, 1), (1, 1), (3, 3)),
    };
    let bn = Layer::Batchnorm {
        gamma: netgen::random_tensor(&mut rng, &[2], 1.5),
        beta: netgen::random_tensor(&mut rng, &[2], 0.5),
        running_mean: netgen::random_tensor(&mut rng, &[2], 0.5),
        running_var: Tensor::new(vec![2], vec![0.3, 1.7]).unwrap(),
        epsilon: 1e-5,
        momentum: 0.1,
    };
    let residual = Layer::Residual {
        inner: vec![
            Layer::Dense {
                w: netgen::random_matrix(&mut rng, 3, 3, 0.8),
                b: netgen::random_tensor(&mut rng, &[3], 0.5),
            },
            Layer::Relu,
        ],
    };
    let cases: Vec<(Layer, Vec<usize>)> = vec![
        (dense, vec![3]),
        (conv, vec![2, 5, 5]),
        (Layer::Relu, vec![6]),
        (Layer::Maxpool { window: (2, 2), stride: (2, 2) }, vec![1, 4, 4]),
        (bn, vec![2]),
        (Layer::Dropout { retain_prob: 0.6 }, vec![5]),
        (residual, vec![3]),
        (Layer::Softmax, vec![4]),
    ];

    for (layer, feat_shape) in cases {
        for (kind, p) in norm_kinds() {
            let k = layer_lipschitz(&layer, &kind, &feat_shape, true, &mut rng).unwrap();
            let mut batched = vec![1];
            batched.extend_from_slice(&feat_shape);
            let n: usize = feat_shape.iter().product();
            for _ in 0..1000 {
                let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let ta = Tensor::new(batched.clone(), a.clone()).unwrap();
                let tb = Tensor::new(batched.clone(), b.clone()).unwrap();
                let mut l1 = layer.clone();
                let mut l2 = layer.clone();
                let (ya, _) = layer_forward(&mut l1, &ta, Mode::Eval, &mut rng).unwrap();
                let (yb, _) = layer_forward(&mut l2, &tb, Mode::Eval, &mut rng).unwrap();
                let dy: Vec<f64> = ya.data().iter().zip(yb.data()).map(|(x, y)| x - y).collect();
                let dx: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
                let lhs = vec_norm(&dy, p);
                let rhs = k * vec_norm(&dx, p) + 1e-9;
                assert!(
                    lhs <= rhs,
                    "{} under {p:?}: |dy|={lhs} > K|dx|={rhs} (K={k})",
                    lipnet::norms::layer_kind_name(&layer)
                );
            }
        }
    }
}

#[test]
fn dropout_train_mask_expectation_equals_eval_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let input = Tensor::new(vec![1, 8], (0..8).map(|i| 0.25 * (i as f64) - 1.0).collect()).unwrap();
    let mut layer = Layer::Dropout { retain_prob: 0.7 };

    let (eval_out, _) = layer_forward(&mut layer, &input, Mode::Eval, &mut rng).unwrap();
    let mut mean = vec![0.0f64; 8];
    let trials = 10_000;
    for _ in 0..trials {
        let (out, _) = layer_forward(&mut layer, &input, Mode::Train, &mut rng).unwrap();
        for (m, v) in mean.iter_mut().zip(out.data()) {
            *m += v / trials as f64;
        }
    }
    for (m, e) in mean.iter().zip(eval_out.data()) {
        // Monte-Carlo standard error is sqrt(r(1-r))|x|/100 ~ 0.005; 0.025
        // is a five-sigma envelope.
        assert!((m - e).abs() < 0.025, "mask mean {m} vs eval {e}");
    }
}
