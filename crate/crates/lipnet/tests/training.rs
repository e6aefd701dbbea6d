//! End-to-end training behaviour: loss descent, per-step constraint
//! feasibility, determinism, and history serialisation.

use lipnet::constraint::ConstraintConfig;
use lipnet::io::gen_synthetic;
use lipnet::layers::{glorot_init, Layer, LossKind, Network};
use lipnet::norms::{opnorm_l1_dense, opnorm_linf_dense, NormKind};
use lipnet::optim::{train, train_with_observer, OptimizerKind, TrainConfig};
use lipnet::tensor::Tensor;
use lipnet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mlp(seed: u64, widths: &[usize]) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for i in 0..widths.len() - 1 {
        layers.push(Layer::Dense {
            w: glorot_init(&[widths[i + 1], widths[i]], &mut rng).unwrap(),
            b: Tensor::zeros(&[widths[i + 1]]),
        });
        if i + 2 < widths.len() {
            layers.push(Layer::Relu);
        }
    }
    Network::new(layers, LossKind::Mse)
}

#[test]
fn unconstrained_training_cuts_loss_ten_fold_by_epoch_50() {
    let data = gen_synthetic(128, -5.0, 5.0, 21).unwrap();
    let mut net = mlp(22, &[1, 32, 32, 1]);
    let mut cfg = TrainConfig::new(50, 32, 23, OptimizerKind::amsgrad(1e-2));
    cfg.constraint = None;
    let history = train(&mut net, &data.inputs, &data.targets, &cfg).unwrap();
    let first = history.epochs.first().unwrap().train_loss;
    let last = history.epochs.last().unwrap().train_loss;
    assert!(
        last < 0.1 * first,
        "epoch 1 loss {first}, epoch 50 loss {last}"
    );
}

fn dense_norms(net: &Network, norm: &NormKind) -> Vec<f64> {
    net.layers
        .iter()
        .filter_map(|l| match l {
            Layer::Dense { w, .. } => Some(match norm {
                NormKind::L1 => opnorm_l1_dense(w).unwrap(),
                NormKind::Linf => opnorm_linf_dense(w).unwrap(),
                NormKind::L2(_) => unreachable!("exact norms only here"),
            }),
            _ => None,
        })
        .collect()
}

#[test]
fn exact_norm_constraints_hold_after_every_step() {
    let data = gen_synthetic(128, -5.0, 5.0, 31).unwrap();
    for norm in [NormKind::L1, NormKind::Linf] {
        // Reference run without constraint: the same optimizer pushes some
        // layer past 2, so the feasibility checks below are not vacuous.
        let mut free = mlp(32, &[1, 16, 16, 1]);
        let cfg_free = TrainConfig::new(13, 32, 33, OptimizerKind::SgdNesterov {
            lr: 0.1,
            momentum: 0.9,
        });
        train(&mut free, &data.inputs, &data.targets, &cfg_free).unwrap();
        let max_free = dense_norms(&free, &norm)
            .into_iter()
            .fold(0.0f64, f64::max);
        assert!(max_free > 2.0, "unconstrained norms stayed under 2 ({max_free}); weak setup");

        let mut net = mlp(32, &[1, 16, 16, 1]);
        let mut cfg = cfg_free.clone();
        cfg.constraint = Some(ConstraintConfig::new(2.0, norm.clone()));
        let mut steps = 0u64;
        train_with_observer(&mut net, &data.inputs, &data.targets, &cfg, |step, net| {
            steps = step;
            for n in dense_norms(net, &norm) {
                if n > 2.0 + 1e-12 {
                    return Err(Error::Numeric(format!("step {step}: norm {n} over bound")));
                }
            }
            Ok(())
        })
        .unwrap();
        assert!(steps >= 50, "observer saw only {steps} steps");
    }
}

#[test]
fn training_is_bitwise_deterministic_including_constraints() {
    let data = gen_synthetic(64, -5.0, 5.0, 41).unwrap();
    let run = || {
        let mut net = mlp(42, &[1, 8, 8, 1]);
        let mut cfg = TrainConfig::new(5, 16, 43, OptimizerKind::amsgrad(1e-3));
        cfg.constraint = Some(ConstraintConfig::new(
            1.5,
            NormKind::L2(lipnet::norms::L2Cfg::new(1, 1e-9)),
        ));
        let history = train(&mut net, &data.inputs, &data.targets, &cfg).unwrap();
        (net, history)
    };
    let (net_a, hist_a) = run();
    let (net_b, hist_b) = run();
    assert_eq!(net_a, net_b);
    assert_eq!(hist_a.to_csv(), hist_b.to_csv());
}

#[test]
fn history_csv_reports_bounds_only_under_a_constraint() {
    let data = gen_synthetic(32, -5.0, 5.0, 51).unwrap();

    let mut net = mlp(52, &[1, 4, 1]);
    let cfg = TrainConfig::new(3, 16, 53, OptimizerKind::amsgrad(1e-3));
    let hist = train(&mut net, &data.inputs, &data.targets, &cfg).unwrap();
    let csv = hist.to_csv();
    assert!(csv.starts_with("epoch,train_loss\n"), "{csv}");
    assert_eq!(csv.trim_end().lines().count(), 4);

    let mut net = mlp(52, &[1, 4, 1]);
    let mut cfg = TrainConfig::new(3, 16, 53, OptimizerKind::amsgrad(1e-3));
    cfg.constraint = Some(ConstraintConfig::new(2.0, NormKind::Linf));
    let hist = train(&mut net, &data.inputs, &data.targets, &cfg).unwrap();
    let csv = hist.to_csv();
    assert!(csv.starts_with("epoch,train_loss,bound\n"), "{csv}");
    for line in csv.trim_end().lines().skip(1) {
        assert_eq!(line.split(',').count(), 3, "{line}");
    }
}

#[test]
fn numeric_blowup_reports_the_failing_step() {
    let data = gen_synthetic(32, -5.0, 5.0, 61).unwrap();
    let mut net = mlp(62, &[1, 8, 1]);
    let cfg = TrainConfig::new(20, 8, 63, OptimizerKind::SgdNesterov {
        lr: 1e8,
        momentum: 0.9,
    });
    match train(&mut net, &data.inputs, &data.targets, &cfg) {
        Err(Error::Diverged { step }) => assert!(step >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}
