//! Operator-norm implementations checked against independent oracles:
//! extremal-input brute force, Jacobi eigenvalues of the Gram matrix, and
//! the explicit matrix of the convolution's linear map.

use lipnet::norms::{
    conv_l1_formula_exact, conv_linf_formula_exact, explicit_conv_matrix, flattened_kernel_matrix,
    opnorm_l1_conv, opnorm_l1_dense, opnorm_l2_conv_power, opnorm_l2_power_dense, opnorm_linf_conv,
    opnorm_linf_dense, L2Cfg,
};
use lipnet::tensor::{ConvGeometry, Tensor};
use lipnet_testkit::oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-12)
}

#[test]
fn dense_l1_linf_equal_brute_force_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let (m, n) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let w = random_matrix(&mut rng, m, n);
        assert_eq!(
            opnorm_l1_dense(&w).unwrap(),
            oracle::opnorm_l1_bruteforce(&w),
            "l1 mismatch on {:?}",
            w.shape()
        );
        assert_eq!(
            opnorm_linf_dense(&w).unwrap(),
            oracle::opnorm_linf_bruteforce(&w),
            "linf mismatch on {:?}",
            w.shape()
        );
    }
}

#[test]
fn dense_l2_power_matches_jacobi_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..200 {
        let (m, n) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let w = random_matrix(&mut rng, m, n);
        let sigma = opnorm_l2_power_dense(&w, &L2Cfg::audit(), &mut rng).unwrap().sigma;
        let truth = oracle::spectral_norm(&w);
        assert!(rel(sigma, truth) < 1e-8, "power={sigma} jacobi={truth}");
    }
}

#[test]
fn power_estimates_never_exceed_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..30 {
        let (m, n) = (rng.random_range(2..=7), rng.random_range(2..=7));
        let w = random_matrix(&mut rng, m, n);
        let truth = oracle::spectral_norm(&w);
        for iters in 1..=50 {
            let est = opnorm_l2_power_dense(&w, &L2Cfg::new(iters, 1e-300), &mut rng)
                .unwrap()
                .sigma;
            assert!(
                est <= truth + 1e-12,
                "budget {iters}: estimate {est} above oracle {truth}"
            );
        }
    }
}

fn random_conv(
    rng: &mut ChaCha8Rng,
) -> (Tensor, ConvGeometry, Vec<usize>) {
    loop {
        let (co, ci) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let geom = ConvGeometry::new(
            (rng.random_range(1..=2), rng.random_range(1..=2)),
            (rng.random_range(0..=1), rng.random_range(0..=1)),
            (kh, kw),
        );
        if geom.output_size((h, w)).is_err() {
            continue;
        }
        let f = {
            let data = (0..co * ci * kh * kw).map(|_| rng.random_range(-1.5..1.5)).collect();
            Tensor::new(vec![co, ci, kh, kw], data).unwrap()
        };
        return (f, geom, vec![ci, h, w]);
    }
}

#[test]
fn conv_power_matches_explicit_matrix_power() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    // Conv operators often carry near-degenerate top singular clusters
    // (translation symmetry), so full agreement needs a deeper iteration
    // budget than the default audit cap.
    let cfg = L2Cfg::new(50_000, 1e-9);
    for _ in 0..40 {
        let (f, geom, shape) = random_conv(&mut rng);
        let sigma_conv = opnorm_l2_conv_power(&f, &geom, &shape, &cfg, &mut rng)
            .unwrap()
            .sigma;
        let m = explicit_conv_matrix(&f, &geom, &shape).unwrap();
        let sigma_dense = opnorm_l2_power_dense(&m, &cfg, &mut rng).unwrap().sigma;
        assert!(
            rel(sigma_conv, sigma_dense) < 1e-6,
            "conv={sigma_conv} dense={sigma_dense}"
        );
    }
}

#[test]
fn conv_formulas_bound_explicit_matrix_norms_and_match_when_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let mut exact_l1 = 0;
    let mut inexact_l1 = 0;
    for _ in 0..60 {
        let (f, geom, shape) = random_conv(&mut rng);
        let m = explicit_conv_matrix(&f, &geom, &shape).unwrap();
        let hw = (shape[1], shape[2]);

        let formula = opnorm_l1_conv(&f).unwrap();
        let matrix = opnorm_l1_dense(&m).unwrap();
        assert!(formula >= matrix - 1e-12 * matrix.max(1.0), "l1 below matrix norm");
        if conv_l1_formula_exact(&geom, hw).unwrap() {
            assert!(rel(formula, matrix) < 1e-12, "l1 formula={formula} matrix={matrix}");
            exact_l1 += 1;
        } else {
            inexact_l1 += 1;
        }

        let formula = opnorm_linf_conv(&f).unwrap();
        let matrix = opnorm_linf_dense(&m).unwrap();
        assert!(formula >= matrix - 1e-12 * matrix.max(1.0), "linf below matrix norm");
        if conv_linf_formula_exact(&geom, hw).unwrap() {
            assert!(rel(formula, matrix) < 1e-12, "linf formula={formula} matrix={matrix}");
        }
    }
    assert!(exact_l1 > 0 && inexact_l1 > 0, "draws cover both exactness regimes");
}

/// Dims small enough for the sign-vector brute force: the conv map's
/// matrix l-inf norm agrees with extremal-input maximisation too.
#[test]
fn conv_matrix_norms_agree_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for _ in 0..10 {
        let f = {
            let data = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            Tensor::new(vec![1, 1, 2, 2], data).unwrap()
        };
        let geom = ConvGeometry::new((1, 1), (1, 1), (2, 2));
        let shape = vec![1, 3, 3];
        let m = explicit_conv_matrix(&f, &geom, &shape).unwrap();
        assert_eq!(opnorm_l1_dense(&m).unwrap(), oracle::opnorm_l1_bruteforce(&m));
        assert_eq!(opnorm_linf_dense(&m).unwrap(), oracle::opnorm_linf_bruteforce(&m));
    }
}

#[test]
fn flattened_kernel_matrix_disagrees_with_true_conv_spectral_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let shape = vec![2usize, 8, 8];
    let geom = ConvGeometry::new((1, 1), (1, 1), (3, 3));
    let mut max_gap: f64 = 0.0;
    for _ in 0..20 {
        let data = (0..2 * 2 * 3 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = Tensor::new(vec![2, 2, 3, 3], data).unwrap();
        let sigma_w = oracle::spectral_norm(&explicit_conv_matrix(&f, &geom, &shape).unwrap());
        let sigma_u = oracle::spectral_norm(&flattened_kernel_matrix(&f).unwrap());
        max_gap = max_gap.max((sigma_u - sigma_w).abs() / sigma_w);
    }
    assert!(max_gap > 0.05, "largest relative gap {max_gap} too small");
}

#[test]
fn norms_are_absolutely_homogeneous() {
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    for _ in 0..50 {
        let (m, n) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let w = random_matrix(&mut rng, m, n);
        let alpha: f64 = rng.random_range(-3.0..3.0);
        let scaled = w.scale(alpha);
        let norms: [fn(&Tensor) -> lipnet::Result<f64>; 2] = [opnorm_l1_dense, opnorm_linf_dense];
        for norm in norms {
            let lhs = norm(&scaled).unwrap();
            let rhs = alpha.abs() * norm(&w).unwrap();
            assert!(rel(lhs, rhs) < 1e-12, "homogeneity: {lhs} vs {rhs}");
        }
    }
}

#[test]
fn batchnorm_bound_scales_with_gamma() {
    use lipnet::norms::batchnorm_lipschitz;
    let gamma = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
    let var = Tensor::new(vec![3], vec![1.0, 0.25, 4.0]).unwrap();
    let base = batchnorm_lipschitz(&gamma, &var, 1e-5).unwrap();
    let double = batchnorm_lipschitz(&gamma.scale(2.0), &var, 1e-5).unwrap();
    assert!(rel(double, 2.0 * base) < 1e-12);
}
