//! Reference computations for matrix norms, kept independent of the
//! formula-based implementations they are used to check.

use lipnet::Tensor;

/// Eigenvalues of a symmetric matrix via cyclic Jacobi rotations.
///
/// Runs sweeps until every off-diagonal entry is below `1e-12` times the
/// matrix scale (or 100 sweeps, whichever comes first). Only meant for the
/// small matrices that appear in tests.
pub fn jacobi_eigenvalues(sym: &Tensor) -> Vec<f64> {
    let (n, m) = sym.matrix_dims().expect("jacobi needs a matrix");
    assert_eq!(n, m, "jacobi needs a square matrix");
    let mut a: Vec<f64> = sym.data().to_vec();
    let scale = a.iter().fold(1.0f64, |s, x| s.max(x.abs()));
    let tol = 1e-12 * scale;

    for _ in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[p * n + q].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Largest singular value of a (not necessarily square) matrix, computed as
/// the square root of the top eigenvalue of `A^T A`.
pub fn spectral_norm(a: &Tensor) -> f64 {
    let at = a.transpose2d().expect("spectral_norm needs a matrix");
    let ata = lipnet::tensor::matmul(&at, a).unwrap();
    jacobi_eigenvalues(&ata)
        .into_iter()
        .fold(0.0f64, f64::max)
        .max(0.0)
        .sqrt()
}

/// Operator norm of `x -> Ax` from l1 to l1, by brute force over the
/// extreme points of the l1 unit ball (the signed basis vectors).
pub fn opnorm_l1_bruteforce(a: &Tensor) -> f64 {
    let (m, n) = a.matrix_dims().expect("opnorm needs a matrix");
    let mut best = 0.0f64;
    for j in 0..n {
        for sign in [1.0, -1.0] {
            let mut out_norm = 0.0;
            for i in 0..m {
                out_norm += (sign * a.data()[i * n + j]).abs();
            }
            best = best.max(out_norm);
        }
    }
    best
}

/// Operator norm of `x -> Ax` from l-inf to l-inf, by brute force over the
/// extreme points of the l-inf unit ball (all sign vectors).
///
/// Exponential in the column count, so callers must keep `n` small.
pub fn opnorm_linf_bruteforce(a: &Tensor) -> f64 {
    let (m, n) = a.matrix_dims().expect("opnorm needs a matrix");
    assert!(n <= 20, "sign-vector search infeasible for n = {n}");
    let mut best = 0.0f64;
    for mask in 0u64..(1u64 << n) {
        let mut out_inf = 0.0f64;
        for i in 0..m {
            let row = &a.data()[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for (j, &w) in row.iter().enumerate() {
                acc += if mask >> j & 1 == 1 { w } else { -w };
            }
            out_inf = out_inf.max(acc.abs());
        }
        best = best.max(out_inf);
    }
    best
}

/// Materialise the matrix of a linear map by applying it to basis vectors.
/// Column `j` of the result is `f(e_j)`.
pub fn matrix_from_linear_map(
    dim_in: usize,
    dim_out: usize,
    f: impl Fn(&[f64]) -> Vec<f64>,
) -> Tensor {
    let mut cols = Vec::with_capacity(dim_in);
    for j in 0..dim_in {
        let mut e = vec![0.0; dim_in];
        e[j] = 1.0;
        let y = f(&e);
        assert_eq!(y.len(), dim_out, "map output size changed across inputs");
        cols.push(y);
    }
    let mut data = vec![0.0; dim_out * dim_in];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * dim_in + j] = v;
        }
    }
    Tensor::new(vec![dim_out, dim_in], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn jacobi_diagonal_matrix() {
        let d = t(&[3, 3], &[3., 0., 0., 0., -1., 0., 0., 0., 2.]);
        let mut eigs = jacobi_eigenvalues(&d);
        eigs.sort_by(f64::total_cmp);
        assert_eq!(eigs, vec![-1., 2., 3.]);
    }

    #[test]
    fn jacobi_known_2x2() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let a = t(&[2, 2], &[2., 1., 1., 2.]);
        let mut eigs = jacobi_eigenvalues(&a);
        eigs.sort_by(f64::total_cmp);
        assert!((eigs[0] - 1.0).abs() < 1e-10);
        assert!((eigs[1] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn spectral_norm_of_scaled_identity() {
        let a = t(&[2, 2], &[-4., 0., 0., 2.]);
        assert!((spectral_norm(&a) - 4.0).abs() < 1e-10);
    }

    #[test]
    fn spectral_norm_rank_one() {
        // A = u v^T has spectral norm |u||v|.
        let a = t(&[2, 3], &[2., 4., 6., 1., 2., 3.]);
        let expect = (5.0f64).sqrt() * (14.0f64).sqrt();
        assert!((spectral_norm(&a) - expect).abs() < 1e-9);
    }

    #[test]
    fn bruteforce_norms_on_known_matrix() {
        let a = t(&[2, 2], &[1., -2., 3., 4.]);
        // column sums: |1|+|3| = 4, |-2|+|4| = 6 -> l1 norm 6
        assert!((opnorm_l1_bruteforce(&a) - 6.0).abs() < 1e-12);
        // row sums: 3 and 7 -> l-inf norm 7
        assert!((opnorm_linf_bruteforce(&a) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn linear_map_materialisation() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let rebuilt = matrix_from_linear_map(3, 2, |x| {
            let xt = Tensor::from_vec(x.to_vec()).unwrap();
            lipnet::tensor::matvec(&a, &xt).unwrap().into_data()
        });
        assert_eq!(rebuilt, a);
    }
}
