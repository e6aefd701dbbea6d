//! Operator norms for every layer type, power iteration for spectral norms,
//! explicit-matrix construction for convolutions, and whole-network
//! Lipschitz upper bounds with an empirical lower-bound check.
//!
//! Throughout, the bound for a chain of layers is the product of per-layer
//! bounds; a residual block contributes `1 + product(inner bounds)` as a
//! single factor.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::layers::{Layer, Mode, Network};
use crate::tensor::{conv2d, conv2d_transpose, ConvGeometry, Tensor, VectorNorm};

/// Largest input size (in elements) for which [`explicit_conv_matrix`] will
/// materialise the dense operator.
pub const EXPLICIT_MATRIX_CAP: usize = 4096;

/// Settings for spectral-norm power iteration.
#[derive(Debug, Clone)]
pub struct L2Cfg {
    pub max_iters: usize,
    pub tolerance: f64,
    /// Resume from this vector instead of a random draw. Must be nonzero
    /// and match the operator's input shape.
    pub warm_start: Option<Tensor>,
}

impl L2Cfg {
    pub fn new(max_iters: usize, tolerance: f64) -> Self {
        L2Cfg {
            max_iters,
            tolerance,
            warm_start: None,
        }
    }

    /// Convergence-grade settings used for audits.
    pub fn audit() -> Self {
        L2Cfg::new(1000, 1e-9)
    }

    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("power iteration needs max_iters >= 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!(
                "power iteration tolerance must be > 0, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// Which operator norm to compute.
#[derive(Debug, Clone)]
pub enum NormKind {
    L1,
    L2(L2Cfg),
    Linf,
}

impl NormKind {
    /// The vector norm this operator norm is induced by.
    pub fn vector_norm(&self) -> VectorNorm {
        match self {
            NormKind::L1 => VectorNorm::L1,
            NormKind::L2(_) => VectorNorm::L2,
            NormKind::Linf => VectorNorm::Linf,
        }
    }
}

/// How a reported bound was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundMethod {
    /// The bound equals the layer's operator norm.
    Exact,
    /// The bound is a certified over-estimate (conv l1/l-inf formulas under
    /// stride or padding regimes where no full row/column exists).
    UpperBound,
    /// Power iteration with the recorded iteration count; always an
    /// under-estimate of the true spectral norm.
    Power { iterations: usize },
}

impl std::fmt::Display for BoundMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BoundMethod::Exact => write!(f, "exact"),
            BoundMethod::UpperBound => write!(f, "upper_bound"),
            BoundMethod::Power { iterations } => write!(f, "power({iterations})"),
        }
    }
}

/// Per-layer entry of a [`LipschitzReport`].
#[derive(Debug, Clone)]
pub struct LayerBound {
    pub index: usize,
    pub kind: &'static str,
    pub bound: f64,
    pub method: BoundMethod,
    /// Whether a dropout retain-probability factor was folded into `bound`.
    pub dropout_scaled: bool,
}

/// Per-layer Lipschitz bounds under one norm, plus their product.
#[derive(Debug, Clone)]
pub struct LipschitzReport {
    pub layers: Vec<LayerBound>,
    pub network_bound: f64,
}

/// Stable kind label used in reports and serialised documents.
pub fn layer_kind_name(layer: &Layer) -> &'static str {
    match layer {
        Layer::Dense { .. } => "dense",
        Layer::Conv2d { .. } => "conv2d",
        Layer::Relu => "relu",
        Layer::Maxpool { .. } => "maxpool",
        Layer::Batchnorm { .. } => "batchnorm",
        Layer::Dropout { .. } => "dropout",
        Layer::Residual { .. } => "residual",
        Layer::Softmax => "softmax",
    }
}

/// Maximum absolute column sum of a matrix: the operator norm of `x -> Wx`
/// from l1 to l1.
pub fn opnorm_l1_dense(w: &Tensor) -> Result<f64> {
    let (m, n) = w.matrix_dims()?;
    let mut best = 0.0f64;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..m {
            col += w.data()[i * n + j].abs();
        }
        best = best.max(col);
    }
    Ok(best)
}

/// Maximum absolute row sum of a matrix: the operator norm of `x -> Wx`
/// from l-inf to l-inf.
pub fn opnorm_linf_dense(w: &Tensor) -> Result<f64> {
    let (m, n) = w.matrix_dims()?;
    let mut best = 0.0f64;
    for i in 0..m {
        let row: f64 = w.data()[i * n..(i + 1) * n].iter().map(|x| x.abs()).sum();
        best = best.max(row);
    }
    Ok(best)
}

/// Result of a power-iteration spectral norm estimate.
#[derive(Debug, Clone)]
pub struct PowerOutcome {
    /// `||W x|| / ||x||` for the returned vector; never exceeds the true
    /// largest singular value.
    pub sigma: f64,
    /// The final iterate, unit length; reusable as a warm start.
    pub vector: Tensor,
    pub iterations: usize,
}

fn start_vector(shape: &[usize], warm: Option<&Tensor>, rng: &mut dyn RngCore) -> Result<Tensor> {
    match warm {
        Some(v) => {
            if v.shape() != shape {
                return Err(Error::dims("warm start", shape, v.shape()));
            }
            let n = v.norm_l2();
            if n == 0.0 {
                return Err(Error::Config("warm-start vector must be nonzero".into()));
            }
            Ok(v.scale(1.0 / n))
        }
        None => {
            let data: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|_| StandardNormal.sample(rng))
                .collect();
            let t = Tensor::new(shape.to_vec(), data)?;
            let n = t.norm_l2();
            if n == 0.0 {
                return Err(Error::Numeric("degenerate random start vector".into()));
            }
            Ok(t.scale(1.0 / n))
        }
    }
}

/// Shared power-iteration loop over an arbitrary linear operator given by
/// its forward and adjoint applications.
fn power_iterate(
    x0: Tensor,
    cfg: &L2Cfg,
    forward: impl Fn(&Tensor) -> Result<Tensor>,
    adjoint: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<PowerOutcome> {
    cfg.validate()?;
    let mut x = x0;
    let mut prev_sigma: Option<f64> = None;
    let mut iterations = 0;
    for i in 1..=cfg.max_iters {
        iterations = i;
        let y = forward(&x)?;
        let sigma = y.norm_l2();
        if !sigma.is_finite() {
            return Err(Error::Numeric("power iteration overflowed".into()));
        }
        if sigma == 0.0 {
            // x is in the null space; the estimate cannot improve.
            return Ok(PowerOutcome {
                sigma: 0.0,
                vector: x,
                iterations,
            });
        }
        let z = adjoint(&y)?;
        let zn = z.norm_l2();
        if !zn.is_finite() {
            return Err(Error::Numeric("power iteration overflowed".into()));
        }
        // Sigma change alone can stop far below the limit when the top two
        // singular values are close (slow geometric convergence); the Gram
        // residual ||z - sigma^2 x|| bounds the remaining gap by ~tol/2.
        let resid = z
            .data()
            .iter()
            .zip(x.data())
            .map(|(zi, xi)| {
                let d = zi - sigma * sigma * xi;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        let sigma_settled =
            prev_sigma.is_some_and(|p| (sigma - p).abs() <= cfg.tolerance * sigma);
        if sigma_settled && resid <= cfg.tolerance * sigma * sigma {
            return Ok(PowerOutcome {
                sigma,
                vector: x,
                iterations,
            });
        }
        prev_sigma = Some(sigma);
        if zn == 0.0 {
            return Ok(PowerOutcome {
                sigma: 0.0,
                vector: x,
                iterations,
            });
        }
        x = z.scale(1.0 / zn);
    }
    // Budget exhausted: report the Rayleigh quotient of the final iterate so
    // sigma and vector stay consistent.
    let sigma = forward(&x)?.norm_l2();
    if !sigma.is_finite() {
        return Err(Error::Numeric("power iteration overflowed".into()));
    }
    Ok(PowerOutcome {
        sigma,
        vector: x,
        iterations,
    })
}

/// Largest-singular-value estimate for a dense matrix by power iteration on
/// `W^T W`. The estimate is always at or below the true value.
pub fn opnorm_l2_power_dense(
    w: &Tensor,
    cfg: &L2Cfg,
    rng: &mut dyn RngCore,
) -> Result<PowerOutcome> {
    let (m, n) = w.matrix_dims()?;
    let x0 = start_vector(&[n], cfg.warm_start.as_ref(), rng)?;
    let forward = |x: &Tensor| -> Result<Tensor> {
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = w.data()[i * n..(i + 1) * n]
                .iter()
                .zip(x.data())
                .map(|(a, b)| a * b)
                .sum();
        }
        Tensor::new(vec![m], out)
    };
    let adjoint = |y: &Tensor| -> Result<Tensor> {
        let mut out = vec![0.0; n];
        for i in 0..m {
            let yi = y.data()[i];
            if yi == 0.0 {
                continue;
            }
            for (o, &wij) in out.iter_mut().zip(&w.data()[i * n..(i + 1) * n]) {
                *o += wij * yi;
            }
        }
        Tensor::new(vec![n], out)
    };
    power_iterate(x0, cfg, forward, adjoint)
}

fn filter_dims(f: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match f.shape() {
        &[co, ci, kh, kw] => Ok((co, ci, kh, kw)),
        other => Err(Error::InvalidShape(format!(
            "filter bank must be (C_out,C_in,k_h,k_w), got {other:?}"
        ))),
    }
}

/// l1 operator-norm formula for a convolution: the maximum over input
/// channels of the summed entrywise absolute values of all filters reading
/// that channel.
pub fn opnorm_l1_conv(f: &Tensor) -> Result<f64> {
    let (co, ci, kh, kw) = filter_dims(f)?;
    let k = kh * kw;
    let mut best = 0.0f64;
    for j in 0..ci {
        let mut sum = 0.0;
        for i in 0..co {
            let base = (i * ci + j) * k;
            sum += f.data()[base..base + k].iter().map(|x| x.abs()).sum::<f64>();
        }
        best = best.max(sum);
    }
    Ok(best)
}

/// l-inf operator-norm formula for a convolution: the maximum over output
/// channels of the summed entrywise absolute values of all filters writing
/// that channel.
pub fn opnorm_linf_conv(f: &Tensor) -> Result<f64> {
    let (co, ci, kh, kw) = filter_dims(f)?;
    let k = kh * kw;
    let mut best = 0.0f64;
    for i in 0..co {
        let base = i * ci * k;
        let sum: f64 = f.data()[base..base + ci * k].iter().map(|x| x.abs()).sum();
        best = best.max(sum);
    }
    Ok(best)
}

fn axis_l1_exact(n: usize, k: usize, s: usize, pad: usize, out: usize) -> bool {
    // Some input position must be read at every kernel offset.
    (0..n).any(|pos| {
        (0..k).all(|u| {
            let num = pos as isize + pad as isize - u as isize;
            num >= 0 && num % s as isize == 0 && num / (s as isize) < out as isize
        })
    })
}

fn axis_linf_exact(n: usize, k: usize, s: usize, pad: usize, out: usize) -> bool {
    // Some output position must read the input at every kernel offset.
    (0..out).any(|y| {
        let first = (y * s) as isize - pad as isize;
        first >= 0 && first + k as isize - 1 < n as isize
    })
}

/// Whether [`opnorm_l1_conv`] is the exact operator norm for this geometry
/// and input size (it is always a valid upper bound).
pub fn conv_l1_formula_exact(geom: &ConvGeometry, input_hw: (usize, usize)) -> Result<bool> {
    let (oh, ow) = geom.output_size(input_hw)?;
    Ok(
        axis_l1_exact(input_hw.0, geom.kernel.0, geom.stride.0, geom.padding.0, oh)
            && axis_l1_exact(input_hw.1, geom.kernel.1, geom.stride.1, geom.padding.1, ow),
    )
}

/// Whether [`opnorm_linf_conv`] is the exact operator norm for this
/// geometry and input size (it is always a valid upper bound).
pub fn conv_linf_formula_exact(geom: &ConvGeometry, input_hw: (usize, usize)) -> Result<bool> {
    let (oh, ow) = geom.output_size(input_hw)?;
    Ok(
        axis_linf_exact(input_hw.0, geom.kernel.0, geom.stride.0, geom.padding.0, oh)
            && axis_linf_exact(input_hw.1, geom.kernel.1, geom.stride.1, geom.padding.1, ow),
    )
}

/// Spectral-norm estimate for a convolution by power iteration, applying
/// the convolution forward and its adjoint (transposed convolution) in
/// place of explicit matrix products. `input_shape` is `(C_in, H, W)`.
pub fn opnorm_l2_conv_power(
    f: &Tensor,
    geom: &ConvGeometry,
    input_shape: &[usize],
    cfg: &L2Cfg,
    rng: &mut dyn RngCore,
) -> Result<PowerOutcome> {
    let (_, ci, _, _) = filter_dims(f)?;
    let (c, h, w) = match input_shape {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(Error::InvalidShape(format!(
                "conv input shape must be (C,H,W), got {other:?}"
            )))
        }
    };
    if c != ci {
        return Err(Error::dims("conv power channels", &[ci], input_shape));
    }
    geom.output_size((h, w))?;
    let x0 = start_vector(&[c, h, w], cfg.warm_start.as_ref(), rng)?;
    power_iterate(
        x0,
        cfg,
        |x| conv2d(x, f, None, geom),
        |y| conv2d_transpose(y, f, geom, (h, w)),
    )
}

/// Dense matrix of the linear map `vec(input) -> vec(conv2d(input))`,
/// channels-first row-major on both sides, built by direct index
/// arithmetic. Capped at [`EXPLICIT_MATRIX_CAP`] input elements.
pub fn explicit_conv_matrix(
    f: &Tensor,
    geom: &ConvGeometry,
    input_shape: &[usize],
) -> Result<Tensor> {
    let (co, ci, kh, kw) = filter_dims(f)?;
    let (c, h, w) = match input_shape {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(Error::InvalidShape(format!(
                "conv input shape must be (C,H,W), got {other:?}"
            )))
        }
    };
    if c != ci {
        return Err(Error::dims("explicit matrix channels", &[ci], input_shape));
    }
    let in_size = c * h * w;
    if in_size > EXPLICIT_MATRIX_CAP {
        return Err(Error::SizeCapExceeded {
            elements: in_size,
            cap: EXPLICIT_MATRIX_CAP,
        });
    }
    let (oh, ow) = geom.output_size((h, w))?;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let out_size = co * oh * ow;

    let mut mat = vec![0.0; out_size * in_size];
    for i in 0..co {
        for y in 0..oh {
            for x in 0..ow {
                let row = (i * oh + y) * ow + x;
                for j in 0..ci {
                    for u in 0..kh {
                        let iy = (y * sh + u) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let ix = (x * sw + v) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let col = (j * h + iy as usize) * w + ix as usize;
                            mat[row * in_size + col] += f.data()[((i * ci + j) * kh + u) * kw + v];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![out_size, in_size], mat)
}

/// The (C_out) x (C_in * k_h * k_w) matrix whose row `i` is the serialised
/// filter stack for output channel `i`. Used for comparison against the
/// true convolution operator; its singular values generally differ.
pub fn flattened_kernel_matrix(f: &Tensor) -> Result<Tensor> {
    let (co, ci, kh, kw) = filter_dims(f)?;
    Tensor::new(vec![co, ci * kh * kw], f.data().to_vec())
}

/// Lipschitz constant of a channel-wise normalisation with fixed statistics:
/// `max_i |gamma_i| / sqrt(var_i + epsilon)`. The same value holds for
/// p in {1, 2, inf} because the operator is diagonal.
pub fn batchnorm_lipschitz(gamma: &Tensor, running_var: &Tensor, epsilon: f64) -> Result<f64> {
    if gamma.shape() != running_var.shape() {
        return Err(Error::dims("batchnorm stats", gamma.shape(), running_var.shape()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
    }
    let mut best = 0.0f64;
    for (&g, &v) in gamma.data().iter().zip(running_var.data()) {
        if v < 0.0 {
            return Err(Error::Config(format!("negative running variance {v}")));
        }
        best = best.max(g.abs() / (v + epsilon).sqrt());
    }
    Ok(best)
}

fn layer_bound_detailed(
    layer: &Layer,
    norm: &NormKind,
    input_shape: &[usize],
    dropout_scaling: bool,
    rng: &mut dyn RngCore,
) -> Result<(f64, BoundMethod, bool)> {
    match layer {
        Layer::Dense { w, .. } => match norm {
            NormKind::L1 => Ok((opnorm_l1_dense(w)?, BoundMethod::Exact, false)),
            NormKind::Linf => Ok((opnorm_linf_dense(w)?, BoundMethod::Exact, false)),
            NormKind::L2(cfg) => {
                let out = opnorm_l2_power_dense(w, cfg, rng)?;
                Ok((
                    out.sigma,
                    BoundMethod::Power {
                        iterations: out.iterations,
                    },
                    false,
                ))
            }
        },
        Layer::Conv2d { f, geom, .. } => {
            let hw = match input_shape {
                &[_, h, w] => (h, w),
                other => {
                    return Err(Error::InvalidShape(format!(
                        "conv input shape must be (C,H,W), got {other:?}"
                    )))
                }
            };
            match norm {
                NormKind::L1 => {
                    let method = if conv_l1_formula_exact(geom, hw)? {
                        BoundMethod::Exact
                    } else {
                        BoundMethod::UpperBound
                    };
                    Ok((opnorm_l1_conv(f)?, method, false))
                }
                NormKind::Linf => {
                    let method = if conv_linf_formula_exact(geom, hw)? {
                        BoundMethod::Exact
                    } else {
                        BoundMethod::UpperBound
                    };
                    Ok((opnorm_linf_conv(f)?, method, false))
                }
                NormKind::L2(cfg) => {
                    let out = opnorm_l2_conv_power(f, geom, input_shape, cfg, rng)?;
                    Ok((
                        out.sigma,
                        BoundMethod::Power {
                            iterations: out.iterations,
                        },
                        false,
                    ))
                }
            }
        }
        Layer::Relu | Layer::Maxpool { .. } | Layer::Softmax => {
            Ok((1.0, BoundMethod::Exact, false))
        }
        Layer::Batchnorm {
            gamma,
            running_var,
            epsilon,
            ..
        } => Ok((
            batchnorm_lipschitz(gamma, running_var, *epsilon)?,
            BoundMethod::Exact,
            false,
        )),
        Layer::Dropout { retain_prob } => {
            if dropout_scaling {
                Ok((*retain_prob, BoundMethod::Exact, true))
            } else {
                Ok((1.0, BoundMethod::Exact, false))
            }
        }
        Layer::Residual { inner } => {
            let mut shape = input_shape.to_vec();
            let mut product = 1.0;
            let mut any_power_iters: Option<usize> = None;
            let mut any_upper = false;
            let mut any_dropout = false;
            for l in inner {
                let (b, method, ds) = layer_bound_detailed(l, norm, &shape, dropout_scaling, rng)?;
                product *= b;
                match method {
                    BoundMethod::Exact => {}
                    BoundMethod::UpperBound => any_upper = true,
                    BoundMethod::Power { iterations } => {
                        any_power_iters =
                            Some(any_power_iters.map_or(iterations, |p| p.max(iterations)));
                    }
                }
                any_dropout |= ds;
                shape = l.output_shape(&shape)?;
            }
            if shape != input_shape {
                return Err(Error::InvalidShape(format!(
                    "residual inner chain maps {input_shape:?} to {shape:?}; shapes must match"
                )));
            }
            // Report the weakest certification among the members.
            let method = if let Some(iterations) = any_power_iters {
                BoundMethod::Power { iterations }
            } else if any_upper {
                BoundMethod::UpperBound
            } else {
                BoundMethod::Exact
            };
            Ok((1.0 + product, method, any_dropout))
        }
    }
}

/// Lipschitz bound for one layer under the given norm. Dropout contributes
/// a factor of its retain probability only when `dropout_scaling` is set
/// (evaluation-time semantics); otherwise it counts as 1.
pub fn layer_lipschitz(
    layer: &Layer,
    norm: &NormKind,
    input_shape: &[usize],
    dropout_scaling: bool,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    layer_bound_detailed(layer, norm, input_shape, dropout_scaling, rng).map(|(b, _, _)| b)
}

/// Per-layer bounds under one norm and their product. The warm start in an
/// `L2` config is only honoured when its shape matches a layer's input;
/// audits normally leave it unset.
pub fn network_lipschitz(
    net: &Network,
    norm: &NormKind,
    input_shape: &[usize],
    dropout_scaling: bool,
    rng: &mut dyn RngCore,
) -> Result<LipschitzReport> {
    let mut shape = input_shape.to_vec();
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut product = 1.0;
    for (index, layer) in net.layers.iter().enumerate() {
        let per_layer_norm = match norm {
            NormKind::L2(cfg) => {
                let usable = cfg
                    .warm_start
                    .as_ref()
                    .is_some_and(|v| layer_power_shape(layer) == Some(v.shape().to_vec()));
                NormKind::L2(L2Cfg {
                    max_iters: cfg.max_iters,
                    tolerance: cfg.tolerance,
                    warm_start: if usable { cfg.warm_start.clone() } else { None },
                })
            }
            other => other.clone(),
        };
        let (bound, method, dropout_scaled) =
            layer_bound_detailed(layer, &per_layer_norm, &shape, dropout_scaling, rng)?;
        layers.push(LayerBound {
            index,
            kind: layer_kind_name(layer),
            bound,
            method,
            dropout_scaled,
        });
        product *= bound;
        shape = layer.output_shape(&shape)?;
    }
    Ok(LipschitzReport {
        layers,
        network_bound: product,
    })
}

/// Input shape a power-iteration vector must have for this layer, if the
/// layer has a spectral norm computed by iteration.
fn layer_power_shape(layer: &Layer) -> Option<Vec<usize>> {
    match layer {
        Layer::Dense { w, .. } => w.matrix_dims().ok().map(|(_, n)| vec![n]),
        Layer::Conv2d { .. } => None, // depends on input spatial size, not carried here
        _ => None,
    }
}

/// Sampled lower bound on a network's Lipschitz constant: the maximum of
/// `||f(x1) - f(x2)||_p / ||x1 - x2||_p` over random pairs plus structured
/// small perturbations (Gaussian, sign-vector and basis-vector directions)
/// inside the `domain` box. Evaluation mode throughout.
pub fn empirical_lipschitz(
    net: &Network,
    p: VectorNorm,
    input_shape: &[usize],
    domain: (f64, f64),
    n_pairs: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    use rand::Rng;
    if n_pairs == 0 {
        return Err(Error::Config("need at least one sample pair".into()));
    }
    let (lo, hi) = domain;
    if !(lo < hi) {
        return Err(Error::Config(format!("invalid domain [{lo}, {hi}]")));
    }
    let size: usize = input_shape.iter().product();
    let step = 1e-3 * (hi - lo);

    let mut firsts: Vec<Vec<f64>> = Vec::new();
    let mut seconds: Vec<Vec<f64>> = Vec::new();
    let uniform = |rng: &mut dyn RngCore| -> Vec<f64> {
        (0..size).map(|_| rng.random_range(lo..hi)).collect()
    };

    for k in 0..n_pairs {
        let a = uniform(rng);
        let mut b = a.clone();
        match k % 4 {
            // Independent second point.
            0 => b = uniform(rng),
            // Gaussian perturbation.
            1 => {
                for v in b.iter_mut() {
                    let d: f64 = StandardNormal.sample(rng);
                    *v += step * d;
                }
            }
            // Sign-vector perturbation.
            2 => {
                for v in b.iter_mut() {
                    *v += if rng.random::<bool>() { step } else { -step };
                }
            }
            // Single-coordinate perturbation.
            _ => {
                let j = rng.random_range(0..size);
                b[j] += step;
            }
        }
        firsts.push(a);
        seconds.push(b);
    }
    // Deterministic sweeps when the input is small: all coordinates, and all
    // sign patterns, around one random base point.
    if size <= 64 {
        let base = uniform(rng);
        for j in 0..size {
            let mut b = base.clone();
            b[j] += step;
            firsts.push(base.clone());
            seconds.push(b);
        }
    }
    if size <= 10 {
        let base = uniform(rng);
        for mask in 0..(1u32 << size) {
            let mut b = base.clone();
            for (j, v) in b.iter_mut().enumerate() {
                *v += if mask >> j & 1 == 1 { step } else { -step };
            }
            firsts.push(base.clone());
            seconds.push(b);
        }
    }

    let total = firsts.len();
    let mut shape = vec![total];
    shape.extend_from_slice(input_shape);
    let batch1 = Tensor::new(shape.clone(), firsts.concat())?;
    let batch2 = Tensor::new(shape, seconds.concat())?;

    let mut eval_net = net.clone();
    let (out1, _) = crate::layers::network_forward(&mut eval_net, &batch1, Mode::Eval, rng)?;
    let (out2, _) = crate::layers::network_forward(&mut eval_net, &batch2, Mode::Eval, rng)?;
    if !out1.all_finite() || !out2.all_finite() {
        return Err(Error::Numeric("non-finite network output".into()));
    }
    let out_size = out1.len() / total;

    let mut best = 0.0f64;
    for s in 0..total {
        let dx = Tensor::new(
            input_shape.to_vec(),
            batch1.data()[s * size..(s + 1) * size]
                .iter()
                .zip(&batch2.data()[s * size..(s + 1) * size])
                .map(|(a, b)| a - b)
                .collect(),
        )?;
        let din = dx.norm_p(p);
        if din == 0.0 {
            continue;
        }
        let dy = Tensor::new(
            vec![out_size],
            out1.data()[s * out_size..(s + 1) * out_size]
                .iter()
                .zip(&out2.data()[s * out_size..(s + 1) * out_size])
                .map(|(a, b)| a - b)
                .collect(),
        )?;
        best = best.max(dy.norm_p(p) / din);
    }
    Ok(best)
}

/// Render one-to-three reports (for p = 1, 2, inf) as the audit CSV:
/// `layer,kind,p1_bound,p2_bound,pinf_bound,method`, one row per layer plus
/// a final product row. Reports must describe the same network.
pub fn lipschitz_audit_csv(
    p1: Option<&LipschitzReport>,
    p2: Option<&LipschitzReport>,
    pinf: Option<&LipschitzReport>,
) -> Result<String> {
    let present: Vec<&LipschitzReport> = [p1, p2, pinf].into_iter().flatten().collect();
    let first = *present
        .first()
        .ok_or_else(|| Error::Config("audit needs at least one norm".into()))?;
    for r in &present {
        if r.layers.len() != first.layers.len() {
            return Err(Error::Config("audit reports disagree on layer count".into()));
        }
    }
    let fmt = |r: Option<&LipschitzReport>, i: usize| -> String {
        r.map_or(String::new(), |r| r.layers[i].bound.to_string())
    };
    let mut out = String::from("layer,kind,p1_bound,p2_bound,pinf_bound,method\n");
    for i in 0..first.layers.len() {
        let mut methods: Vec<String> = Vec::new();
        for r in &present {
            let m = r.layers[i].method.to_string();
            if !methods.contains(&m) {
                methods.push(m);
            }
        }
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            first.layers[i].index,
            first.layers[i].kind,
            fmt(p1, i),
            fmt(p2, i),
            fmt(pinf, i),
            methods.join("/")
        ));
    }
    let net = |r: Option<&LipschitzReport>| -> String {
        r.map_or(String::new(), |r| r.network_bound.to_string())
    };
    out.push_str(&format!(
        "network,product,{},{},{},product\n",
        net(p1),
        net(p2),
        net(pinf)
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::SmallRng;
    use rand::SeedableRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rng() -> SmallRng {
        SmallRng::seed_from_u64(0xA5)
    }

    #[test]
    fn dense_l1_examples() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(opnorm_l1_dense(&id).unwrap(), 1.0);
        let a = t(&[2, 2], &[1., -2., 3., 4.]);
        assert_eq!(opnorm_l1_dense(&a).unwrap(), 6.0);
        assert_eq!(opnorm_l1_dense(&Tensor::zeros(&[3, 4])).unwrap(), 0.0);
    }

    #[test]
    fn dense_linf_examples() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(opnorm_linf_dense(&id).unwrap(), 1.0);
        let a = t(&[2, 2], &[1., -2., 3., 4.]);
        assert_eq!(opnorm_linf_dense(&a).unwrap(), 7.0);
    }

    #[test]
    fn linf_is_l1_of_transpose() {
        let a = t(&[3, 2], &[1., -2., 0.5, 4., -3., 2.5]);
        assert_eq!(
            opnorm_linf_dense(&a).unwrap(),
            opnorm_l1_dense(&a.transpose2d().unwrap()).unwrap()
        );
    }

    #[test]
    fn power_dense_diagonal() {
        let w = t(&[2, 2], &[3., 0., 0., 1.]);
        let out = opnorm_l2_power_dense(&w, &L2Cfg::new(25, 1e-12), &mut rng()).unwrap();
        assert!((out.sigma - 3.0).abs() < 1e-10, "{}", out.sigma);
        assert!((out.vector.norm_l2() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn power_dense_zero_matrix() {
        let w = Tensor::zeros(&[3, 3]);
        let out = opnorm_l2_power_dense(&w, &L2Cfg::audit(), &mut rng()).unwrap();
        assert_eq!(out.sigma, 0.0);
    }

    #[test]
    fn power_rejects_zero_warm_start() {
        let w = t(&[2, 2], &[1., 0., 0., 1.]);
        let mut cfg = L2Cfg::audit();
        cfg.warm_start = Some(Tensor::zeros(&[2]));
        assert!(opnorm_l2_power_dense(&w, &cfg, &mut rng()).is_err());
    }

    #[test]
    fn conv_l1_examples() {
        let single = t(&[1, 1, 1, 1], &[-2.5]);
        assert_eq!(opnorm_l1_conv(&single).unwrap(), 2.5);
        let f = t(&[1, 1, 2, 2], &[1., -2., 3., 4.]);
        assert_eq!(opnorm_l1_conv(&f).unwrap(), 10.0);
        // Two output channels over one input channel, absolute sums 3 and 4.
        let bank = t(&[2, 1, 1, 2], &[1., 2., -3., 1.]);
        assert_eq!(opnorm_l1_conv(&bank).unwrap(), 7.0);
    }

    #[test]
    fn conv_linf_examples() {
        let f = t(&[1, 1, 2, 2], &[1., -2., 3., 4.]);
        assert_eq!(
            opnorm_linf_conv(&f).unwrap(),
            opnorm_l1_conv(&f).unwrap()
        );
        // One output channel over two input channels, absolute sums 3 and 4.
        let bank = t(&[1, 2, 1, 2], &[1., 2., -3., 1.]);
        assert_eq!(opnorm_linf_conv(&bank).unwrap(), 7.0);
        assert_eq!(opnorm_linf_conv(&Tensor::zeros(&[2, 2, 3, 3])).unwrap(), 0.0);
    }

    #[test]
    fn conv_l1_matches_explicit_matrix_stride1() {
        let f = t(&[1, 1, 2, 2], &[1., -2., 3., 4.]);
        let geom = ConvGeometry::unit((2, 2));
        let w = explicit_conv_matrix(&f, &geom, &[1, 4, 4]).unwrap();
        assert!(conv_l1_formula_exact(&geom, (4, 4)).unwrap());
        assert!((opnorm_l1_conv(&f).unwrap() - opnorm_l1_dense(&w).unwrap()).abs() < 1e-12);
        assert!(conv_linf_formula_exact(&geom, (4, 4)).unwrap());
        assert!((opnorm_linf_conv(&f).unwrap() - opnorm_linf_dense(&w).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn conv_power_identity_kernel() {
        let f = t(&[1, 1, 1, 1], &[1.]);
        let geom = ConvGeometry::unit((1, 1));
        let out =
            opnorm_l2_conv_power(&f, &geom, &[1, 5, 5], &L2Cfg::audit(), &mut rng()).unwrap();
        assert!((out.sigma - 1.0).abs() < 1e-9);
    }

    #[test]
    fn conv_power_absolute_homogeneity() {
        let f = t(&[1, 1, 2, 2], &[0.5, -1., 2., 0.25]);
        let geom = ConvGeometry::unit((2, 2));
        let a = opnorm_l2_conv_power(&f, &geom, &[1, 4, 4], &L2Cfg::audit(), &mut rng())
            .unwrap()
            .sigma;
        let b = opnorm_l2_conv_power(&f.scale(-3.0), &geom, &[1, 4, 4], &L2Cfg::audit(), &mut rng())
            .unwrap()
            .sigma;
        assert!((b - 3.0 * a).abs() < 1e-9 * b.max(1.0));
    }

    #[test]
    fn explicit_matrix_identity_kernel() {
        let f = t(&[1, 1, 1, 1], &[1.]);
        let geom = ConvGeometry::unit((1, 1));
        let w = explicit_conv_matrix(&f, &geom, &[1, 3, 3]).unwrap();
        let mut expect = Tensor::zeros(&[9, 9]);
        for i in 0..9 {
            expect.data_mut()[i * 9 + i] = 1.0;
        }
        assert_eq!(w, expect);
    }

    #[test]
    fn explicit_matrix_agrees_with_conv() {
        use lipnet_testing_shim::*;
        let mut r = rng();
        let f = t(
            &[2, 1, 3, 3],
            &(0..18).map(|i| ((i * 7 % 11) as f64) - 5.0).collect::<Vec<_>>(),
        );
        let geom = ConvGeometry::new((2, 2), (1, 1), (3, 3));
        let shape = [1usize, 5, 5];
        let w = explicit_conv_matrix(&f, &geom, &shape).unwrap();
        for _ in 0..20 {
            let x = random_tensor(&shape, &mut r);
            let via_conv = conv2d(&x, &f, None, &geom).unwrap();
            let via_mat = crate::tensor::matvec(&w, &x.reshape(vec![25]).unwrap()).unwrap();
            for (a, b) in via_conv.data().iter().zip(via_mat.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    // Tiny local helper namespace for the test above.
    mod lipnet_testing_shim {
        use super::*;
        use rand::Rng;
        pub fn random_tensor(shape: &[usize], rng: &mut SmallRng) -> Tensor {
            let data = (0..shape.iter().product::<usize>())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        }
    }

    #[test]
    fn explicit_matrix_respects_cap() {
        let f = t(&[1, 1, 1, 1], &[1.]);
        let geom = ConvGeometry::unit((1, 1));
        let err = explicit_conv_matrix(&f, &geom, &[1, 65, 64]).unwrap_err();
        assert!(matches!(err, Error::SizeCapExceeded { .. }));
    }

    #[test]
    fn flattened_kernel_rows() {
        let f = t(&[2, 1, 1, 2], &[1., 2., 3., 4.]);
        let u = flattened_kernel_matrix(&f).unwrap();
        assert_eq!(u, t(&[2, 2], &[1., 2., 3., 4.]));
    }

    #[test]
    fn flattened_equals_explicit_for_degenerate_geometry() {
        // 1x1 kernels on a 1x1 input: both constructions give the same map.
        let f = t(&[2, 2, 1, 1], &[1., -2., 0.5, 3.]);
        let geom = ConvGeometry::unit((1, 1));
        let w = explicit_conv_matrix(&f, &geom, &[2, 1, 1]).unwrap();
        let u = flattened_kernel_matrix(&f).unwrap();
        assert_eq!(w, u);
    }

    #[test]
    fn batchnorm_lipschitz_examples() {
        let one = t(&[1], &[1.]);
        assert!(
            (batchnorm_lipschitz(&one, &one, 1e-12).unwrap() - 1.0).abs() < 1e-9
        );
        let g = t(&[2], &[2., -3.]);
        let v = t(&[2], &[1., 8.]);
        let b = batchnorm_lipschitz(&g, &v, 1.0).unwrap();
        assert!((b - 2.0f64.sqrt()).abs() < 1e-12);
        let zero = t(&[2], &[0., 0.]);
        assert_eq!(batchnorm_lipschitz(&zero, &v, 1.0).unwrap(), 0.0);
        let neg = t(&[2], &[1., -0.5]);
        assert!(batchnorm_lipschitz(&g, &neg, 1.0).is_err());
    }

    #[test]
    fn layer_bounds_for_activations() {
        let mut r = rng();
        for (layer, shape) in [
            (Layer::Relu, vec![4]),
            (Layer::Softmax, vec![4]),
            (
                Layer::Maxpool {
                    window: (2, 2),
                    stride: (2, 2),
                },
                vec![1, 4, 4],
            ),
        ] {
            for norm in [NormKind::L1, NormKind::L2(L2Cfg::audit()), NormKind::Linf] {
                assert_eq!(
                    layer_lipschitz(&layer, &norm, &shape, false, &mut r).unwrap(),
                    1.0
                );
            }
        }
    }

    #[test]
    fn dropout_bound_depends_on_scaling_flag() {
        let mut r = rng();
        let l = Layer::Dropout { retain_prob: 0.5 };
        assert_eq!(
            layer_lipschitz(&l, &NormKind::L1, &[3], true, &mut r).unwrap(),
            0.5
        );
        assert_eq!(
            layer_lipschitz(&l, &NormKind::L1, &[3], false, &mut r).unwrap(),
            1.0
        );
    }

    #[test]
    fn residual_bound_is_one_plus_inner_product() {
        let mut r = rng();
        // Dense with l1 norm 3.
        let l = Layer::Residual {
            inner: vec![Layer::Dense {
                w: t(&[2, 2], &[3., 0., 0., 1.]),
                b: t(&[2], &[0., 0.]),
            }],
        };
        assert_eq!(
            layer_lipschitz(&l, &NormKind::L1, &[2], false, &mut r).unwrap(),
            4.0
        );
    }

    #[test]
    fn network_bound_examples() {
        let mut r = rng();
        let empty = Network::new(vec![], crate::layers::LossKind::Mse);
        let report = network_lipschitz(&empty, &NormKind::L1, &[3], false, &mut r).unwrap();
        assert_eq!(report.network_bound, 1.0);
        assert!(report.layers.is_empty());

        let net = Network::new(
            vec![
                Layer::Dense {
                    w: t(&[2, 2], &[2., 0., 0., 1.]),
                    b: t(&[2], &[0., 0.]),
                },
                Layer::Dense {
                    w: t(&[2, 2], &[5., 0., 0., 1.]),
                    b: t(&[2], &[0., 0.]),
                },
            ],
            crate::layers::LossKind::Mse,
        );
        let report = network_lipschitz(&net, &NormKind::L1, &[2], false, &mut r).unwrap();
        assert_eq!(report.network_bound, 10.0);
        assert_eq!(report.layers.len(), 2);
        assert_eq!(report.layers[0].bound, 2.0);
        assert_eq!(report.layers[1].bound, 5.0);
    }

    #[test]
    fn empirical_identity_network_is_one() {
        let mut r = rng();
        let net = Network::new(vec![], crate::layers::LossKind::Mse);
        for p in [VectorNorm::L1, VectorNorm::L2, VectorNorm::Linf] {
            let est = empirical_lipschitz(&net, p, &[3], (-1.0, 1.0), 50, &mut r).unwrap();
            assert!((est - 1.0).abs() < 1e-9, "{est}");
        }
    }

    #[test]
    fn empirical_scales_with_network() {
        let mut r = rng();
        let w = t(&[2, 2], &[1., 2., -0.5, 0.3]);
        let b = t(&[2], &[0.1, -0.2]);
        let net = Network::new(
            vec![Layer::Dense {
                w: w.clone(),
                b: b.clone(),
            }],
            crate::layers::LossKind::Mse,
        );
        let scaled = Network::new(
            vec![Layer::Dense {
                w: w.scale(2.0),
                b,
            }],
            crate::layers::LossKind::Mse,
        );
        let mut r2 = rng();
        let e1 = empirical_lipschitz(&net, VectorNorm::L2, &[2], (-1.0, 1.0), 64, &mut r).unwrap();
        let e2 =
            empirical_lipschitz(&scaled, VectorNorm::L2, &[2], (-1.0, 1.0), 64, &mut r2).unwrap();
        assert!((e2 - 2.0 * e1).abs() < 1e-9 * e2.max(1.0));
    }

    #[test]
    fn empirical_linf_reaches_dense_row_sum() {
        let mut r = rng();
        let w = t(&[2, 4], &[1., -2., 3., -4., 0.5, 0.5, 0.5, 0.5]);
        let net = Network::new(
            vec![Layer::Dense {
                w: w.clone(),
                b: Tensor::zeros(&[2]),
            }],
            crate::layers::LossKind::Mse,
        );
        let exact = opnorm_linf_dense(&w).unwrap();
        let est =
            empirical_lipschitz(&net, VectorNorm::Linf, &[4], (-1.0, 1.0), 200, &mut r).unwrap();
        assert!(est <= exact + 1e-9);
        assert!(est >= 0.9 * exact, "{est} vs {exact}");
    }

    #[test]
    fn audit_csv_layout() {
        let mut r = rng();
        let net = Network::new(
            vec![
                Layer::Dense {
                    w: t(&[2, 2], &[2., 0., 0., 1.]),
                    b: t(&[2], &[0., 0.]),
                },
                Layer::Relu,
            ],
            crate::layers::LossKind::Mse,
        );
        let p1 = network_lipschitz(&net, &NormKind::L1, &[2], false, &mut r).unwrap();
        let p2 =
            network_lipschitz(&net, &NormKind::L2(L2Cfg::audit()), &[2], false, &mut r).unwrap();
        let pinf = network_lipschitz(&net, &NormKind::Linf, &[2], false, &mut r).unwrap();
        let csv = lipschitz_audit_csv(Some(&p1), Some(&p2), Some(&pinf)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,kind,p1_bound,p2_bound,pinf_bound,method");
        assert_eq!(lines.len(), 4); // header + 2 layers + network row
        assert!(lines[1].starts_with("0,dense,2,"));
        assert!(lines[2].starts_with("1,relu,1,1,1,exact"));
        assert!(lines[3].starts_with("network,product,2,"));
    }
}
