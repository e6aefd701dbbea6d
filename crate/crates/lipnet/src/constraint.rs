//! The projection that rescales weights back into the feasible set
//! `{W : ||W||_p <= lambda}` and its application across a network.
//!
//! Dense and conv weights are scaled by `1 / max(1, norm/lambda)`; batchnorm
//! gamma is scaled the same way against the layer's running-variance bound.
//! Biases, beta and running statistics are never touched: they shift the
//! function without changing its Lipschitz constant.

use std::collections::BTreeMap;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::layers::{Layer, Network};
use crate::norms::{
    batchnorm_lipschitz, opnorm_l1_conv, opnorm_l1_dense, opnorm_l2_conv_power,
    opnorm_l2_power_dense, opnorm_linf_conv, opnorm_linf_dense, L2Cfg, NormKind,
};
use crate::tensor::Tensor;

/// Which norm to constrain, to what value, and how hard to work for
/// spectral estimates during training.
#[derive(Debug, Clone)]
pub struct ConstraintConfig {
    /// Per-layer bound; `f64::INFINITY` disables the constraint entirely.
    pub lambda: f64,
    pub norm: NormKind,
    /// Power iterations per projection during training (warm-started).
    pub power_iters_train: usize,
    /// Epsilon assigned to batchnorm layers built by this toolchain. The
    /// projection itself always uses each layer's own epsilon so the bound
    /// matches the forward map.
    pub epsilon_bn: f64,
    /// Optional per-layer lambda overrides, keyed by top-level layer index.
    pub overrides: BTreeMap<usize, f64>,
}

impl ConstraintConfig {
    pub fn new(lambda: f64, norm: NormKind) -> Self {
        ConstraintConfig {
            lambda,
            norm,
            power_iters_train: 1,
            epsilon_bn: 1e-5,
            overrides: BTreeMap::new(),
        }
    }

    /// A configuration that leaves every network unchanged.
    pub fn unbounded() -> Self {
        ConstraintConfig::new(f64::INFINITY, NormKind::L2(L2Cfg::new(1, 1e-9)))
    }

    pub fn is_unbounded(&self) -> bool {
        self.lambda.is_infinite()
    }

    /// Effective bound for a top-level layer index.
    pub fn lambda_for(&self, index: usize) -> f64 {
        self.overrides.get(&index).copied().unwrap_or(self.lambda)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "lambda must be positive (or infinite), got {}",
                self.lambda
            )));
        }
        if self.power_iters_train == 0 {
            return Err(Error::Config("power_iters_train must be >= 1".into()));
        }
        if !(self.epsilon_bn > 0.0) {
            return Err(Error::Config(format!(
                "epsilon_bn must be > 0, got {}",
                self.epsilon_bn
            )));
        }
        for (i, l) in &self.overrides {
            if !(*l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!(
                    "override for layer {i} must be positive and finite, got {l}"
                )));
            }
        }
        Ok(())
    }

    fn training_l2(&self, warm: Option<Tensor>) -> L2Cfg {
        let tolerance = match &self.norm {
            NormKind::L2(cfg) => cfg.tolerance,
            _ => 1e-9,
        };
        L2Cfg {
            max_iters: self.power_iters_train,
            tolerance,
            warm_start: warm,
        }
    }
}

/// Persistent power-iteration vectors, one per dense/conv layer, keyed by
/// the layer's index path (residual members get nested paths).
#[derive(Debug, Clone, Default)]
pub struct PowerState {
    vectors: BTreeMap<Vec<usize>, Tensor>,
}

impl PowerState {
    pub fn new() -> Self {
        PowerState::default()
    }

    /// Seed one normalised random vector per dense/conv layer, walking the
    /// network's shapes from `input_shape` (feature shape, no batch axis).
    pub fn init_for(net: &Network, input_shape: &[usize], rng: &mut dyn RngCore) -> Result<Self> {
        let mut state = PowerState::new();
        let mut shape = input_shape.to_vec();
        for (i, layer) in net.layers.iter().enumerate() {
            state.init_layer(layer, &shape, &mut vec![i], rng)?;
            shape = layer.output_shape(&shape)?;
        }
        Ok(state)
    }

    fn init_layer(
        &mut self,
        layer: &Layer,
        input_shape: &[usize],
        path: &mut Vec<usize>,
        rng: &mut dyn RngCore,
    ) -> Result<()> {
        match layer {
            Layer::Dense { w, .. } => {
                let (_, n_in) = w.matrix_dims()?;
                self.vectors.insert(path.clone(), random_unit(&[n_in], rng)?);
            }
            Layer::Conv2d { .. } => {
                self.vectors
                    .insert(path.clone(), random_unit(input_shape, rng)?);
            }
            Layer::Residual { inner } => {
                let mut shape = input_shape.to_vec();
                for (j, l) in inner.iter().enumerate() {
                    path.push(j);
                    self.init_layer(l, &shape, path, rng)?;
                    path.pop();
                    shape = l.output_shape(&shape)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn get(&self, path: &[usize]) -> Option<&Tensor> {
        self.vectors.get(path)
    }

    pub fn set(&mut self, path: Vec<usize>, vector: Tensor) {
        self.vectors.insert(path, vector);
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

fn random_unit(shape: &[usize], rng: &mut dyn RngCore) -> Result<Tensor> {
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

/// Relative band above lambda still counted feasible. Scaling an
/// infeasible tensor leaves a recomputed norm within a few ulps of lambda;
/// without this band a second projection would rescale by ~1e-16 and
/// idempotence would fail bitwise.
const FEASIBLE_SLACK: f64 = 1e-13;

/// Scale a parameter tensor by `1 / max(1, norm_value/lambda)`. A feasible
/// tensor is returned bit-for-bit unchanged.
pub fn project_matrix(w: &Tensor, lambda: f64, norm_value: f64) -> Result<Tensor> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    if !norm_value.is_finite() || norm_value < 0.0 {
        return Err(Error::Numeric(format!(
            "operator norm must be finite and non-negative, got {norm_value}"
        )));
    }
    if norm_value <= lambda * (1.0 + FEASIBLE_SLACK) {
        return Ok(w.clone());
    }
    Ok(w.scale(lambda / norm_value))
}

/// Project one layer's constrained parameters in place under `lambda`.
/// Layers without constrained parameters pass through untouched; residual
/// blocks recurse with the same bound. `path` keys the warm-start vectors
/// in `state`.
fn project_layer_at(
    layer: &mut Layer,
    cfg: &ConstraintConfig,
    lambda: f64,
    state: &mut PowerState,
    path: &mut Vec<usize>,
    rng: &mut dyn RngCore,
) -> Result<()> {
    match layer {
        Layer::Dense { w, .. } => {
            let norm_value = match &cfg.norm {
                NormKind::L1 => opnorm_l1_dense(w)?,
                NormKind::Linf => opnorm_linf_dense(w)?,
                NormKind::L2(_) => {
                    let l2 = cfg.training_l2(state.get(path).cloned());
                    let out = opnorm_l2_power_dense(w, &l2, rng)?;
                    // Projection only rescales, so the iterate stays aligned
                    // with the top singular direction across steps.
                    state.set(path.clone(), out.vector);
                    out.sigma
                }
            };
            *w = project_matrix(w, lambda, norm_value)?;
            Ok(())
        }
        Layer::Conv2d { f, geom, .. } => {
            let norm_value = match &cfg.norm {
                NormKind::L1 => opnorm_l1_conv(f)?,
                NormKind::Linf => opnorm_linf_conv(f)?,
                NormKind::L2(_) => {
                    let warm = state.get(path).cloned().ok_or_else(|| {
                        Error::Config(
                            "no power-state vector for conv layer; initialise PowerState for \
                             this network first"
                                .into(),
                        )
                    })?;
                    let input_shape = warm.shape().to_vec();
                    let l2 = cfg.training_l2(Some(warm));
                    let out = opnorm_l2_conv_power(f, geom, &input_shape, &l2, rng)?;
                    state.set(path.clone(), out.vector);
                    out.sigma
                }
            };
            *f = project_matrix(f, lambda, norm_value)?;
            Ok(())
        }
        Layer::Batchnorm {
            gamma,
            running_var,
            epsilon,
            ..
        } => {
            let bound = batchnorm_lipschitz(gamma, running_var, *epsilon)?;
            *gamma = project_matrix(gamma, lambda, bound)?;
            Ok(())
        }
        Layer::Residual { inner } => {
            for (j, l) in inner.iter_mut().enumerate() {
                path.push(j);
                project_layer_at(l, cfg, lambda, state, path, rng)?;
                path.pop();
            }
            Ok(())
        }
        Layer::Relu | Layer::Maxpool { .. } | Layer::Dropout { .. } | Layer::Softmax => Ok(()),
    }
}

/// Project a standalone layer under `cfg.lambda` (override map ignored;
/// the layer is addressed with the empty path).
pub fn project_layer(
    layer: &mut Layer,
    cfg: &ConstraintConfig,
    state: &mut PowerState,
    rng: &mut dyn RngCore,
) -> Result<()> {
    cfg.validate()?;
    if cfg.is_unbounded() {
        return Ok(());
    }
    project_layer_at(layer, cfg, cfg.lambda, state, &mut Vec::new(), rng)
}

/// Apply the projection to every layer of the network. With an unbounded
/// lambda this is the identity and consumes no randomness.
pub fn constrain_network(
    net: &mut Network,
    cfg: &ConstraintConfig,
    state: &mut PowerState,
    rng: &mut dyn RngCore,
) -> Result<()> {
    cfg.validate()?;
    if cfg.is_unbounded() {
        return Ok(());
    }
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let lambda = cfg.lambda_for(i);
        project_layer_at(layer, cfg, lambda, state, &mut vec![i], rng)?;
    }
    Ok(())
}

/// Maximum rounds of project + re-estimate in [`strict_project`].
const STRICT_MAX_ROUNDS: usize = 100;

/// Relative slack accepted by the strict certification: a layer passes when
/// its recomputed norm is at most `lambda * (1 + 1e-6)`.
pub const STRICT_SLACK: f64 = 1e-6;

fn strict_layer(
    layer: &mut Layer,
    cfg: &ConstraintConfig,
    lambda: f64,
    input_shape: &[usize],
    rng: &mut dyn RngCore,
) -> Result<()> {
    match layer {
        Layer::Dense { w, .. } => match &cfg.norm {
            NormKind::L1 => {
                *w = project_matrix(w, lambda, opnorm_l1_dense(w)?)?;
                Ok(())
            }
            NormKind::Linf => {
                *w = project_matrix(w, lambda, opnorm_linf_dense(w)?)?;
                Ok(())
            }
            NormKind::L2(_) => {
                for _ in 0..STRICT_MAX_ROUNDS {
                    let out = opnorm_l2_power_dense(w, &L2Cfg::audit(), rng)?;
                    if out.sigma <= lambda * (1.0 + STRICT_SLACK) {
                        return Ok(());
                    }
                    *w = project_matrix(w, lambda, out.sigma)?;
                }
                Err(Error::Numeric(
                    "strict projection failed to certify a dense layer".into(),
                ))
            }
        },
        Layer::Conv2d { f, geom, .. } => match &cfg.norm {
            NormKind::L1 => {
                *f = project_matrix(f, lambda, opnorm_l1_conv(f)?)?;
                Ok(())
            }
            NormKind::Linf => {
                *f = project_matrix(f, lambda, opnorm_linf_conv(f)?)?;
                Ok(())
            }
            NormKind::L2(_) => {
                for _ in 0..STRICT_MAX_ROUNDS {
                    let out =
                        opnorm_l2_conv_power(f, geom, input_shape, &L2Cfg::audit(), rng)?;
                    if out.sigma <= lambda * (1.0 + STRICT_SLACK) {
                        return Ok(());
                    }
                    *f = project_matrix(f, lambda, out.sigma)?;
                }
                Err(Error::Numeric(
                    "strict projection failed to certify a conv layer".into(),
                ))
            }
        },
        Layer::Batchnorm {
            gamma,
            running_var,
            epsilon,
            ..
        } => {
            let bound = batchnorm_lipschitz(gamma, running_var, *epsilon)?;
            *gamma = project_matrix(gamma, lambda, bound)?;
            Ok(())
        }
        Layer::Residual { inner } => {
            let mut shape = input_shape.to_vec();
            for l in inner.iter_mut() {
                strict_layer(l, cfg, lambda, &shape, rng)?;
                shape = l.output_shape(&shape)?;
            }
            Ok(())
        }
        Layer::Relu | Layer::Maxpool { .. } | Layer::Dropout { .. } | Layer::Softmax => Ok(()),
    }
}

/// Certifying projection pass for saved models: l1/l-inf layers are
/// projected with their exact norms, while spectral layers iterate
/// converged power estimation and re-projection until the recomputed norm
/// is within `lambda * (1 + STRICT_SLACK)`. Needs the network input shape
/// to size conv iterates; no warm-start state is used.
pub fn strict_project(
    net: &mut Network,
    cfg: &ConstraintConfig,
    input_shape: &[usize],
    rng: &mut dyn RngCore,
) -> Result<()> {
    cfg.validate()?;
    if cfg.is_unbounded() {
        return Ok(());
    }
    let mut shape = input_shape.to_vec();
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let lambda = cfg.lambda_for(i);
        strict_layer(layer, cfg, lambda, &shape, rng)?;
        shape = layer.output_shape(&shape)?;
    }
    Ok(())
}
