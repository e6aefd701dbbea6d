//! Stochastic gradient update rules (SGD with Nesterov momentum, AMSGrad)
//! and the projected training loop: forward, loss, backward, optimizer
//! update, then projection back into the feasible set after every
//! minibatch.
//!
//! Training is fully deterministic given the config seed. Three independent
//! ChaCha streams are derived from it: one for shuffling and dropout masks,
//! one for power-iteration starts, one for history bound audits. Keeping
//! them separate means toggling the constraint or the bound recording never
//! shifts the parameter trajectory of an otherwise-identical run.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::constraint::{constrain_network, ConstraintConfig, PowerState};
use crate::error::{Error, Result};
use crate::layers::{
    compute_loss, network_backward, network_forward, Layer, Mode, Network, ParamGrads,
};
use crate::norms::{network_lipschitz, L2Cfg, NormKind};
use crate::tensor::Tensor;

/// Update rule and its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerKind {
    SgdNesterov { lr: f64, momentum: f64 },
    Amsgrad { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    /// AMSGrad with the defaults used throughout: beta1 0.9, beta2 0.99,
    /// eps 1e-8.
    pub fn amsgrad(lr: f64) -> Self {
        OptimizerKind::Amsgrad {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }

    pub fn base_lr(&self) -> f64 {
        match self {
            OptimizerKind::SgdNesterov { lr, .. } | OptimizerKind::Amsgrad { lr, .. } => *lr,
        }
    }

    fn validate(&self) -> Result<()> {
        let check_lr = |lr: f64| -> Result<()> {
            // Zero is allowed so a zero-step run can exercise projection only.
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
            }
            Ok(())
        };
        match self {
            OptimizerKind::SgdNesterov { lr, momentum } => {
                check_lr(*lr)?;
                if !(*momentum >= 0.0 && *momentum < 1.0) {
                    return Err(Error::Config(format!(
                        "momentum must be in [0,1), got {momentum}"
                    )));
                }
            }
            OptimizerKind::Amsgrad {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                check_lr(*lr)?;
                for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                    if !(*b >= 0.0 && *b < 1.0) {
                        return Err(Error::Config(format!("{name} must be in [0,1), got {b}")));
                    }
                }
                if !(*eps > 0.0) {
                    return Err(Error::Config(format!("eps must be > 0, got {eps}")));
                }
            }
        }
        Ok(())
    }
}

/// Per-tensor optimizer memory.
#[derive(Debug, Clone)]
enum Slot {
    Sgd { velocity: Tensor },
    Ams { m: Tensor, v: Tensor, vhat: Tensor },
}

impl Slot {
    fn new(kind: &OptimizerKind, shape: &[usize]) -> Slot {
        match kind {
            OptimizerKind::SgdNesterov { .. } => Slot::Sgd {
                velocity: Tensor::zeros(shape),
            },
            OptimizerKind::Amsgrad { .. } => Slot::Ams {
                m: Tensor::zeros(shape),
                v: Tensor::zeros(shape),
                vhat: Tensor::zeros(shape),
            },
        }
    }
}

#[derive(Debug, Clone)]
enum LayerState {
    None,
    Dense { w: Slot, b: Slot },
    Conv { f: Slot, b: Slot },
    Batchnorm { gamma: Slot, beta: Slot },
    Residual { inner: Vec<LayerState> },
}

impl LayerState {
    fn for_layer(layer: &Layer, kind: &OptimizerKind) -> LayerState {
        match layer {
            Layer::Dense { w, b } => LayerState::Dense {
                w: Slot::new(kind, w.shape()),
                b: Slot::new(kind, b.shape()),
            },
            Layer::Conv2d { f, b, .. } => LayerState::Conv {
                f: Slot::new(kind, f.shape()),
                b: Slot::new(kind, b.shape()),
            },
            Layer::Batchnorm { gamma, beta, .. } => LayerState::Batchnorm {
                gamma: Slot::new(kind, gamma.shape()),
                beta: Slot::new(kind, beta.shape()),
            },
            Layer::Residual { inner } => LayerState::Residual {
                inner: inner
                    .iter()
                    .map(|l| LayerState::for_layer(l, kind))
                    .collect(),
            },
            _ => LayerState::None,
        }
    }
}

/// Optimizer memory for a whole network plus the global step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    layers: Vec<LayerState>,
    pub step: u64,
}

impl OptimState {
    pub fn init(net: &Network, kind: &OptimizerKind) -> Self {
        OptimState {
            layers: net
                .layers
                .iter()
                .map(|l| LayerState::for_layer(l, kind))
                .collect(),
            step: 0,
        }
    }
}

/// One Nesterov-momentum step:
/// `v' = mu*v - lr*grad; param' = param + mu*v' - lr*grad`.
pub fn sgd_nesterov_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    mu: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::dims("sgd step", param.shape(), grad.shape()));
    }
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = mu * *v - lr * g;
        *p += mu * *v - lr * g;
    }
    Ok(())
}

/// One AMSGrad step without bias correction:
/// `m' = b1*m + (1-b1)*g; v' = b2*v + (1-b2)*g^2; vhat' = max(vhat, v');
/// param' = param - lr*m'/(sqrt(vhat') + eps)`.
#[allow(clippy::too_many_arguments)]
pub fn amsgrad_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    vhat: &mut Tensor,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if param.shape() != grad.shape()
        || param.shape() != m.shape()
        || param.shape() != v.shape()
        || param.shape() != vhat.shape()
    {
        return Err(Error::dims("amsgrad step", param.shape(), grad.shape()));
    }
    for i in 0..param.len() {
        let g = grad.data()[i];
        let mi = beta1 * m.data()[i] + (1.0 - beta1) * g;
        let vi = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
        let vh = vhat.data()[i].max(vi);
        m.data_mut()[i] = mi;
        v.data_mut()[i] = vi;
        vhat.data_mut()[i] = vh;
        param.data_mut()[i] -= lr * mi / (vh.sqrt() + eps);
    }
    Ok(())
}

fn update_tensor(
    kind: &OptimizerKind,
    lr_scale: f64,
    param: &mut Tensor,
    grad: &Tensor,
    slot: &mut Slot,
) -> Result<()> {
    match (kind, slot) {
        (OptimizerKind::SgdNesterov { lr, momentum }, Slot::Sgd { velocity }) => {
            sgd_nesterov_step(param, grad, velocity, lr * lr_scale, *momentum)
        }
        (
            OptimizerKind::Amsgrad {
                lr,
                beta1,
                beta2,
                eps,
            },
            Slot::Ams { m, v, vhat },
        ) => amsgrad_step(param, grad, m, v, vhat, lr * lr_scale, *beta1, *beta2, *eps),
        _ => Err(Error::CacheMismatch("optimizer slot does not match optimizer kind")),
    }
}

fn apply_layer_update(
    layer: &mut Layer,
    grads: &ParamGrads,
    state: &mut LayerState,
    kind: &OptimizerKind,
    lr_scale: f64,
) -> Result<()> {
    match (layer, grads, state) {
        (Layer::Dense { w, b }, ParamGrads::Dense { dw, db }, LayerState::Dense { w: sw, b: sb }) => {
            update_tensor(kind, lr_scale, w, dw, sw)?;
            update_tensor(kind, lr_scale, b, db, sb)
        }
        (
            Layer::Conv2d { f, b, .. },
            ParamGrads::Conv { df, db },
            LayerState::Conv { f: sf, b: sb },
        ) => {
            update_tensor(kind, lr_scale, f, df, sf)?;
            update_tensor(kind, lr_scale, b, db, sb)
        }
        (
            Layer::Batchnorm { gamma, beta, .. },
            ParamGrads::Batchnorm { dgamma, dbeta },
            LayerState::Batchnorm {
                gamma: sg,
                beta: sb,
            },
        ) => {
            update_tensor(kind, lr_scale, gamma, dgamma, sg)?;
            update_tensor(kind, lr_scale, beta, dbeta, sb)
        }
        (
            Layer::Residual { inner },
            ParamGrads::Residual { inner: ginner },
            LayerState::Residual { inner: sinner },
        ) => {
            if inner.len() != ginner.len() || inner.len() != sinner.len() {
                return Err(Error::CacheMismatch("residual update arity mismatch"));
            }
            for ((l, g), s) in inner.iter_mut().zip(ginner).zip(sinner) {
                apply_layer_update(l, g, s, kind, lr_scale)?;
            }
            Ok(())
        }
        (Layer::Relu | Layer::Maxpool { .. } | Layer::Dropout { .. } | Layer::Softmax, ParamGrads::None, LayerState::None) => {
            Ok(())
        }
        _ => Err(Error::CacheMismatch("gradients do not match network structure")),
    }
}

/// Apply one optimizer update across all parameters.
pub fn apply_update(
    net: &mut Network,
    grads: &[ParamGrads],
    state: &mut OptimState,
    kind: &OptimizerKind,
    lr_scale: f64,
) -> Result<()> {
    if grads.len() != net.layers.len() || state.layers.len() != net.layers.len() {
        return Err(Error::CacheMismatch("gradient/state count mismatch"));
    }
    for ((layer, g), s) in net.layers.iter_mut().zip(grads).zip(state.layers.iter_mut()) {
        apply_layer_update(layer, g, s, kind, lr_scale)?;
    }
    state.step += 1;
    Ok(())
}

/// Everything the training loop needs to know.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Multiplicative learning-rate drops applied at the start of the named
    /// 1-based epochs; epochs must be strictly increasing.
    pub lr_schedule: Vec<(usize, f64)>,
    pub constraint: Option<ConstraintConfig>,
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, seed: u64, optimizer: OptimizerKind) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            seed,
            optimizer,
            lr_schedule: Vec::new(),
            constraint: None,
            shuffle: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.optimizer.validate()?;
        let mut prev = 0usize;
        for (epoch, mult) in &self.lr_schedule {
            if *epoch <= prev {
                return Err(Error::Config(
                    "lr_schedule epochs must be strictly increasing and >= 1".into(),
                ));
            }
            if !(*mult > 0.0 && mult.is_finite()) {
                return Err(Error::Config(format!(
                    "lr_schedule multiplier must be positive, got {mult}"
                )));
            }
            prev = *epoch;
        }
        if let Some(c) = &self.constraint {
            c.validate()?;
        }
        Ok(())
    }
}

/// One epoch's summary in the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Whole-network Lipschitz bound under the constraint's norm, recorded
    /// when a constraint (even an unbounded one) names a norm.
    pub bound: Option<f64>,
}

/// Per-epoch loss curve plus optional bound curve.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `epoch,train_loss[,bound]` rows; the bound column appears only when
    /// at least one record carries a bound.
    pub fn to_csv(&self) -> String {
        let with_bound = self.epochs.iter().any(|e| e.bound.is_some());
        let mut out = String::from(if with_bound {
            "epoch,train_loss,bound\n"
        } else {
            "epoch,train_loss\n"
        });
        for e in &self.epochs {
            if with_bound {
                let b = e.bound.map_or(String::new(), |b| b.to_string());
                out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, b));
            } else {
                out.push_str(&format!("{},{}\n", e.epoch, e.train_loss));
            }
        }
        out
    }
}

fn gather_rows(t: &Tensor, order: &[usize]) -> Result<Tensor> {
    let n = t.shape()[0];
    let feat: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(order.len() * feat);
    for &i in order {
        if i >= n {
            return Err(Error::InvalidShape(format!("row {i} out of range {n}")));
        }
        data.extend_from_slice(&t.data()[i * feat..(i + 1) * feat]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = order.len();
    Tensor::new(shape, data)
}

/// The norm used for per-epoch history bounds: the constraint's norm, with
/// spectral estimates run to convergence rather than the training budget.
fn history_norm(c: &ConstraintConfig) -> NormKind {
    match &c.norm {
        NormKind::L2(_) => NormKind::L2(L2Cfg::audit()),
        other => other.clone(),
    }
}

/// Train the network in place; see [`train_with_observer`].
pub fn train(
    net: &mut Network,
    inputs: &Tensor,
    targets: &Tensor,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    train_with_observer(net, inputs, targets, cfg, |_, _| Ok(()))
}

/// Projected stochastic gradient training. For every minibatch: forward in
/// train mode, loss, backward, optimizer update, then projection (when a
/// bounded constraint is configured). The observer runs after each
/// completed step (post-projection) and can fail the run.
///
/// `inputs` is `(N, ...feature)`; `targets` matches the loss's expectation
/// (same shape as outputs for mse, class indices of shape `(N)` for
/// cross-entropy).
pub fn train_with_observer(
    net: &mut Network,
    inputs: &Tensor,
    targets: &Tensor,
    cfg: &TrainConfig,
    mut observer: impl FnMut(u64, &Network) -> Result<()>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let n = inputs.shape()[0];
    if inputs.rank() < 2 {
        return Err(Error::InvalidShape(format!(
            "inputs need a batch axis plus features, got {:?}",
            inputs.shape()
        )));
    }
    if targets.shape()[0] != n {
        return Err(Error::dims("dataset", inputs.shape(), targets.shape()));
    }
    let feat_shape = inputs.shape()[1..].to_vec();
    net.output_shape(&feat_shape)?;

    let mut main_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut power_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut bound_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x2545_F491_4F6C_DD1D);

    let mut opt_state = OptimState::init(net, &cfg.optimizer);
    let active_constraint = cfg
        .constraint
        .as_ref()
        .filter(|c| !c.is_unbounded())
        .cloned();
    let mut power_state = match &active_constraint {
        Some(c) if matches!(c.norm, NormKind::L2(_)) => {
            PowerState::init_for(net, &feat_shape, &mut power_rng)?
        }
        _ => PowerState::new(),
    };

    let mut history = TrainHistory::default();
    let mut lr_scale = 1.0;
    let mut schedule = cfg.lr_schedule.iter().peekable();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.epochs {
        while let Some((e, m)) = schedule.peek() {
            if *e <= epoch {
                lr_scale *= m;
                schedule.next();
            } else {
                break;
            }
        }
        if cfg.shuffle {
            order.shuffle(&mut main_rng);
        }
        let mut loss_acc = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = gather_rows(inputs, batch)?;
            let yb = gather_rows(targets, batch)?;
            let (out, caches) = network_forward(net, &xb, Mode::Train, &mut main_rng)?;
            let (loss, grad) = compute_loss(net.loss, &out, &yb)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: opt_state.step,
                });
            }
            let (_, pgrads) = network_backward(net, &caches, &grad)?;
            apply_update(net, &pgrads, &mut opt_state, &cfg.optimizer, lr_scale)?;
            if let Some(c) = &active_constraint {
                constrain_network(net, c, &mut power_state, &mut power_rng)?;
            }
            observer(opt_state.step, net)?;
            loss_acc += loss * batch.len() as f64;
        }
        let train_loss = loss_acc / n as f64;
        let bound = match &cfg.constraint {
            Some(c) => Some(
                network_lipschitz(net, &history_norm(c), &feat_shape, false, &mut bound_rng)?
                    .network_bound,
            ),
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            bound,
        });
    }
    Ok(history)
}
