//! Experiment configuration: network architecture plus training
//! hyperparameters, loaded from a JSON file.

use std::path::Path;

use lipnet::layers::{glorot_init, Layer, LossKind, Network};
use lipnet::optim::OptimizerKind;
use lipnet::tensor::Tensor;
use lipnet::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    SgdNesterov {
        lr: f64,
        momentum: f64,
    },
    Amsgrad {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.99
}

fn default_eps() -> f64 {
    1e-8
}

/// Spread init for the first dense layer of a scalar-input network:
/// weights uniform in `[-w_scale, w_scale]`, biases chosen so each unit's
/// relu kink lands uniformly in `[kink_lo, kink_hi]`. Plain small-weight
/// initialisation leaves every first-layer feature nearly linear over the
/// data range, and gradient descent then takes thousands of epochs to grow
/// the weights that high-frequency structure needs.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirstLayerInit {
    pub w_scale: f64,
    pub kink_lo: f64,
    pub kink_hi: f64,
}

/// Fully-connected relu architecture and training settings for the
/// synthetic regression task.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Hidden layer widths; the network is dense-relu per entry followed
    /// by a linear output layer.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    /// Absent means full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub optimizer: OptimizerSpec,
    /// Multiplicative learning-rate drops at 1-based epochs.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Warm-started power iterations per training step under an l2 bound.
    #[serde(default = "default_one")]
    pub power_iters_train: usize,
    #[serde(default = "default_one")]
    pub input_dim: usize,
    #[serde(default = "default_one")]
    pub output_dim: usize,
    /// Optional spread init for the first layer; needs `input_dim == 1`.
    #[serde(default)]
    pub first_layer: Option<FirstLayerInit>,
}

/// `w[i] ~ U(-w_scale, w_scale)`, kink `x0 ~ U(kink_lo, kink_hi)`,
/// `b[i] = -w[i] * x0` so the kink sits at `x0` whatever the slope.
fn spread_init(
    units: usize,
    fl: &FirstLayerInit,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    use rand::Rng;
    let mut w = Vec::with_capacity(units);
    let mut b = Vec::with_capacity(units);
    for _ in 0..units {
        let slope = rng.random_range(-fl.w_scale..fl.w_scale);
        let kink = rng.random_range(fl.kink_lo..fl.kink_hi);
        w.push(slope);
        b.push(-slope * kink);
    }
    Ok((Tensor::new(vec![units, 1], w)?, Tensor::new(vec![units], b)?))
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("experiment config: {e}")))?;
    if cfg.hidden.iter().any(|&h| h == 0) || cfg.input_dim == 0 || cfg.output_dim == 0 {
        return Err(Error::Config("layer widths must be >= 1".into()));
    }
    if let Some(fl) = &cfg.first_layer {
        if cfg.input_dim != 1 {
            return Err(Error::Config(
                "first_layer init needs input_dim 1".into(),
            ));
        }
        if !(fl.w_scale > 0.0) || !fl.w_scale.is_finite() {
            return Err(Error::Config(format!(
                "first_layer w_scale must be finite and > 0, got {}",
                fl.w_scale
            )));
        }
        if !(fl.kink_lo < fl.kink_hi) || !fl.kink_lo.is_finite() || !fl.kink_hi.is_finite() {
            return Err(Error::Config(format!(
                "first_layer needs finite kink_lo < kink_hi, got {} and {}",
                fl.kink_lo, fl.kink_hi
            )));
        }
    }
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerSpec::SgdNesterov { lr, momentum } => OptimizerKind::SgdNesterov { lr, momentum },
            OptimizerSpec::Amsgrad { lr, beta1, beta2, eps } => OptimizerKind::Amsgrad {
                lr,
                beta1,
                beta2,
                eps,
            },
        }
    }

    /// Glorot-initialised dense-relu stack; seeded separately from the
    /// training loop so shuffling never perturbs the starting point.
    pub fn build_network(&self, seed: u64) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1217);
        let mut widths = vec![self.input_dim];
        widths.extend_from_slice(&self.hidden);
        widths.push(self.output_dim);
        let mut layers = Vec::new();
        for i in 0..widths.len() - 1 {
            let (w, b) = match (i, &self.first_layer) {
                (0, Some(fl)) => spread_init(widths[1], fl, &mut rng)?,
                _ => (
                    glorot_init(&[widths[i + 1], widths[i]], &mut rng)?,
                    Tensor::zeros(&[widths[i + 1]]),
                ),
            };
            layers.push(Layer::Dense { w, b });
            if i + 2 < widths.len() {
                layers.push(Layer::Relu);
            }
        }
        Ok(Network::new(layers, LossKind::Mse))
    }
}
