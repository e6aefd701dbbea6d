//! Model serialisation, dataset CSV handling, and synthetic data
//! generation.
//!
//! Models are stored as a single JSON document with parameters as nested
//! arrays in shortest round-trip decimal form, so saving and re-loading
//! reproduces every 64-bit value exactly and re-saving reproduces the file
//! byte for byte.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Layer, LossKind, Network};
use crate::tensor::{ConvGeometry, Tensor};

/// Version written to and accepted from model documents.
pub const FORMAT_VERSION: u64 = 1;

/// A training or evaluation set: `inputs` is `(N, ...)`, `targets` matches
/// the loss (same leading dimension).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.shape()[0] != targets.shape()[0] {
            return Err(Error::dims("dataset", inputs.shape(), targets.shape()));
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false // leading dimension is >= 1 by tensor invariant
    }
}

/// The target function of the synthetic task.
pub fn synthetic_target(x: f64) -> f64 {
    x.sin() + (19.0 * x).cos() / 5.0
}

/// `n` points with x drawn uniformly from `[lo, hi)` and
/// `y = sin(x) + cos(19x)/5`; deterministic per seed.
pub fn gen_synthetic(n: usize, lo: f64, hi: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("invalid range [{lo}, {hi})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| synthetic_target(x)).collect();
    Dataset::new(Tensor::new(vec![n, 1], xs)?, Tensor::new(vec![n, 1], ys)?)
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u64,
    /// Declares the flattening convention for all nested parameter arrays.
    layout: String,
    input_shape: Vec<usize>,
    loss: String,
    layers: Vec<LayerRecord>,
}

const LAYOUT: &str = "channels_first_row_major";

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerRecord {
    Dense {
        w: Vec<Vec<f64>>,
        b: Vec<f64>,
    },
    Conv2d {
        f: Vec<Vec<Vec<Vec<f64>>>>,
        b: Vec<f64>,
        stride: [usize; 2],
        padding: [usize; 2],
        kernel: [usize; 2],
    },
    Relu,
    Maxpool {
        window: [usize; 2],
        stride: [usize; 2],
    },
    Batchnorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        epsilon: f64,
        momentum: f64,
    },
    Dropout {
        retain_prob: f64,
    },
    Residual {
        inner: Vec<LayerRecord>,
    },
    Softmax,
}

fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (r, c) = t.matrix_dims()?;
    Ok((0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect())
}

fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(rows)
}

fn to_nested4(t: &Tensor) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
    match t.shape() {
        &[a, b, c, d] => {
            let mut out = Vec::with_capacity(a);
            for i in 0..a {
                let mut l1 = Vec::with_capacity(b);
                for j in 0..b {
                    let mut l2 = Vec::with_capacity(c);
                    for k in 0..c {
                        let base = ((i * b + j) * c + k) * d;
                        l2.push(t.data()[base..base + d].to_vec());
                    }
                    l1.push(l2);
                }
                out.push(l1);
            }
            Ok(out)
        }
        other => Err(Error::InvalidShape(format!(
            "expected rank-4 tensor, got {other:?}"
        ))),
    }
}

fn from_nested4(v: &[Vec<Vec<Vec<f64>>>]) -> Result<Tensor> {
    let a = v.len();
    let b = v.first().map_or(0, |x| x.len());
    let c = v.first().and_then(|x| x.first()).map_or(0, |x| x.len());
    let d = v
        .first()
        .and_then(|x| x.first())
        .and_then(|x| x.first())
        .map_or(0, |x| x.len());
    let mut data = Vec::with_capacity(a * b * c * d);
    for l1 in v {
        if l1.len() != b {
            return Err(Error::Format("ragged filter array".into()));
        }
        for l2 in l1 {
            if l2.len() != c {
                return Err(Error::Format("ragged filter array".into()));
            }
            for row in l2 {
                if row.len() != d {
                    return Err(Error::Format("ragged filter array".into()));
                }
                data.extend_from_slice(row);
            }
        }
    }
    Tensor::new(vec![a, b, c, d], data)
}

fn vec_tensor(v: &[f64]) -> Result<Tensor> {
    Tensor::from_vec(v.to_vec())
}

fn layer_to_record(layer: &Layer) -> Result<LayerRecord> {
    Ok(match layer {
        Layer::Dense { w, b } => LayerRecord::Dense {
            w: to_rows(w)?,
            b: b.data().to_vec(),
        },
        Layer::Conv2d { f, b, geom } => LayerRecord::Conv2d {
            f: to_nested4(f)?,
            b: b.data().to_vec(),
            stride: [geom.stride.0, geom.stride.1],
            padding: [geom.padding.0, geom.padding.1],
            kernel: [geom.kernel.0, geom.kernel.1],
        },
        Layer::Relu => LayerRecord::Relu,
        Layer::Maxpool { window, stride } => LayerRecord::Maxpool {
            window: [window.0, window.1],
            stride: [stride.0, stride.1],
        },
        Layer::Batchnorm {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon,
            momentum,
        } => LayerRecord::Batchnorm {
            gamma: gamma.data().to_vec(),
            beta: beta.data().to_vec(),
            running_mean: running_mean.data().to_vec(),
            running_var: running_var.data().to_vec(),
            epsilon: *epsilon,
            momentum: *momentum,
        },
        Layer::Dropout { retain_prob } => LayerRecord::Dropout {
            retain_prob: *retain_prob,
        },
        Layer::Residual { inner } => LayerRecord::Residual {
            inner: inner.iter().map(layer_to_record).collect::<Result<_>>()?,
        },
        Layer::Softmax => LayerRecord::Softmax,
    })
}

fn record_to_layer(record: &LayerRecord) -> Result<Layer> {
    Ok(match record {
        LayerRecord::Dense { w, b } => Layer::Dense {
            w: from_rows(w)?,
            b: vec_tensor(b)?,
        },
        LayerRecord::Conv2d {
            f,
            b,
            stride,
            padding,
            kernel,
        } => {
            let f = from_nested4(f)?;
            if (f.shape()[2], f.shape()[3]) != (kernel[0], kernel[1]) {
                return Err(Error::Format(format!(
                    "conv kernel field {kernel:?} disagrees with filter shape {:?}",
                    f.shape()
                )));
            }
            Layer::Conv2d {
                f,
                b: vec_tensor(b)?,
                geom: ConvGeometry::new(
                    (stride[0], stride[1]),
                    (padding[0], padding[1]),
                    (kernel[0], kernel[1]),
                ),
            }
        }
        LayerRecord::Relu => Layer::Relu,
        LayerRecord::Maxpool { window, stride } => Layer::Maxpool {
            window: (window[0], window[1]),
            stride: (stride[0], stride[1]),
        },
        LayerRecord::Batchnorm {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon,
            momentum,
        } => {
            let c = gamma.len();
            if beta.len() != c || running_mean.len() != c || running_var.len() != c {
                return Err(Error::Format(
                    "batchnorm parameter vectors have unequal lengths".into(),
                ));
            }
            if !(*epsilon > 0.0) {
                return Err(Error::Format(format!("batchnorm epsilon must be > 0, got {epsilon}")));
            }
            if !(*momentum > 0.0 && *momentum < 1.0) {
                return Err(Error::Format(format!(
                    "batchnorm momentum must be in (0,1), got {momentum}"
                )));
            }
            if running_var.iter().any(|&v| v < 0.0) {
                return Err(Error::Format("batchnorm running variance must be >= 0".into()));
            }
            Layer::Batchnorm {
                gamma: vec_tensor(gamma)?,
                beta: vec_tensor(beta)?,
                running_mean: vec_tensor(running_mean)?,
                running_var: vec_tensor(running_var)?,
                epsilon: *epsilon,
                momentum: *momentum,
            }
        }
        LayerRecord::Dropout { retain_prob } => {
            if !(*retain_prob > 0.0 && *retain_prob <= 1.0) {
                return Err(Error::Format(format!(
                    "dropout retain probability must be in (0,1], got {retain_prob}"
                )));
            }
            Layer::Dropout {
                retain_prob: *retain_prob,
            }
        }
        LayerRecord::Residual { inner } => Layer::Residual {
            inner: inner.iter().map(record_to_layer).collect::<Result<_>>()?,
        },
        LayerRecord::Softmax => Layer::Softmax,
    })
}

fn loss_name(loss: LossKind) -> &'static str {
    match loss {
        LossKind::Mse => "mse",
        LossKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
    }
}

fn loss_from_name(name: &str) -> Result<LossKind> {
    match name {
        "mse" => Ok(LossKind::Mse),
        "softmax_cross_entropy" => Ok(LossKind::SoftmaxCrossEntropy),
        other => Err(Error::Format(format!("unknown loss kind `{other}`"))),
    }
}

fn check_finite(layer: &Layer) -> Result<()> {
    let all = |t: &Tensor| -> Result<()> {
        if t.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(
                "refusing to save non-finite parameters".into(),
            ))
        }
    };
    match layer {
        Layer::Dense { w, b } => {
            all(w)?;
            all(b)
        }
        Layer::Conv2d { f, b, .. } => {
            all(f)?;
            all(b)
        }
        Layer::Batchnorm {
            gamma,
            beta,
            running_mean,
            running_var,
            ..
        } => {
            all(gamma)?;
            all(beta)?;
            all(running_mean)?;
            all(running_var)
        }
        Layer::Residual { inner } => inner.iter().try_for_each(check_finite),
        _ => Ok(()),
    }
}

/// Serialise a network and its declared input feature shape to JSON.
pub fn save_model(net: &Network, input_shape: &[usize], path: &Path) -> Result<()> {
    net.output_shape(input_shape)?;
    net.layers.iter().try_for_each(check_finite)?;
    let doc = ModelDocument {
        format_version: FORMAT_VERSION,
        layout: LAYOUT.to_string(),
        input_shape: input_shape.to_vec(),
        loss: loss_name(net.loss).to_string(),
        layers: net.layers.iter().map(layer_to_record).collect::<Result<_>>()?,
    };
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load a network and its input feature shape, validating version, layer
/// structure and shape consistency.
pub fn load_model(path: &Path) -> Result<(Network, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("missing format_version".into()))?;
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found,
            supported: FORMAT_VERSION,
        });
    }
    let doc: ModelDocument =
        serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
    if doc.layout != LAYOUT {
        return Err(Error::Format(format!(
            "unsupported layout `{}`, expected `{LAYOUT}`",
            doc.layout
        )));
    }
    let net = Network::new(
        doc.layers.iter().map(record_to_layer).collect::<Result<_>>()?,
        loss_from_name(&doc.loss)?,
    );
    net.output_shape(&doc.input_shape)?;
    Ok((net, doc.input_shape))
}

/// Two comma-separated columns, one `x,y` row per point, no header, full
/// round-trip decimal precision.
pub fn write_predictions_csv(xs: &[f64], ys: &[f64], path: &Path) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::dims("prediction columns", &[xs.len()], &[ys.len()]));
    }
    let mut out = String::new();
    for (x, y) in xs.iter().zip(ys) {
        out.push_str(&format!("{x},{y}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a two-column CSV written by [`write_predictions_csv`] (or the data
/// generator) back into a dataset of shape `(N,1)` / `(N,1)`.
pub fn read_xy_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("not a number: `{s}`"),
            })
        };
        match line.split_once(',') {
            Some((a, b)) => {
                xs.push(parse(a)?);
                ys.push(parse(b)?);
            }
            None => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "expected two comma-separated columns".into(),
                })
            }
        }
    }
    if xs.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "file contains no data rows".into(),
        });
    }
    let n = xs.len();
    Dataset::new(Tensor::new(vec![n, 1], xs)?, Tensor::new(vec![n, 1], ys)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn synthetic_formula_and_range() {
        assert!((synthetic_target(0.0) - 0.2).abs() < 1e-15);
        let ds = gen_synthetic(1000, -5.0, 5.0, 42).unwrap();
        assert_eq!(ds.len(), 1000);
        for (x, y) in ds.inputs.data().iter().zip(ds.targets.data()) {
            assert!(*x >= -5.0 && *x < 5.0);
            assert!((y - synthetic_target(*x)).abs() < 1e-15);
            assert!(y.abs() <= 1.2);
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_validates() {
        let a = gen_synthetic(10, -1.0, 1.0, 7).unwrap();
        let b = gen_synthetic(10, -1.0, 1.0, 7).unwrap();
        assert_eq!(a, b);
        assert!(gen_synthetic(0, -1.0, 1.0, 7).is_err());
        assert!(gen_synthetic(5, 2.0, 2.0, 7).is_err());
        assert!(gen_synthetic(5, 3.0, -3.0, 7).is_err());
    }

    fn mixed_net() -> Network {
        Network::new(
            vec![
                Layer::Dense {
                    w: t(&[3, 2], &[0.1, -0.2, 0.3, 0.4, 1.0 / 3.0, -7.5]),
                    b: t(&[3], &[0.0, 0.25, -1.0]),
                },
                Layer::Relu,
                Layer::Batchnorm {
                    gamma: t(&[3], &[1.0, 0.5, 2.0]),
                    beta: t(&[3], &[0.0, 0.1, -0.1]),
                    running_mean: t(&[3], &[0.01, 0.02, 0.03]),
                    running_var: t(&[3], &[1.0, 0.9, 1.1]),
                    epsilon: 1e-5,
                    momentum: 0.1,
                },
                Layer::Dropout { retain_prob: 0.75 },
                Layer::Residual {
                    inner: vec![
                        Layer::Dense {
                            w: t(&[3, 3], &[0.1; 9]),
                            b: t(&[3], &[0.0; 3]),
                        },
                        Layer::Relu,
                    ],
                },
                Layer::Softmax,
            ],
            LossKind::Mse,
        )
    }

    fn conv_net() -> Network {
        Network::new(
            vec![
                Layer::Conv2d {
                    f: t(&[2, 1, 2, 2], &[0.5, -0.25, 1.0 / 7.0, 2.0, 0.1, 0.2, 0.3, 0.4]),
                    b: t(&[2], &[0.5, -0.5]),
                    geom: ConvGeometry::new((1, 1), (1, 1), (2, 2)),
                },
                Layer::Relu,
                Layer::Maxpool {
                    window: (2, 2),
                    stride: (2, 2),
                },
            ],
            LossKind::Mse,
        )
    }

    #[test]
    fn model_round_trip_is_exact_and_byte_stable() {
        let dir = tempdir().unwrap();
        for (name, net, shape) in [
            ("mixed", mixed_net(), vec![2usize]),
            ("conv", conv_net(), vec![1usize, 4, 4]),
            ("empty", Network::new(vec![], LossKind::Mse), vec![3usize]),
        ] {
            let p1 = dir.path().join(format!("{name}-1.json"));
            let p2 = dir.path().join(format!("{name}-2.json"));
            save_model(&net, &shape, &p1).unwrap();
            let (loaded, loaded_shape) = load_model(&p1).unwrap();
            assert_eq!(loaded, net, "{name}");
            assert_eq!(loaded_shape, shape);
            save_model(&loaded, &loaded_shape, &p2).unwrap();
            assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap(), "{name}");
        }
    }

    #[test]
    fn audited_norms_survive_round_trip() {
        use crate::norms::{network_lipschitz, NormKind};
        use rand::rngs::SmallRng;
        use rand::SeedableRng;
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.json");
        let net = mixed_net();
        save_model(&net, &[2], &path).unwrap();
        let (loaded, _) = load_model(&path).unwrap();
        let mut r1 = SmallRng::seed_from_u64(1);
        let mut r2 = SmallRng::seed_from_u64(1);
        let a = network_lipschitz(&net, &NormKind::Linf, &[2], false, &mut r1).unwrap();
        let b = network_lipschitz(&loaded, &NormKind::Linf, &[2], false, &mut r2).unwrap();
        assert_eq!(a.network_bound, b.network_bound);
    }

    #[test]
    fn unknown_layer_kind_is_named_in_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(
            &path,
            r#"{"format_version":1,"layout":"channels_first_row_major","input_shape":[1],
               "loss":"mse","layers":[{"kind":"frobnicate"}]}"#,
        )
        .unwrap();
        let err = load_model(&path).unwrap_err().to_string();
        assert!(err.contains("frobnicate"), "{err}");
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v99.json");
        fs::write(
            &path,
            r#"{"format_version":99,"layout":"channels_first_row_major","input_shape":[1],
               "loss":"mse","layers":[]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::Version { found: 99, .. })
        ));
    }

    #[test]
    fn save_rejects_non_finite_parameters() {
        let dir = tempdir().unwrap();
        let net = Network::new(
            vec![Layer::Dense {
                w: t(&[1, 1], &[f64::NAN]),
                b: t(&[1], &[0.0]),
            }],
            LossKind::Mse,
        );
        assert!(save_model(&net, &[1], &dir.path().join("nan.json")).is_err());
    }

    #[test]
    fn predictions_csv_format_and_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_predictions_csv(&[0.5], &[0.25], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "0.5,0.25\n");

        let xs: Vec<f64> = (0..100).map(|i| (i as f64) * 0.1 - 5.0).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| synthetic_target(x)).collect();
        write_predictions_csv(&xs, &ys, &path).unwrap();
        let ds = read_xy_csv(&path).unwrap();
        assert_eq!(ds.inputs.data(), &xs[..]);
        assert_eq!(ds.targets.data(), &ys[..]);
    }

    #[test]
    fn synthetic_set_round_trips_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let ds = gen_synthetic(1000, -5.0, 5.0, 9).unwrap();
        write_predictions_csv(ds.inputs.data(), ds.targets.data(), &path).unwrap();
        let back = read_xy_csv(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "1.0,2.0\nabc,1\n").unwrap();
        match read_xy_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, "1.0 2.0\n").unwrap();
        assert!(matches!(read_xy_csv(&path), Err(Error::Parse { line: 1, .. })));
    }
}
