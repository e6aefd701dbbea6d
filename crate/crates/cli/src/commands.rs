//! One function per subcommand. Each validates its flags (usage errors),
//! then delegates to the library (runtime and I/O errors).

use std::path::{Path, PathBuf};

use lipnet::constraint::{constrain_network, strict_project, ConstraintConfig, PowerState};
use lipnet::io::{
    gen_synthetic, load_model, read_xy_csv, save_model, write_predictions_csv,
};
use lipnet::layers::Mode;
use lipnet::norms::{empirical_lipschitz, lipschitz_audit_csv, network_lipschitz, L2Cfg, NormKind};
use lipnet::tensor::VectorNorm;
use lipnet::optim::TrainConfig;
use lipnet::tensor::Tensor;
use lipnet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{self, ExperimentConfig};
use crate::{CliError, CliResult, NormFlag, PFlag};

/// Audit and projection draws must not depend on flag order or prior
/// commands, so every entry point seeds its own stream.
const AUDIT_SEED: u64 = 0xA0D1_7;
const PROJECT_SEED: u64 = 0x91_07;

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

/// Accepts a real bound or the token `inf` meaning unconstrained.
fn parse_lambda(raw: &str) -> CliResult<f64> {
    if raw.trim() == "inf" {
        return Ok(f64::INFINITY);
    }
    let value: f64 = raw
        .trim()
        .parse()
        .map_err(|_| usage(format!("--lambda must be a number or `inf`, got `{raw}`")))?;
    if !(value > 0.0) || value.is_nan() {
        return Err(usage(format!("--lambda must be > 0, got `{raw}`")));
    }
    Ok(value)
}

fn norm_kind(flag: NormFlag, l2: L2Cfg) -> NormKind {
    match flag {
        NormFlag::L1 => NormKind::L1,
        NormFlag::L2 => NormKind::L2(l2),
        NormFlag::Linf => NormKind::Linf,
    }
}

pub fn gen_data(n: usize, lo: f64, hi: f64, seed: u64, out: &Path) -> CliResult<()> {
    if n == 0 {
        return Err(usage("--n must be >= 1"));
    }
    if !(lo < hi) {
        return Err(usage(format!("--lo must be < --hi, got {lo} and {hi}")));
    }
    let ds = gen_synthetic(n, lo, hi, seed)?;
    write_predictions_csv(ds.inputs.data(), ds.targets.data(), out)?;
    Ok(())
}

pub struct TrainFlags {
    pub config: PathBuf,
    pub data: PathBuf,
    pub norm: Option<NormFlag>,
    pub lambda: String,
    pub seed: Option<u64>,
    pub out_model: PathBuf,
    pub out_history: Option<PathBuf>,
}

pub fn train(flags: &TrainFlags) -> CliResult<()> {
    let exp: ExperimentConfig = config::load(&flags.config)?;
    let lambda = parse_lambda(&flags.lambda)?;
    let constraint = if lambda.is_finite() {
        let Some(norm) = flags.norm else {
            return Err(usage("--norm is required when --lambda is finite"));
        };
        let mut c = ConstraintConfig::new(lambda, norm_kind(norm, L2Cfg::audit()));
        c.power_iters_train = exp.power_iters_train;
        Some(c)
    } else {
        None
    };

    let ds = read_xy_csv(&flags.data)?;
    if ds.inputs.shape()[1..] != [exp.input_dim] || ds.targets.shape()[1..] != [exp.output_dim] {
        return Err(CliError::Lib(Error::Config(format!(
            "data has {} input / {} target columns but config expects {} / {}",
            ds.inputs.shape()[1..].iter().product::<usize>(),
            ds.targets.shape()[1..].iter().product::<usize>(),
            exp.input_dim,
            exp.output_dim,
        ))));
    }

    let seed = flags.seed.unwrap_or(exp.seed);
    let mut net = exp.build_network(seed)?;
    let mut cfg = TrainConfig::new(
        exp.epochs,
        exp.batch_size.unwrap_or(ds.len()),
        seed,
        exp.optimizer_kind(),
    );
    cfg.lr_schedule = exp.lr_schedule.clone();
    cfg.constraint = constraint;
    cfg.shuffle = exp.shuffle;

    let history = lipnet::optim::train(&mut net, &ds.inputs, &ds.targets, &cfg)?;
    save_model(&net, &[exp.input_dim], &flags.out_model)?;
    if let Some(path) = &flags.out_history {
        std::fs::write(path, history.to_csv()).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

/// Inclusive `lo:hi:count` linspace; a single point sits at `lo`.
fn parse_grid(raw: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = raw.split(':').collect();
    let [lo, hi, count] = parts[..] else {
        return Err(usage(format!("--grid must be lo:hi:count, got `{raw}`")));
    };
    let lo: f64 = lo
        .parse()
        .map_err(|_| usage(format!("--grid lower bound `{lo}` is not a number")))?;
    let hi: f64 = hi
        .parse()
        .map_err(|_| usage(format!("--grid upper bound `{hi}` is not a number")))?;
    let count: usize = count
        .parse()
        .map_err(|_| usage(format!("--grid count `{count}` is not a positive integer")))?;
    if count == 0 {
        return Err(usage("--grid count must be >= 1"));
    }
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(usage(format!("--grid needs finite lo <= hi, got `{raw}`")));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let step = (hi - lo) / (count - 1) as f64;
    Ok((0..count).map(|i| lo + step * i as f64).collect())
}

pub fn predict(
    model: &Path,
    grid: Option<&str>,
    data: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    let xs: Vec<f64> = match (grid, data) {
        (Some(grid), None) => parse_grid(grid)?,
        (None, Some(data)) => {
            let ds = read_xy_csv(data)?;
            ds.inputs.data().to_vec()
        }
        _ => return Err(usage("exactly one of --grid and --data is required")),
    };

    let (mut net, input_shape) = load_model(model)?;
    if input_shape != [1] {
        return Err(CliError::Lib(Error::Config(format!(
            "prediction needs a scalar-input model, this one takes shape {input_shape:?}"
        ))));
    }
    let out_shape = net.output_shape(&input_shape)?;
    if out_shape != [1] {
        return Err(CliError::Lib(Error::Config(format!(
            "prediction needs a scalar-output model, this one produces shape {out_shape:?}"
        ))));
    }

    let batch = Tensor::new(vec![xs.len(), 1], xs.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (ys, _) = lipnet::layers::network_forward(&mut net, &batch, Mode::Eval, &mut rng)?;
    write_predictions_csv(&xs, ys.data(), out)?;
    Ok(())
}

pub fn audit(
    model: &Path,
    p: PFlag,
    dropout_scaled: bool,
    l2_iters: Option<usize>,
    out: Option<&Path>,
) -> CliResult<()> {
    let (net, input_shape) = load_model(model)?;
    let l2 = L2Cfg::new(l2_iters.unwrap_or(1000), 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(AUDIT_SEED);
    let mut report = |kind: NormKind| {
        network_lipschitz(&net, &kind, &input_shape, dropout_scaled, &mut rng)
    };
    let (r1, r2, rinf) = match p {
        PFlag::P1 => (Some(report(NormKind::L1)?), None, None),
        PFlag::P2 => (None, Some(report(NormKind::L2(l2))?), None),
        PFlag::Pinf => (None, None, Some(report(NormKind::Linf)?)),
        PFlag::All => {
            let r1 = report(NormKind::L1)?;
            let r2 = report(NormKind::L2(l2))?;
            let rinf = report(NormKind::Linf)?;
            (Some(r1), Some(r2), Some(rinf))
        }
    };
    let csv = lipschitz_audit_csv(r1.as_ref(), r2.as_ref(), rinf.as_ref())?;
    match out {
        Some(path) => std::fs::write(path, &csv).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?,
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn project(
    model: &Path,
    norm: NormFlag,
    lambda: &str,
    strict: bool,
    out: &Path,
) -> CliResult<()> {
    let lambda = parse_lambda(lambda)?;
    let (mut net, input_shape) = load_model(model)?;
    let mut cfg = ConstraintConfig::new(lambda, norm_kind(norm, L2Cfg::audit()));
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECT_SEED);
    if strict {
        strict_project(&mut net, &cfg, &input_shape, &mut rng)?;
    } else {
        // One-shot projection, so spend audit-grade iterations instead of
        // the warm-started per-step budget.
        cfg.power_iters_train = L2Cfg::audit().max_iters;
        let mut state = PowerState::init_for(&net, &input_shape, &mut rng)?;
        constrain_network(&mut net, &cfg, &mut state, &mut rng)?;
    }
    save_model(&net, &input_shape, out)?;
    Ok(())
}

/// `lo:hi` sampling box for the empirical probe.
fn parse_box(raw: &str) -> CliResult<(f64, f64)> {
    let Some((lo, hi)) = raw.split_once(':') else {
        return Err(usage(format!("--box must be lo:hi, got `{raw}`")));
    };
    let lo: f64 = lo
        .parse()
        .map_err(|_| usage(format!("--box lower bound `{lo}` is not a number")))?;
    let hi: f64 = hi
        .parse()
        .map_err(|_| usage(format!("--box upper bound `{hi}` is not a number")))?;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(usage(format!("--box needs finite lo < hi, got `{raw}`")));
    }
    Ok((lo, hi))
}

pub fn lipcheck(
    model: &Path,
    p: PFlag,
    pairs: usize,
    box_domain: &str,
    seed: u64,
) -> CliResult<()> {
    if pairs == 0 {
        return Err(usage("--pairs must be >= 1"));
    }
    let (kind, vector) = match p {
        PFlag::P1 => (NormKind::L1, VectorNorm::L1),
        PFlag::P2 => (NormKind::L2(L2Cfg::audit()), VectorNorm::L2),
        PFlag::Pinf => (NormKind::Linf, VectorNorm::Linf),
        PFlag::All => return Err(usage("--p must be a single norm for lipcheck")),
    };
    let domain = parse_box(box_domain)?;
    let (net, input_shape) = load_model(model)?;

    let mut audit_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAAAA);
    let upper = network_lipschitz(&net, &kind, &input_shape, true, &mut audit_rng)?.network_bound;
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xEEEE);
    let lower = empirical_lipschitz(&net, vector, &input_shape, domain, pairs, &mut probe_rng)?;

    println!("empirical lower bound: {lower}");
    println!("audited upper bound: {upper}");
    // A piecewise-linear model can attain its certificate exactly, and the
    // probe and the product bound round differently; only excesses beyond
    // rounding noise count as violations.
    if lower > upper * (1.0 + 1e-9) + 1e-12 {
        return Err(CliError::Lib(Error::Numeric(format!(
            "empirical slope {lower} exceeds certified bound {upper}"
        ))));
    }
    Ok(())
}
