//! Mini-batch MAE training with Adam, plateau learning-rate halving, early
//! stopping and best-checkpoint selection.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::degrade::{load_pairs, read_manifest, ImagePair, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::image::{normalize, GrayImage};
use crate::ops::mae_loss;
use crate::pipeline::{augment_pair, resize_to_multiple, AugmentationSpec, ResizeMode};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::unet::{backward, build, forward, Mode, UNetConfig, UNetParams};

pub const CHECKPOINT_NAME: &str = "best.ckpt";
pub const METRICS_NAME: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub plateau_factor: f64,
    /// LR halves once the no-improvement count exceeds this.
    pub plateau_patience: usize,
    /// Training stops once the no-improvement count reaches this.
    pub stop_patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Trailing fraction of the manifest held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub min_improvement_delta: f64,
    /// Off in single-thread mode so that logs are reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-4,
            plateau_factor: 0.5,
            plateau_patience: 3,
            stop_patience: 5,
            batch_size: 8,
            max_epochs: 100,
            val_fraction: 0.1,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            min_improvement_delta: 0.0,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "TrainConfig";
        let checks = [
            (self.lr_init > 0.0 && self.lr_init.is_finite(), "lr_init must be positive"),
            (self.plateau_factor > 0.0 && self.plateau_factor < 1.0, "plateau_factor must lie in (0, 1)"),
            (self.plateau_patience >= 1, "plateau_patience must be >= 1"),
            (self.stop_patience >= 1, "stop_patience must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.val_fraction > 0.0 && self.val_fraction < 1.0, "val_fraction must lie in (0, 1)"),
            ((0.0..1.0).contains(&self.adam_beta1), "adam_beta1 must lie in [0, 1)"),
            ((0.0..1.0).contains(&self.adam_beta2), "adam_beta2 must lie in [0, 1)"),
            (self.adam_eps > 0.0, "adam_eps must be positive"),
            (self.min_improvement_delta >= 0.0, "min_improvement_delta must be >= 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::invalid(OP, *msg)),
            None => Ok(()),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Optimizer steps taken.
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { v: m.clone(), m, t: 0 }
    }
}

/// One Adam update. Gradients are checked for NaN/inf before anything is
/// touched, so an aborted step leaves params and state unchanged.
pub fn adam_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    const OP: &str = "adam_step";
    if grads.len() != state.m.len() {
        return Err(Error::shape(OP, "parameter count", state.m.len(), grads.len()));
    }
    for (i, (g, m)) in grads.iter().zip(&state.m).enumerate() {
        g.expect_same_shape(m, OP)?;
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i} contains NaN or inf")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2): (T, T) = (lit(cfg.beta1), lit(cfg.beta2));
    let one = T::one();
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let (lr, eps): (T, T) = (lit(lr), lit(cfg.eps));
    let mut count = 0;
    for (i, p) in params.into_iter().enumerate() {
        count += 1;
        if i >= grads.len() {
            continue;
        }
        p.expect_same_shape(&grads[i], OP)?;
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((pv, &g), mv), vv) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *mv = b1 * *mv + (one - b1) * g;
            *vv = b2 * *vv + (one - b2) * g * g;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    if count != grads.len() {
        return Err(Error::shape(OP, "parameter count", grads.len(), count));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Plateau schedule and early stopping

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    ReduceLr,
    /// Returned even if the learning rate was also reduced this epoch.
    Stop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub best_val: f64,
    pub since_improve_lr: usize,
    pub since_improve_stop: usize,
    /// k in `lr = lr_init * factor^k`.
    pub reductions: u32,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Schedule {
            lr: cfg.lr_init,
            best_val: f64::INFINITY,
            since_improve_lr: 0,
            since_improve_stop: 0,
            reductions: 0,
        }
    }
}

/// Advance the automaton by one validation result.
pub fn schedule_and_stop(state: &mut Schedule, val_mae: f64, cfg: &TrainConfig) -> Decision {
    if val_mae < state.best_val - cfg.min_improvement_delta {
        state.best_val = val_mae;
        state.since_improve_lr = 0;
        state.since_improve_stop = 0;
        return Decision::Continue;
    }
    state.since_improve_lr += 1;
    state.since_improve_stop += 1;
    let mut decision = Decision::Continue;
    if state.since_improve_lr > cfg.plateau_patience {
        state.reductions += 1;
        state.lr = cfg.lr_init * cfg.plateau_factor.powi(state.reductions as i32);
        state.since_improve_lr = 0;
        decision = Decision::ReduceLr;
    }
    if state.since_improve_stop >= cfg.stop_patience {
        decision = Decision::Stop;
    }
    decision
}

// ---------------------------------------------------------------------------
// Metrics log

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<EpochRow>,
}

pub const METRICS_HEADER: &str = "epoch,train_mae,val_mae,lr,wall_seconds";

impl MetricsLog {
    pub fn push(&mut self, row: EpochRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(Error::invalid(
                    "MetricsLog::push",
                    format!("epoch {} does not follow {}", row.epoch, last.epoch),
                ));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        self.to_string()
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<MetricsLog> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::data(path, "missing metrics header"));
        }
        let mut log = MetricsLog::default();
        for (n, line) in lines.enumerate() {
            let bad = || Error::data(path, format!("row {}: malformed {line:?}", n + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            log.push(EpochRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_mae: num(f[1])?,
                val_mae: num(f[2])?,
                lr: num(f[3])?,
                wall_seconds: num(f[4])?,
            })?;
        }
        Ok(log)
    }
}

impl fmt::Display for MetricsLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{METRICS_HEADER}")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{},{}", r.epoch, r.train_mae, r.val_mae, r.lr, r.wall_seconds)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Epochs

pub struct TrainState<T> {
    /// Epochs completed.
    pub epoch: usize,
    pub schedule: Schedule,
    pub adam: AdamState<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: &UNetParams<T>, cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            schedule: Schedule::new(cfg),
            adam: AdamState::new(params.tensors()),
        }
    }
}

/// Stack compute-domain pairs into `(inputs, targets)` of shape (B, 1, H, W).
pub fn batch_tensors<T: Scalar>(pairs: &[&ImagePair]) -> Result<(Tensor<T>, Tensor<T>)> {
    const OP: &str = "batch_tensors";
    let first = pairs.first().ok_or_else(|| Error::invalid(OP, "empty batch"))?;
    let (h, w) = first.clean.dims();
    let mut inputs = Vec::with_capacity(pairs.len() * h * w);
    let mut targets = Vec::with_capacity(pairs.len() * h * w);
    for p in pairs {
        if p.degraded.dims() != (h, w) || p.clean.dims() != (h, w) {
            return Err(Error::shape(OP, "image dims", format!("{h}x{w}"), format!("{:?}", p.degraded.dims())));
        }
        inputs.extend(p.degraded.expect_compute(OP)?.iter().map(|&v| T::from_f64_lossy(v as f64)));
        targets.extend(p.clean.expect_compute(OP)?.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    let shape = [pairs.len(), 1, h, w];
    Ok((Tensor::from_vec(&shape, inputs)?, Tensor::from_vec(&shape, targets)?))
}

/// Pixel-weighted MAE of the network over a set, inference mode.
pub fn evaluate_mae<T: Scalar>(params: &UNetParams<T>, set: &[ImagePair], batch_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("evaluate_mae", "empty dataset"));
    }
    let refs: Vec<&ImagePair> = set.iter().collect();
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in refs.chunks(batch_size.max(1)) {
        let (x, y) = batch_tensors::<T>(chunk)?;
        let (out, _) = forward(params, &x, Mode::Infer)?;
        let (loss, _) = mae_loss(&out, &y)?;
        total += loss.to_f64_lossy() * y.len() as f64;
        count += y.len();
    }
    Ok(total / count as f64)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// One pass over `train` (seeded shuffle, per-sample augmentation, one Adam
/// step per batch) followed by a validation pass without augmentation.
pub fn run_epoch<T: Scalar>(
    params: &mut UNetParams<T>,
    state: &mut TrainState<T>,
    train: &[ImagePair],
    val: &[ImagePair],
    aug: &AugmentationSpec,
    cfg: &TrainConfig,
) -> Result<EpochRow> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("run_epoch", "training and validation sets must be non-empty"));
    }
    let started = Instant::now();
    let epoch = state.epoch + 1;
    let lr = state.schedule.lr;
    let adam = cfg.adam();
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let augmented: Vec<ImagePair> = order
        .iter()
        .map(|&i| augment_pair(&train[i], aug, rng.gen()))
        .collect::<Result<_>>()?;

    let refs: Vec<&ImagePair> = augmented.iter().collect();
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in refs.chunks(cfg.batch_size) {
        let (x, y) = batch_tensors::<T>(chunk)?;
        let (out, act) = forward(params, &x, Mode::Train)?;
        let (loss, grad) = mae_loss(&out, &y)?;
        let loss = loss.to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: training loss is {loss}")));
        }
        let grads = backward(params, &act.expect("train mode records activations"), &grad)?;
        adam_step(params.tensors_mut(), &grads.params, &mut state.adam, lr, &adam)
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, step {}: {msg}", state.adam.t + 1)),
                other => other,
            })?;
        total += loss * y.len() as f64;
        count += y.len();
    }
    let val_mae = evaluate_mae(params, val, cfg.batch_size)?;
    state.epoch = epoch;
    Ok(EpochRow {
        epoch,
        train_mae: total / count as f64,
        val_mae,
        lr,
        wall_seconds: if cfg.record_wall_time {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        },
    })
}

// ---------------------------------------------------------------------------
// Datasets on disk and the full procedure

/// Normalize a storage pair and bring it to network-compatible dims.
pub fn prepare_pair(pair: &ImagePair, multiple: usize) -> Result<ImagePair> {
    let to_unit = |img: &GrayImage| -> Result<GrayImage> {
        let unit = if img.storage().is_some() { normalize(img)? } else { img.clone() };
        Ok(resize_to_multiple(&unit, multiple, ResizeMode::Interpolate)?.0)
    };
    Ok(ImagePair {
        degraded: to_unit(&pair.degraded)?,
        clean: to_unit(&pair.clean)?,
        seed: pair.seed,
        id: pair.id.clone(),
    })
}

/// Number of trailing pairs used for validation.
pub fn validation_count(n: usize, val_fraction: f64) -> usize {
    ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Load a generated dataset and split it: the last `val_fraction` of the
/// manifest order is the validation set.
pub fn load_split(dir: impl AsRef<Path>, cfg: &TrainConfig, multiple: usize) -> Result<(Vec<ImagePair>, Vec<ImagePair>)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_NAME);
    if !manifest_path.is_file() {
        return Err(Error::data(&manifest_path, "dataset manifest not found"));
    }
    let manifest = read_manifest(dir)?;
    if manifest.records.len() < 2 {
        return Err(Error::data(
            &manifest_path,
            format!("need at least 2 pairs to split, found {}", manifest.records.len()),
        ));
    }
    let mut pairs = load_pairs(dir, &manifest)?
        .iter()
        .map(|p| prepare_pair(p, multiple))
        .collect::<Result<Vec<_>>>()?;
    let n_val = validation_count(pairs.len(), cfg.val_fraction);
    let val = pairs.split_off(pairs.len() - n_val);
    Ok((pairs, val))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub log: MetricsLog,
    pub best_val: f64,
    pub best_epoch: usize,
    pub stop: StopReason,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub params: UNetParams<f32>,
}

/// Train on in-memory sets; the best-validation parameters are written to
/// `out_dir/best.ckpt` and the log to `out_dir/metrics.csv` after every epoch.
pub fn fit_pairs(
    model: &UNetConfig,
    cfg: &TrainConfig,
    aug: &AugmentationSpec,
    train: &[ImagePair],
    val: &[ImagePair],
    out_dir: impl AsRef<Path>,
    mut on_epoch: impl FnMut(&EpochRow, Decision),
) -> Result<FitOutcome> {
    cfg.validate()?;
    aug.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint = out_dir.join(CHECKPOINT_NAME);
    let metrics = out_dir.join(METRICS_NAME);

    let mut params = build::<f32>(model, cfg.seed)?;
    let mut state = TrainState::new(&params, cfg);
    let mut log = MetricsLog::default();
    let (mut best_val, mut best_epoch) = (f64::INFINITY, 0);
    let mut best_params = params.clone();
    let mut stop = StopReason::MaxEpochs;
    for _ in 0..cfg.max_epochs {
        let row = run_epoch(&mut params, &mut state, train, val, aug, cfg)?;
        if row.val_mae < best_val {
            best_val = row.val_mae;
            best_epoch = row.epoch;
            best_params = params.clone();
            let mut meta = BTreeMap::new();
            meta.insert("best_val_mae".to_string(), row.val_mae.to_string());
            meta.insert("epoch".to_string(), row.epoch.to_string());
            meta.insert("seed".to_string(), cfg.seed.to_string());
            save_checkpoint(&params, &meta, &checkpoint)?;
        }
        let decision = schedule_and_stop(&mut state.schedule, row.val_mae, cfg);
        on_epoch(&row, decision);
        log.push(row)?;
        std::fs::write(&metrics, log.to_csv()).map_err(|e| Error::io(&metrics, e))?;
        if decision == Decision::Stop {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    if log.rows.is_empty() {
        return Err(Error::invalid("fit", "max_epochs must be >= 1"));
    }
    Ok(FitOutcome {
        log,
        best_val,
        best_epoch,
        stop,
        checkpoint,
        metrics,
        params: best_params,
    })
}

/// Full procedure on a generated dataset directory.
pub fn fit(
    model: &UNetConfig,
    cfg: &TrainConfig,
    aug: &AugmentationSpec,
    data_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    on_epoch: impl FnMut(&EpochRow, Decision),
) -> Result<FitOutcome> {
    model.validate()?;
    let (train, val) = load_split(data_dir, cfg, model.divisor())?;
    fit_pairs(model, cfg, aug, &train, &val, out_dir, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::load_checkpoint;
    use crate::degrade::{build_dataset, DegradationConfig};
    use crate::unet::OutputActivation;

    /// Reference Adam on one scalar, written out longhand.
    fn scalar_adam(theta0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut m, mut v, mut theta) = (0.0, 0.0, theta0);
        let mut out = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
            out.push(theta);
        }
        out
    }

    fn run_scalar(theta0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
        let mut p = vec![Tensor::<f64>::full(&[1], theta0)];
        let mut st = AdamState::new(&p);
        grads
            .iter()
            .map(|&g| {
                adam_step(p.iter_mut(), &[Tensor::full(&[1], g)], &mut st, lr, &AdamConfig::default()).unwrap();
                p[0][0]
            })
            .collect()
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        let grads = [0.5, -1.25, 3.0, 0.0, 1e-3, -2.0, 0.75, 0.75, -0.1, 4.0];
        let got = run_scalar(0.3, &grads, 1e-2);
        for (a, b) in got.iter().zip(scalar_adam(0.3, &grads, 1e-2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let lr = 1e-3;
        for g in [0.05, -0.5, 7.0] {
            let got = run_scalar(1.0, &[g], lr)[0];
            assert!((got - (1.0 - lr * g.signum())).abs() < 1e-6 * lr);
        }
        assert_eq!(run_scalar(2.0, &[0.0, 0.0], lr), vec![2.0, 2.0]);
    }

    #[test]
    fn adam_rejects_nan_without_mutation() {
        let mut p = vec![Tensor::<f32>::full(&[2], 1.0)];
        let mut st = AdamState::new(&p);
        let g = Tensor::from_vec(&[2], vec![0.1, f32::NAN]).unwrap();
        let err = adam_step(p.iter_mut(), &[g], &mut st, 1e-3, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(st.t, 0);
        assert_eq!(p[0].data(), &[1.0, 1.0]);
    }

    /// Independent statement of the automaton: counts since the last
    /// improvement, with the LR counter rebased at each reduction.
    fn oracle(vals: &[f64], plateau: usize, stop: usize) -> Vec<Decision> {
        let mut best = f64::INFINITY;
        let mut last_improve = 0usize;
        let mut last_reduce = 0usize;
        let mut out = Vec::new();
        for (i, &v) in vals.iter().enumerate() {
            let epoch = i + 1;
            if v < best {
                best = v;
                last_improve = epoch;
                last_reduce = epoch;
                out.push(Decision::Continue);
                continue;
            }
            let mut d = Decision::Continue;
            if epoch - last_reduce > plateau {
                last_reduce = epoch;
                d = Decision::ReduceLr;
            }
            if epoch - last_improve >= stop {
                d = Decision::Stop;
            }
            out.push(d);
        }
        out
    }

    fn trace(vals: &[f64], cfg: &TrainConfig) -> (Vec<Decision>, Vec<f64>) {
        let mut s = Schedule::new(cfg);
        let mut lrs = Vec::new();
        let ds = vals
            .iter()
            .map(|&v| {
                let d = schedule_and_stop(&mut s, v, cfg);
                lrs.push(s.lr);
                d
            })
            .collect();
        (ds, lrs)
    }

    #[test]
    fn schedule_flat_trace() {
        let cfg = TrainConfig::default();
        let (ds, lrs) = trace(&[1.0; 7], &cfg);
        use Decision::*;
        assert_eq!(ds[..6], [Continue, Continue, Continue, Continue, ReduceLr, Stop]);
        assert_eq!(lrs[3], 1e-4);
        assert_eq!(lrs[4], 5e-5);
    }

    #[test]
    fn schedule_exhaustive_against_oracle() {
        // every sequence over three levels up to length 12, plus a few patiences
        for (plateau, stop) in [(3, 5), (1, 1), (2, 2), (1, 4)] {
            let cfg = TrainConfig {
                plateau_patience: plateau,
                stop_patience: stop,
                ..TrainConfig::default()
            };
            for len in 1..=12usize {
                for code in 0..3usize.pow(len as u32) {
                    let vals: Vec<f64> = (0..len).map(|i| ((code / 3usize.pow(i as u32)) % 3) as f64).collect();
                    let (ds, lrs) = trace(&vals, &cfg);
                    assert_eq!(ds, oracle(&vals, plateau, stop), "{vals:?}");
                    for lr in lrs {
                        let k = (1e-4f64 / lr).log2().round() as i32;
                        assert_eq!(lr, 1e-4 * 0.5f64.powi(k));
                    }
                }
            }
        }
    }

    #[test]
    fn equal_to_best_is_not_improvement() {
        let cfg = TrainConfig::default();
        let mut s = Schedule::new(&cfg);
        schedule_and_stop(&mut s, 0.5, &cfg);
        schedule_and_stop(&mut s, 0.5, &cfg);
        assert_eq!(s.since_improve_stop, 1);
        let cfg = TrainConfig {
            min_improvement_delta: 0.1,
            ..cfg
        };
        schedule_and_stop(&mut s, 0.45, &cfg);
        assert_eq!(s.since_improve_stop, 2);
    }

    #[test]
    fn metrics_log_round_trip() {
        let mut log = MetricsLog::default();
        log.push(EpochRow {
            epoch: 1,
            train_mae: 0.25,
            val_mae: 0.125,
            lr: 1e-4,
            wall_seconds: 0.0,
        })
        .unwrap();
        let text = log.to_csv();
        assert!(text.starts_with("epoch,train_mae,val_mae,lr,wall_seconds\n1,0.25,0.125,0.0001,0\n"));
        assert_eq!(MetricsLog::parse_csv(&text, Path::new("m.csv")).unwrap(), log);
        let again = log.rows[0].clone();
        assert!(log.push(again).is_err());
    }

    #[test]
    fn validation_split_sizes() {
        assert_eq!(validation_count(64, 0.125), 8);
        assert_eq!(validation_count(64, 0.1), 6);
        assert_eq!(validation_count(2, 0.1), 1);
        assert_eq!(validation_count(10, 0.9), 9);
    }

    #[test]
    fn fit_one_epoch_writes_checkpoint_and_log() {
        let data = tempfile::tempdir().unwrap();
        build_dataset(3, 32, 32, &DegradationConfig::default(), 5, data.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let model = UNetConfig {
            depth: 2,
            base_channels: 2,
            ..UNetConfig::default()
        };
        let cfg = TrainConfig {
            max_epochs: 1,
            batch_size: 16,
            record_wall_time: false,
            ..TrainConfig::default()
        };
        let outcome = fit(&model, &cfg, &AugmentationSpec::default(), data.path(), out.path(), |_, _| {}).unwrap();
        assert_eq!(outcome.log.rows.len(), 1);
        let ck = load_checkpoint(&outcome.checkpoint).unwrap();
        assert_eq!(ck.params, outcome.params);
        assert_eq!(ck.config().output_activation, OutputActivation::Sigmoid);
        let text = std::fs::read_to_string(&outcome.metrics).unwrap();
        assert_eq!(MetricsLog::parse_csv(&text, &outcome.metrics).unwrap(), outcome.log);
    }

    #[test]
    fn val_mae_is_repeatable_and_training_helps() {
        let data = tempfile::tempdir().unwrap();
        build_dataset(2, 32, 32, &DegradationConfig::disabled(), 9, data.path()).unwrap();
        let cfg = TrainConfig {
            record_wall_time: false,
            lr_init: 3e-3,
            ..TrainConfig::default()
        };
        let (train, val) = load_split(data.path(), &cfg, 4).unwrap();
        let model = UNetConfig {
            depth: 2,
            base_channels: 4,
            ..UNetConfig::default()
        };
        let mut params = build::<f32>(&model, 1).unwrap();
        let before = evaluate_mae(&params, &train, 8).unwrap();
        assert_eq!(before, evaluate_mae(&params, &train, 8).unwrap());
        let mut state = TrainState::new(&params, &cfg);
        let mut last = None;
        for _ in 0..15 {
            last = Some(run_epoch(&mut params, &mut state, &train, &val, &AugmentationSpec::disabled(), &cfg).unwrap());
        }
        assert_eq!(state.adam.t, 15);
        assert!(evaluate_mae(&params, &train, 8).unwrap() < before);
        assert_eq!(last.unwrap().epoch, 15);
    }

    #[test]
    fn missing_manifest_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_split(dir.path(), &TrainConfig::default(), 16).unwrap_err();
        assert!(err.to_string().contains("manifest.txt"), "{err}");
    }
}
