//! Optimization loop, early stopping and checkpoint persistence.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, NormStats, SplitSpec, WindowDataset};
use crate::error::{Error, Result};
use crate::eval::{MetricAccumulator, MetricReport};
use crate::nn::{Forward, ParamStore};
use crate::scinet::{compute_loss, ModelConfig, Scinet};
use crate::tensor::Tape;

/// Adam with bias correction. Moments are kept per parameter tensor, in
/// store order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients and clears them.
    /// A parameter without a gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, t) in params.tensors_mut().iter().enumerate() {
            if t.len() != self.first[i].len() {
                return Err(Error::Dimension(format!(
                    "parameter {i} has {} elements, optimizer moments have {}",
                    t.len(),
                    self.first[i].len()
                )));
            }
            if let Some(g) = t.grad() {
                if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric {
                        op: "adam_step",
                        index,
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let grad = tensor.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}

/// Rescales all gradients so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in params.tensors_mut() {
            if let Some(g) = t.grad().map(|g| g.iter().map(|v| v * scale).collect::<Vec<_>>()) {
                t.clear_grad();
                t.accumulate_grad(&g).expect("same length");
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub patience: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            lr_decay: 0.95,
            patience: 10,
            grad_clip: Some(5.0),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return bad(format!("lr_decay must be positive, got {}", self.lr_decay));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// Sample-weighted mean losses over one pass: per-stack L1 terms and their
/// sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub total: f64,
    pub components: Vec<f64>,
    pub samples: usize,
}

struct LossSums {
    total: f64,
    components: Vec<f64>,
    samples: usize,
}

impl LossSums {
    fn new(stacks: usize) -> Self {
        Self {
            total: 0.0,
            components: vec![0.0; stacks],
            samples: 0,
        }
    }

    fn add(&mut self, total: f64, components: &[f64], weight: usize) {
        let w = weight as f64;
        self.total += w * total;
        for (acc, c) in self.components.iter_mut().zip(components) {
            *acc += w * c;
        }
        self.samples += weight;
    }

    fn finish(self) -> EpochStats {
        let n = self.samples as f64;
        EpochStats {
            total: self.total / n,
            components: self.components.iter().map(|c| c / n).collect(),
            samples: self.samples,
        }
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// One shuffled pass over `dataset` with dropout active, updating the model
/// after every batch. `epoch` selects the shuffle and dropout streams.
pub fn train_epoch(
    model: &mut Scinet,
    dataset: &WindowDataset,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let shuffle_seed = rng.gen();
    let mut sums = LossSums::new(model.config().stacks);
    for (b, batch) in batch_iter(dataset, cfg.batch_size, true, shuffle_seed)?.enumerate() {
        let diverged = |model: &Scinet, cause: &dyn std::fmt::Display| {
            Error::Diverged(format!(
                "epoch {epoch}, batch {b}: {cause}; max |param| = {:e}",
                model.params().max_abs_value()
            ))
        };
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let x = tape.constant(batch.x);
        let y = tape.constant(batch.y);
        let step = (|| {
            let mut fwd = Forward {
                tape: &mut tape,
                params: &bound,
                rng: Some(&mut rng),
            };
            let out = model.forward(&mut fwd, x)?;
            let loss = compute_loss(&mut tape, &out.predictions, y)?;
            tape.backward(loss.total)?;
            Ok::<_, Error>(loss)
        })();
        let loss = match step {
            Ok(l) => l,
            Err(e @ Error::Numeric { .. }) => return Err(diverged(model, &e)),
            Err(e) => return Err(e),
        };
        let total = tape.value(loss.total).data()[0];
        let components: Vec<f64> = loss
            .components
            .iter()
            .map(|v| tape.value(*v).data()[0])
            .collect();
        model.params_mut().collect_grads(&tape, &bound)?;
        if let Some(max) = cfg.grad_clip {
            let norm = clip_grad_norm(model.params_mut(), max);
            if !norm.is_finite() {
                return Err(diverged(model, &"non-finite gradient norm"));
            }
        }
        opt.step(model.params_mut())
            .map_err(|e| diverged(model, &e))?;
        sums.add(total, &components, batch.indices.len());
    }
    Ok(sums.finish())
}

/// Loss terms over `dataset` in inference mode, without touching the model.
pub fn validation_loss(model: &Scinet, dataset: &WindowDataset, batch_size: usize) -> Result<EpochStats> {
    let mut sums = LossSums::new(model.config().stacks);
    for batch in batch_iter(dataset, batch_size, false, 0)? {
        let mut tape = Tape::new();
        let bound = model.params().bind_constants(&mut tape);
        let x = tape.constant(batch.x);
        let y = tape.constant(batch.y);
        let mut fwd = Forward {
            tape: &mut tape,
            params: &bound,
            rng: None,
        };
        let out = model.forward(&mut fwd, x)?;
        let loss = compute_loss(&mut tape, &out.predictions, y)?;
        let components: Vec<f64> = loss
            .components
            .iter()
            .map(|v| tape.value(*v).data()[0])
            .collect();
        sums.add(tape.value(loss.total).data()[0], &components, batch.indices.len());
    }
    Ok(sums.finish())
}

/// Forecast metrics of the final stack over every window of `dataset`.
/// With `scale`, predictions and targets are mapped back to the original
/// units first.
pub fn evaluate(
    model: &Scinet,
    dataset: &WindowDataset,
    batch_size: usize,
    scale: Option<&NormStats>,
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    for batch in batch_iter(dataset, batch_size, false, 0)? {
        let mut pred = model.predict(&batch.x)?;
        let mut truth = batch.y;
        if let Some(stats) = scale {
            stats.invert_tensor(&mut pred)?;
            stats.invert_tensor(&mut truth)?;
        }
        acc.update(&pred, &truth)?;
    }
    acc.finish()
}

/// True once the last `patience` entries bring no strict improvement over
/// the best value seen before them.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    epochs_since_best(history).is_some_and(|n| n >= patience)
}

fn epochs_since_best(history: &[f64]) -> Option<usize> {
    let best = best_index(history)?;
    Some(history.len() - 1 - best)
}

/// Index of the first strict minimum.
fn best_index(history: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in history.iter().enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: EpochStats,
    pub val: EpochStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds after [`fit`] returns.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Trains for up to `cfg.epochs` epochs with per-epoch learning-rate decay
/// and early stopping on the validation total loss, then restores the
/// parameters from the best validation epoch. `on_epoch` sees each record
/// as it is produced.
pub fn fit(
    model: &mut Scinet,
    train: &WindowDataset,
    val: &WindowDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut opt = AdamState::new(model.params(), cfg.lr);
    let mut history = Vec::new();
    let mut val_totals = Vec::new();
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        let train_stats = train_epoch(model, train, &mut opt, cfg, epoch)?;
        let val_stats = validation_loss(model, val, cfg.batch_size)?;
        if best.as_ref().is_none_or(|(_, b, _)| val_stats.total < *b) {
            let snapshot = model.params().iter().map(|(_, t)| t.data().to_vec()).collect();
            best = Some((epoch, val_stats.total, snapshot));
        }
        val_totals.push(val_stats.total);
        let record = EpochRecord {
            epoch,
            lr: opt.lr,
            train: train_stats,
            val: val_stats,
        };
        on_epoch(&record);
        history.push(record);
        if early_stop(&val_totals, cfg.patience) {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, _, snapshot) = best.expect("at least one epoch ran");
    for (t, data) in model.params_mut().tensors_mut().iter_mut().zip(snapshot) {
        t.data_mut().copy_from_slice(&data);
    }
    Ok(FitOutcome {
        history,
        best_epoch,
        stopped_early,
    })
}

/// Bumped whenever the on-disk layout changes.
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "tensors.bin";

/// Where the training data came from, so evaluation can rebuild the splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    pub path: String,
    pub timestamp_column: Option<String>,
    pub split: SplitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub config_hash: String,
    pub seed: u64,
    pub train: Option<TrainConfig>,
    pub data: Option<DataSettings>,
    pub norm: Option<NormStats>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything besides the weights that goes into a checkpoint.
#[derive(Debug, Clone, Default)]
pub struct CheckpointMeta {
    pub train: Option<TrainConfig>,
    pub data: Option<DataSettings>,
    pub norm: Option<NormStats>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Writes `dir/manifest.json` and `dir/tensors.bin`, creating `dir` if
/// needed. The output depends only on the model and `meta`.
pub fn save_checkpoint(dir: &Path, model: &Scinet, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.params().num_scalars() * 8);
    let mut tensors = Vec::with_capacity(model.params().len());
    let mut offset = 0;
    for (name, t) in model.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        model: model.config().clone(),
        config_hash: model.config().hash(),
        seed: model.config().seed,
        train: meta.train.clone(),
        data: meta.data.clone(),
        norm: meta.norm.clone(),
        history: meta.history.clone(),
        best_epoch: meta.best_epoch,
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("cannot serialize manifest: {e}")))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(manifest_path, e))?;
    let blob_path = dir.join(TENSOR_FILE);
    fs::write(&blob_path, blob).map_err(|e| Error::io(blob_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Checkpoint(format!("{}: no format_version", path.display())))?;
    if found != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::VersionMismatch {
            found: found.try_into().unwrap_or(u32::MAX),
            expected: CHECKPOINT_VERSION,
        });
    }
    serde_json::from_value(value)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Restores a model saved by [`save_checkpoint`] together with its manifest.
pub fn load_checkpoint(dir: &Path) -> Result<(Scinet, Manifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.model.hash() != manifest.config_hash {
        return Err(Error::Checkpoint(format!(
            "config hash {} does not match the stored model config ({})",
            manifest.config_hash,
            manifest.model.hash()
        )));
    }
    let blob_path = dir.join(TENSOR_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "{} has {} bytes, not a whole number of f64 values",
            blob_path.display(),
            blob.len()
        )));
    }
    let available = blob.len() / 8;
    let mut model = Scinet::new(manifest.model.clone())?;
    if manifest.tensors.len() != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            model.params().len()
        )));
    }
    let mut expected_total = 0;
    for entry in &manifest.tensors {
        let corrupt = |reason: String| Error::CorruptTensor {
            name: entry.name.clone(),
            reason,
        };
        let id = model
            .params()
            .find(&entry.name)
            .ok_or_else(|| corrupt("not a parameter of this model".into()))?;
        let target = model.params().get(id);
        if entry.shape != target.shape() {
            return Err(corrupt(format!(
                "shape {:?} in manifest, model expects {:?}",
                entry.shape,
                target.shape()
            )));
        }
        if entry.len != target.len() {
            return Err(corrupt(format!(
                "length {} in manifest, shape {:?} needs {}",
                entry.len,
                entry.shape,
                target.len()
            )));
        }
        if entry.offset + entry.len > available {
            return Err(corrupt(format!(
                "elements {}..{} lie past the end of the {available}-element blob",
                entry.offset,
                entry.offset + entry.len
            )));
        }
        let values: Vec<f64> = blob[entry.offset * 8..(entry.offset + entry.len) * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(corrupt(format!("non-finite value at element {i}")));
        }
        model.params_mut().get_mut(id).data_mut().copy_from_slice(&values);
        expected_total += entry.len;
    }
    if expected_total != available {
        return Err(Error::Checkpoint(format!(
            "blob holds {available} values, manifest accounts for {expected_total}"
        )));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::data::{make_windows, synthetic_frame, TimeSeriesFrame};
    use crate::tensor::Tensor;

    fn single(value: f64, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(value));
        store.get_mut(id).accumulate_grad(&[grad]).unwrap();
        store
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = single(0.7, 0.0);
        let mut opt = AdamState::new(&store, 1e-3);
        opt.step(&mut store).unwrap();
        assert_eq!(store.iter().next().unwrap().1.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = single(0.0, 1.0);
        let mut opt = AdamState::new(&store, 1e-3);
        opt.step(&mut store).unwrap();
        let w = store.iter().next().unwrap().1;
        assert_abs_diff_eq!(w.data()[0], -1e-3 / (1.0 + 1e-8), epsilon = 1e-18);
        assert!(w.grad().is_none(), "gradients are cleared after the step");
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut store = ParamStore::new();
        for name in ["a", "b"] {
            let id = store.add(name, Tensor::vector(&[0.3, -1.2]).unwrap());
            store.get_mut(id).accumulate_grad(&[0.5, -2.0]).unwrap();
        }
        let mut opt = AdamState::new(&store, 1e-2);
        opt.step(&mut store).unwrap();
        let vals: Vec<&[f64]> = store.iter().map(|(_, t)| t.data()).collect();
        assert_eq!(vals[0], vals[1]);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut store = single(0.0, 1.0);
        let mut opt = AdamState::new(&store, 1e-3);
        store.tensors_mut()[0].clear_grad();
        store.tensors_mut()[0].accumulate_grad(&[f64::NAN]).unwrap();
        assert!(matches!(opt.step(&mut store), Err(Error::Numeric { .. })));
    }

    #[test]
    fn adam_descends_convex_probe() {
        // least squares: minimize mean((x·wᵀ + b − y)²) with y = 2x₀ − x₁ + 0.5
        let x = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 2.0]).unwrap();
        let y = Tensor::new(vec![4, 1], vec![2.5, -0.5, 1.5, -3.5]).unwrap();
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[1, 2]));
        let b = store.add("b", Tensor::zeros(&[1]));
        let loss_of = |store: &mut ParamStore, backward: bool| -> f64 {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
            let out = tape.linear(xv, bound.var(w), bound.var(b)).unwrap();
            let err = tape.sub(out, yv).unwrap();
            let sq = tape.mul(err, err).unwrap();
            let loss = tape.mean(sq).unwrap();
            if backward {
                tape.backward(loss).unwrap();
                store.collect_grads(&tape, &bound).unwrap();
            }
            tape.value(loss).data()[0]
        };
        let mut opt = AdamState::new(&store, 1e-2);
        let mut prev = loss_of(&mut store, false);
        for _ in 0..50 {
            loss_of(&mut store, true);
            opt.step(&mut store).unwrap();
            let now = loss_of(&mut store, false);
            assert!(now < prev, "{now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[2]));
        let b = store.add("b", Tensor::zeros(&[1]));
        store.get_mut(a).accumulate_grad(&[3.0, 0.0]).unwrap();
        store.get_mut(b).accumulate_grad(&[4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut store, 10.0), 5.0);
        assert_eq!(store.get(a).grad().unwrap(), &[3.0, 0.0]);
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        assert_abs_diff_eq!(store.grad_norm(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(store.get(b).grad().unwrap()[0], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn early_stop_counting() {
        let decreasing: Vec<f64> = (0..30).map(|i| 1.0 / (i + 1) as f64).collect();
        for n in 1..=decreasing.len() {
            assert!(!early_stop(&decreasing[..n], 3));
        }
        let flat = [1.0; 5];
        assert!(!early_stop(&flat[..3], 3));
        assert!(early_stop(&flat[..4], 3));
        let reset = [1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5];
        assert!(!early_stop(&reset[..6], 3));
        assert!(early_stop(&reset, 3));
        assert!(!early_stop(&[], 1));
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { patience: 0, ..TrainConfig::default() },
            TrainConfig { lr: f64::NAN, ..TrainConfig::default() },
            TrainConfig { grad_clip: Some(0.0), ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    fn fixture(rows: usize, cfg: &ModelConfig) -> (TimeSeriesFrame, WindowDataset) {
        let frame = synthetic_frame(rows, cfg.variates, 11).unwrap();
        let stats = NormStats::fit(&frame, 0..rows).unwrap();
        let norm = stats.normalized(&frame).unwrap();
        let ds = make_windows(&norm, 0..rows, cfg.lookback, cfg.horizon).unwrap();
        (norm, ds)
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            lookback: 16,
            horizon: 4,
            variates: 2,
            levels: 2,
            stacks: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn identity_model_first_batch_loss_is_closed_form() {
        let mut cfg = small_config();
        cfg.stacks = 1;
        cfg.ablation.no_decoder = true;
        let (_, ds) = fixture(120, &cfg);
        let mut model = Scinet::new(cfg.clone()).unwrap();
        let tc = TrainConfig {
            batch_size: ds.len(),
            ..TrainConfig::default()
        };
        let mut opt = AdamState::new(model.params(), tc.lr);
        let stats = train_epoch(&mut model, &ds, &mut opt, &tc, 0).unwrap();

        // identity init without a decoder forecasts twice the last τ inputs
        let all: Vec<usize> = (0..ds.len()).collect();
        let (x, y) = ds.batch(&all).unwrap();
        let (t, h) = (cfg.lookback, cfg.horizon);
        let mut sum = 0.0;
        for (xr, yr) in x.data().chunks(t).zip(y.data().chunks(h)) {
            for (xv, yv) in xr[t - h..].iter().zip(yr) {
                sum += (2.0 * xv - yv).abs();
            }
        }
        assert_abs_diff_eq!(stats.total, sum / y.len() as f64, epsilon = 1e-12);
        assert_eq!(stats.components.len(), 1);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let cfg = small_config();
        let (_, ds) = fixture(100, &cfg);
        let mut model = Scinet::new(cfg).unwrap();
        let before = model.params().clone();
        let tc = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamState::new(model.params(), 0.0);
        train_epoch(&mut model, &ds, &mut opt, &tc, 0).unwrap();
        for ((_, a), (_, b)) in model.params().iter().zip(before.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn epoch_total_is_sum_of_components() {
        let mut cfg = small_config();
        cfg.stacks = 3;
        let (_, ds) = fixture(100, &cfg);
        let mut model = Scinet::new(cfg).unwrap();
        let tc = TrainConfig::default();
        let mut opt = AdamState::new(model.params(), tc.lr);
        let stats = train_epoch(&mut model, &ds, &mut opt, &tc, 0).unwrap();
        assert_eq!(stats.components.len(), 3);
        assert_abs_diff_eq!(stats.total, stats.components.iter().sum::<f64>(), epsilon = 1e-12);
    }

    #[test]
    fn training_loss_decreases_on_sinusoid() {
        let cfg = small_config();
        let (_, ds) = fixture(300, &cfg);
        let mut model = Scinet::new(cfg).unwrap();
        let tc = TrainConfig::default();
        let mut opt = AdamState::new(model.params(), tc.lr);
        let mut losses = Vec::new();
        for epoch in 0..5 {
            opt.lr = tc.lr_at(epoch);
            losses.push(train_epoch(&mut model, &ds, &mut opt, &tc, epoch).unwrap().total);
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn fit_is_deterministic_and_restores_best() {
        let cfg = small_config();
        let (_, ds) = fixture(200, &cfg);
        let tc = TrainConfig {
            epochs: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = Scinet::new(cfg.clone()).unwrap();
            let out = fit(&mut model, &ds, &ds, &tc, |_| {}).unwrap();
            (model, out)
        };
        let (m1, o1) = run();
        let (m2, o2) = run();
        assert_eq!(o1, o2);
        assert_eq!(m1.params(), m2.params());
        let best = validation_loss(&m1, &ds, 32).unwrap().total;
        assert_eq!(best, o1.history[o1.best_epoch].val.total);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut cfg = small_config();
        cfg.identity_init = false;
        let (frame, ds) = fixture(100, &cfg);
        let model = Scinet::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta {
            norm: Some(NormStats::fit(&frame, 0..50).unwrap()),
            ..CheckpointMeta::default()
        };
        save_checkpoint(dir.path(), &model, &meta).unwrap();
        let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.params(), model.params());
        assert_eq!(manifest.norm, meta.norm);
        assert_eq!(manifest.seed, 42);
        assert_eq!(manifest.config_hash, model.config().hash());
        let (x, _) = ds.batch(&[0, 3, 7]).unwrap();
        assert_eq!(
            loaded.predict(&x).unwrap().data(),
            model.predict(&x).unwrap().data()
        );
    }

    #[test]
    fn checkpoint_errors() {
        let model = Scinet::new(small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &CheckpointMeta::default()).unwrap();
        let manifest_path = dir.path().join(MANIFEST_FILE);
        let original = fs::read_to_string(&manifest_path).unwrap();

        let mut m: serde_json::Value = serde_json::from_str(&original).unwrap();
        m["tensors"][3]["len"] = serde_json::json!(1);
        let name = m["tensors"][3]["name"].as_str().unwrap().to_string();
        fs::write(&manifest_path, m.to_string()).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::CorruptTensor { name: n, .. }) => assert_eq!(n, name),
            other => panic!("expected corrupt tensor, got {other:?}"),
        }

        let mut m: serde_json::Value = serde_json::from_str(&original).unwrap();
        m["format_version"] = serde_json::json!(99);
        fs::write(&manifest_path, m.to_string()).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::VersionMismatch { found: 99, .. })
        ));

        fs::write(&manifest_path, &original).unwrap();
        let blob_path = dir.path().join(TENSOR_FILE);
        let blob = fs::read(&blob_path).unwrap();
        fs::write(&blob_path, &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::CorruptTensor { .. })
        ));
    }
}
