//! Forecast error metrics and permutation-entropy analysis.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::WindowDataset;
use crate::error::{Error, Result};
use crate::scinet::Scinet;
use crate::tensor::Tensor;

/// Floor on `|truth|` in the MAPE denominator.
pub const MAPE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// Percentage, i.e. already multiplied by 100.
    pub mape: f64,
    pub window_count: usize,
    pub horizon: usize,
    pub variates: usize,
}

impl MetricReport {
    const KEYS: [&'static str; 7] = [
        "mae",
        "mse",
        "rmse",
        "mape",
        "window_count",
        "horizon",
        "variates",
    ];
}

/// One `key=value` per line, floats printed round-trippably.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mae={:?}", self.mae)?;
        writeln!(f, "mse={:?}", self.mse)?;
        writeln!(f, "rmse={:?}", self.rmse)?;
        writeln!(f, "mape={:?}", self.mape)?;
        writeln!(f, "window_count={}", self.window_count)?;
        writeln!(f, "horizon={}", self.horizon)?;
        write!(f, "variates={}", self.variates)
    }
}

impl FromStr for MetricReport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut fields = HashMap::new();
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("metric line '{line}' is not key=value")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Data(format!("metric report is missing '{k}'")))
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("metric '{k}' is not a number")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("metric '{k}' is not an integer")))
        };
        if let Some(k) = fields.keys().find(|k| !Self::KEYS.contains(k)) {
            return Err(Error::Data(format!("unknown metric '{k}'")));
        }
        Ok(Self {
            mae: float("mae")?,
            mse: float("mse")?,
            rmse: float("rmse")?,
            mape: float("mape")?,
            window_count: int("window_count")?,
            horizon: int("horizon")?,
            variates: int("variates")?,
        })
    }
}

/// Running sums for metrics over many batches.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    abs: f64,
    sq: f64,
    ape: f64,
    count: usize,
    windows: usize,
    shape: Option<(usize, usize)>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a batch of `[B, d, τ]` predictions and targets.
    pub fn update(&mut self, pred: &Tensor, truth: &Tensor) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(Error::Dimension(format!(
                "prediction {:?} vs truth {:?}",
                pred.shape(),
                truth.shape()
            )));
        }
        let (windows, variates, horizon) = match *pred.shape() {
            [b, d, t] => (b, d, t),
            [d, t] => (1, d, t),
            [t] => (1, 1, t),
            _ => {
                return Err(Error::Dimension(format!(
                    "metrics take [B, d, τ] tensors, got {:?}",
                    pred.shape()
                )))
            }
        };
        match self.shape {
            Some(s) if s != (variates, horizon) => {
                return Err(Error::Dimension(format!(
                    "batch with {variates} variates × {horizon} steps after {} × {}",
                    s.0, s.1
                )))
            }
            _ => self.shape = Some((variates, horizon)),
        }
        for (p, t) in pred.data().iter().zip(truth.data()) {
            let e = (p - t).abs();
            self.abs += e;
            self.sq += e * e;
            self.ape += e / t.abs().max(MAPE_EPS);
        }
        self.count += pred.len();
        self.windows += windows;
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricReport> {
        let (variates, horizon) = self
            .shape
            .ok_or_else(|| Error::Usage("no predictions were accumulated".into()))?;
        let n = self.count as f64;
        let mse = self.sq / n;
        Ok(MetricReport {
            mae: self.abs / n,
            mse,
            rmse: mse.sqrt(),
            mape: 100.0 * self.ape / n,
            window_count: self.windows,
            horizon,
            variates,
        })
    }
}

/// MAE, MSE, RMSE and MAPE averaged over every element.
pub fn compute_metrics(pred: &Tensor, truth: &Tensor) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    acc.update(pred, truth)?;
    acc.finish()
}

/// Metrics of the naive forecast that repeats each variate's last observed
/// value across the horizon.
pub fn repeat_last_baseline(dataset: &WindowDataset, batch_size: usize) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    let (t, h) = (dataset.lookback(), dataset.horizon());
    for batch in crate::data::batch_iter(dataset, batch_size, false, 0)? {
        let pred: Vec<f64> = batch
            .x
            .data()
            .chunks(t)
            .flat_map(|row| std::iter::repeat_n(row[t - 1], h))
            .collect();
        let pred = Tensor::new(batch.y.shape().to_vec(), pred)?;
        acc.update(&pred, &batch.y)?;
    }
    acc.finish()
}

/// Ordinal-pattern settings: embedding dimension `m` and time lag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeConfig {
    pub m: usize,
    pub lag: usize,
}

impl Default for PeConfig {
    fn default() -> Self {
        Self { m: 6, lag: 1 }
    }
}

impl PeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=20).contains(&self.m) {
            return Err(Error::Config(format!(
                "embedding dimension m={} must be in 2..=20",
                self.m
            )));
        }
        if self.lag == 0 {
            return Err(Error::Config("PE lag must be at least 1".into()));
        }
        Ok(())
    }

    /// Shortest series with at least two ordinal patterns.
    pub fn min_len(&self) -> usize {
        (self.m - 1) * self.lag + 2
    }
}

/// Normalized permutation entropy in `[0, 1]`.
///
/// Each window `x[i], x[i + lag], ..., x[i + (m-1)·lag]` is mapped to the
/// permutation that sorts it ascending; equal values keep their index order.
/// The Shannon entropy (natural log) of the pattern frequencies is divided by
/// `ln(m!)`.
pub fn permutation_entropy(series: &[f64], cfg: &PeConfig) -> Result<f64> {
    cfg.validate()?;
    if series.len() < cfg.min_len() {
        return Err(Error::Data(format!(
            "series of length {} is too short for m={}, lag={} (needs {})",
            series.len(),
            cfg.m,
            cfg.lag,
            cfg.min_len()
        )));
    }
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "permutation_entropy",
            index: i,
        });
    }
    let span = (cfg.m - 1) * cfg.lag;
    let windows = series.len() - span;
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    let mut order: Vec<usize> = Vec::with_capacity(cfg.m);
    for start in 0..windows {
        order.clear();
        order.extend(0..cfg.m);
        let at = |k: usize| series[start + k * cfg.lag];
        order.sort_by(|&a, &b| at(a).total_cmp(&at(b)));
        let code = order.iter().fold(0u64, |c, &k| c * cfg.m as u64 + k as u64);
        *counts.entry(code).or_default() += 1;
    }
    let n = windows as f64;
    let entropy: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    let ln_factorial: f64 = (2..=cfg.m).map(|k| (k as f64).ln()).sum();
    // Rounding can leave a single-pattern entropy at -0.0.
    Ok((entropy / ln_factorial).max(0.0))
}

/// Permutation entropy of the raw input and of the first stack's
/// pre-decoder representation, per variate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeReport {
    pub config: PeConfig,
    pub original: Vec<f64>,
    pub enhanced: Option<Vec<f64>>,
}

impl PeReport {
    pub fn mean_original(&self) -> f64 {
        mean(&self.original)
    }

    pub fn mean_enhanced(&self) -> Option<f64> {
        self.enhanced.as_deref().map(mean)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl fmt::Display for PeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pe_m={}", self.config.m)?;
        writeln!(f, "pe_lag={}", self.config.lag)?;
        for (j, v) in self.original.iter().enumerate() {
            writeln!(f, "pe_original.{j}={v:?}")?;
        }
        if let Some(enh) = &self.enhanced {
            for (j, v) in enh.iter().enumerate() {
                writeln!(f, "pe_enhanced.{j}={v:?}")?;
            }
        }
        write!(f, "pe_original_mean={:?}", self.mean_original())?;
        if let Some(m) = self.mean_enhanced() {
            write!(f, "\npe_enhanced_mean={m:?}")?;
        }
        Ok(())
    }
}

/// Computes PE per variate over non-overlapping look-back windows of
/// `dataset` (samples `0, T, 2T, ...`), so the concatenated input is the
/// contiguous underlying series. With a model, the same windows are passed
/// through it and the first stack's representation is measured as well.
pub fn pe_report(model: Option<&Scinet>, dataset: &WindowDataset, cfg: &PeConfig) -> Result<PeReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("PE needs at least one window".into()));
    }
    let d = dataset.variates();
    let t = dataset.lookback();
    if let Some(m) = model {
        let mc = m.config();
        if mc.lookback != t || mc.variates != d {
            return Err(Error::Dimension(format!(
                "model takes [{}, {}] windows, dataset has [{d}, {t}]",
                mc.variates, mc.lookback
            )));
        }
    }
    let starts: Vec<usize> = (0..dataset.len()).step_by(t).collect();
    let mut original = vec![Vec::with_capacity(starts.len() * t); d];
    let mut enhanced = model.map(|_| vec![Vec::with_capacity(starts.len() * t); d]);
    for chunk in starts.chunks(64) {
        let (x, _) = dataset.batch(chunk)?;
        append_by_variate(&mut original, &x, d, t);
        if let (Some(m), Some(enh)) = (model, enhanced.as_mut()) {
            let rep = m.representation(&x)?;
            append_by_variate(enh, &rep, d, t);
        }
    }
    let entropies = |series: &[Vec<f64>]| -> Result<Vec<f64>> {
        series.iter().map(|s| permutation_entropy(s, cfg)).collect()
    };
    Ok(PeReport {
        config: *cfg,
        original: entropies(&original)?,
        enhanced: enhanced.as_deref().map(entropies).transpose()?,
    })
}

fn append_by_variate(out: &mut [Vec<f64>], x: &Tensor, d: usize, t: usize) {
    for (k, row) in x.data().chunks(t).enumerate() {
        out[k % d].extend_from_slice(row);
    }
}
