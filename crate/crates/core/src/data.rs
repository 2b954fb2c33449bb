//! CSV ingestion, chronological splits, z-score normalization and
//! sliding-window datasets.
//!
//! Values are kept row-major (`N` rows of `d` variates). Windows are cut from
//! a single segment so no sample ever straddles train/val/test.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Name of the column treated as a timestamp when it comes first.
pub const DATE_COLUMN: &str = "date";

const TIMESTAMP_FORMATS: [&str; 4] = [
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y/%m/%d %H:%M:%S",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    timestamps: Option<Vec<NaiveDateTime>>,
    values: Vec<f64>,
    names: Vec<String>,
    rejected_rows: usize,
}

impl TimeSeriesFrame {
    pub fn new(
        names: Vec<String>,
        values: Vec<f64>,
        timestamps: Option<Vec<NaiveDateTime>>,
    ) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Data("a frame needs at least one variate".into()));
        }
        if values.is_empty() || !values.len().is_multiple_of(names.len()) {
            return Err(Error::Data(format!(
                "{} values do not form rows of {} variates",
                values.len(),
                names.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, variate '{}'",
                i / names.len(),
                names[i % names.len()]
            )));
        }
        let rows = values.len() / names.len();
        if let Some(ts) = &timestamps {
            if ts.len() != rows {
                return Err(Error::Data(format!(
                    "{} timestamps for {} rows",
                    ts.len(),
                    rows
                )));
            }
            if let Some(i) = ts.windows(2).position(|w| w[1] <= w[0]) {
                return Err(Error::Data(format!(
                    "timestamps not strictly increasing at row {}: {} follows {}",
                    i + 1,
                    ts[i + 1],
                    ts[i]
                )));
            }
        }
        Ok(Self {
            timestamps,
            values,
            names,
            rejected_rows: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn variates(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Row-major `N × d` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.variates();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn timestamps(&self) -> Option<&[NaiveDateTime]> {
        self.timestamps.as_deref()
    }

    /// Rows dropped during ingestion because they held NaN or empty cells.
    pub fn rejected_rows(&self) -> usize {
        self.rejected_rows
    }

    /// Values of one variate, in time order.
    pub fn column(&self, variate: usize) -> Vec<f64> {
        self.values
            .iter()
            .skip(variate)
            .step_by(self.variates())
            .copied()
            .collect()
    }

    /// Writes the frame back out in the same format [`load_csv`] accepts.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            if self.timestamps.is_some() {
                write!(out, "{DATE_COLUMN},")?;
            }
            writeln!(out, "{}", self.names.join(","))?;
            for i in 0..self.len() {
                if let Some(ts) = &self.timestamps {
                    write!(out, "{},", ts[i].format(TIMESTAMP_FORMATS[0]))?;
                }
                let cells: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", cells.join(","))?;
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(raw, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("nan") || c.eq_ignore_ascii_case("na")
}

/// Reads a headed CSV of numeric variates.
///
/// `timestamp_column` names the column holding timestamps. When `None`, a
/// first column called `date` is used if present. Every other column must be
/// numeric. Rows with a NaN or empty cell are dropped and counted in
/// [`TimeSeriesFrame::rejected_rows`]; any other unparseable cell is an error
/// naming the row and column.
pub fn load_csv(path: &Path, timestamp_column: Option<&str>) -> Result<TimeSeriesFrame> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(Error::Data(format!("{}: file is empty", path.display())));
    }
    if headers.iter().all(|h| h.parse::<f64>().is_ok()) {
        return Err(Error::Data(format!(
            "{}: missing header row (first line is numeric)",
            path.display()
        )));
    }

    let ts_index = match timestamp_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Data(format!(
                "{}: timestamp column '{name}' not found",
                path.display()
            ))
        })?),
        None => (headers.get(0) == Some(DATE_COLUMN)).then_some(0),
    };
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != ts_index)
        .map(|(_, h)| h.to_string())
        .collect();
    if names.is_empty() {
        return Err(Error::Data(format!("{}: no variate columns", path.display())));
    }

    let mut values = Vec::new();
    let mut timestamps = ts_index.map(|_| Vec::new());
    let mut rejected = 0;
    let mut row_buf = Vec::with_capacity(names.len());
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "{}: row {line} has {} fields, header has {}",
                path.display(),
                record.len(),
                headers.len()
            )));
        }
        row_buf.clear();
        let mut missing = false;
        let mut stamp = None;
        for (i, cell) in record.iter().enumerate() {
            if Some(i) == ts_index {
                stamp = Some(parse_timestamp(cell).ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    row: line,
                    column: headers[i].to_string(),
                    value: cell.to_string(),
                })?);
                continue;
            }
            if is_missing(cell) {
                missing = true;
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => row_buf.push(v),
                _ => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        row: line,
                        column: headers[i].to_string(),
                        value: cell.to_string(),
                    })
                }
            }
        }
        if missing {
            rejected += 1;
            continue;
        }
        values.extend_from_slice(&row_buf);
        if let (Some(ts), Some(s)) = (timestamps.as_mut(), stamp) {
            ts.push(s);
        }
    }
    if values.is_empty() {
        return Err(Error::Data(format!(
            "{}: no usable data rows ({rejected} rejected)",
            path.display()
        )));
    }
    let mut frame = TimeSeriesFrame::new(names, values, timestamps)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    frame.rejected_rows = rejected;
    Ok(frame)
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// How to cut a frame into train, validation and test segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "parts", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Proportional split. Validation and test sizes are floored and the
    /// remainder goes to training.
    Ratio(u32, u32, u32),
    /// Consecutive spans of 30-day months measured from the first timestamp.
    ByMonths(u32, u32, u32),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratio(6, 2, 2)
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitSpec::Ratio(a, b, c) => write!(f, "ratio:{a}/{b}/{c}"),
            SplitSpec::ByMonths(a, b, c) => write!(f, "months:{a}/{b}/{c}"),
        }
    }
}

impl FromStr for SplitSpec {
    type Err = Error;

    /// Parses `ratio:6/2/2` or `months:12/4/4`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("split '{s}' is not ratio:a/b/c or months:a/b/c"));
        let (mode, parts) = s.split_once(':').ok_or_else(bad)?;
        let nums: Vec<u32> = parts
            .split('/')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [a, b, c] = nums[..] else {
            return Err(bad());
        };
        match mode.trim() {
            "ratio" => Ok(SplitSpec::Ratio(a, b, c)),
            "months" | "by_months" => Ok(SplitSpec::ByMonths(a, b, c)),
            _ => Err(bad()),
        }
    }
}

/// Row ranges of the three chronological segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segments {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Segments {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Range<usize>)> {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)].into_iter()
    }
}

/// Splits `frame` chronologically. Every segment must hold at least
/// `min_len` rows (one look-back plus one horizon).
pub fn split(frame: &TimeSeriesFrame, spec: &SplitSpec, min_len: usize) -> Result<Segments> {
    let n = frame.len();
    let segments = match *spec {
        SplitSpec::Ratio(a, b, c) => {
            let total = u64::from(a) + u64::from(b) + u64::from(c);
            if total == 0 || a == 0 {
                return Err(Error::Config(format!("split {spec} needs a nonzero train share")));
            }
            let val = (n as u64 * u64::from(b) / total) as usize;
            let test = (n as u64 * u64::from(c) / total) as usize;
            let train = n - val - test;
            Segments {
                train: 0..train,
                val: train..train + val,
                test: train + val..n,
            }
        }
        SplitSpec::ByMonths(a, b, c) => {
            let ts = frame.timestamps().ok_or_else(|| {
                Error::Config(format!("split {spec} needs a timestamp column"))
            })?;
            let start = ts[0];
            let month = |k: u32| start + Duration::days(30 * i64::from(k));
            let index_of = |t: NaiveDateTime| ts.partition_point(|s| *s < t);
            let train_end = index_of(month(a));
            let val_end = index_of(month(a + b));
            let test_end = index_of(month(a + b + c));
            if test_end == n && ts[n - 1] < month(a + b + c) - Duration::days(1) {
                return Err(Error::Config(format!(
                    "split {spec} needs data through {}, series ends at {}",
                    month(a + b + c),
                    ts[n - 1]
                )));
            }
            Segments {
                train: 0..train_end,
                val: train_end..val_end,
                test: val_end..test_end,
            }
        }
    };
    for (name, range) in segments.iter() {
        if range.len() < min_len {
            return Err(Error::Config(format!(
                "{name} segment has {} rows, needs at least lookback + horizon = {min_len}",
                range.len()
            )));
        }
    }
    Ok(segments)
}

/// Per-variate z-score statistics, fitted on the training segment only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Mean and population standard deviation of each variate over `range`.
    pub fn fit(frame: &TimeSeriesFrame, range: Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > frame.len() {
            return Err(Error::Data(format!(
                "cannot fit normalizer on rows {range:?} of a {}-row frame",
                frame.len()
            )));
        }
        let d = frame.variates();
        let n = range.len() as f64;
        let mut mean = vec![0.0; d];
        for i in range.clone() {
            for (m, v) in mean.iter_mut().zip(frame.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in range {
            for ((s, v), m) in var.iter_mut().zip(frame.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        if let Some(j) = std.iter().position(|s| *s <= 0.0) {
            return Err(Error::ConstantVariate(frame.names()[j].clone()));
        }
        Ok(Self { mean, std })
    }

    pub fn variates(&self) -> usize {
        self.mean.len()
    }

    /// Normalizes row-major values in place.
    pub fn apply(&self, values: &mut [f64]) {
        let d = self.variates();
        for (i, v) in values.iter_mut().enumerate() {
            *v = (*v - self.mean[i % d]) / self.std[i % d];
        }
    }

    /// Maps row-major normalized values back to the original scale.
    pub fn invert(&self, values: &mut [f64]) {
        let d = self.variates();
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.std[i % d] + self.mean[i % d];
        }
    }

    /// Inverts a `[.., d, len]` tensor laid out variate-major along the
    /// second-to-last axis, as produced by [`WindowDataset::batch`].
    pub fn invert_tensor(&self, t: &mut Tensor) -> Result<()> {
        let shape = t.shape();
        let d = shape.len().checked_sub(2).map(|i| shape[i]);
        if d != Some(self.variates()) {
            return Err(Error::Dimension(format!(
                "tensor {shape:?} does not carry {} variates on axis -2",
                self.variates()
            )));
        }
        let len = t.last_dim();
        let d = self.variates();
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            let j = (k / len) % d;
            *v = *v * self.std[j] + self.mean[j];
        }
        Ok(())
    }

    pub fn normalized(&self, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
        if frame.variates() != self.variates() {
            return Err(Error::Data(format!(
                "normalizer fitted on {} variates, frame has {}",
                self.variates(),
                frame.variates()
            )));
        }
        let mut out = frame.clone();
        self.apply(&mut out.values);
        Ok(out)
    }
}

/// Supervised `(look-back, horizon)` pairs cut from one contiguous segment
/// with stride 1.
#[derive(Debug, Clone)]
pub struct WindowDataset {
    values: Vec<f64>,
    variates: usize,
    offset: usize,
    lookback: usize,
    horizon: usize,
    count: usize,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn variates(&self) -> usize {
        self.variates
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Frame row of the last look-back step of sample `i`. The target covers
    /// the following `horizon` rows.
    pub fn x_end(&self, i: usize) -> usize {
        self.offset + i + self.lookback - 1
    }

    /// Frame row where the target of sample `i` starts.
    pub fn y_start(&self, i: usize) -> usize {
        self.x_end(i) + 1
    }

    fn fill(&self, start: usize, len: usize, out: &mut Vec<f64>) {
        let d = self.variates;
        for j in 0..d {
            out.extend((start..start + len).map(|t| self.values[t * d + j]));
        }
    }

    /// Stacks the given samples into `X: [B, d, T]` and `Y: [B, d, τ]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        if indices.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.count) {
            return Err(Error::Usage(format!(
                "sample {i} out of range for {} windows",
                self.count
            )));
        }
        let (d, b) = (self.variates, indices.len());
        let mut xs = Vec::with_capacity(b * d * self.lookback);
        let mut ys = Vec::with_capacity(b * d * self.horizon);
        for &i in indices {
            self.fill(i, self.lookback, &mut xs);
            self.fill(i + self.lookback, self.horizon, &mut ys);
        }
        Ok((
            Tensor::new(vec![b, d, self.lookback], xs)?,
            Tensor::new(vec![b, d, self.horizon], ys)?,
        ))
    }
}

/// Cuts every stride-1 window of `range` into a dataset.
pub fn make_windows(
    frame: &TimeSeriesFrame,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
) -> Result<WindowDataset> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::Config("lookback and horizon must be positive".into()));
    }
    if range.end > frame.len() || range.len() < lookback + horizon {
        return Err(Error::Config(format!(
            "rows {range:?} cannot hold a window of {lookback} + {horizon} in a {}-row frame",
            frame.len()
        )));
    }
    let d = frame.variates();
    Ok(WindowDataset {
        values: frame.values()[range.start * d..range.end * d].to_vec(),
        variates: d,
        offset: range.start,
        lookback,
        horizon,
        count: range.len() - lookback - horizon + 1,
    })
}

/// One mini-batch with the sample indices it was built from.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub y: Tensor,
}

pub struct BatchIter<'a> {
    dataset: &'a WindowDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (x, y) = self
            .dataset
            .batch(&indices)
            .expect("indices come from the dataset's own range");
        Some(Batch { indices, x, y })
    }
}

/// Iterates over `dataset` in batches of `batch_size`, the last one possibly
/// partial. With `shuffle`, the order is a permutation drawn from `seed`.
pub fn batch_iter(
    dataset: &WindowDataset,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}

/// Noiseless sinusoid-plus-trend series with `variates` columns and hourly
/// timestamps. Periods, amplitudes, phases and slopes are drawn from `seed`.
pub fn synthetic_frame(rows: usize, variates: usize, seed: u64) -> Result<TimeSeriesFrame> {
    if rows == 0 || variates == 0 {
        return Err(Error::Config("synthetic frame needs rows and variates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<[f64; 6]> = (0..variates)
        .map(|_| {
            [
                rng.gen_range(0.5..2.0),
                rng.gen_range(12.0..48.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.2..0.8),
                rng.gen_range(60.0..200.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let tau = std::f64::consts::TAU;
    let mut values = Vec::with_capacity(rows * variates);
    for t in 0..rows {
        let x = t as f64;
        for &[amp, period, phase, amp2, period2, slope] in &specs {
            values.push(
                amp * (tau * x / period + phase).sin()
                    + amp2 * (tau * x / period2).sin()
                    + slope * x / rows as f64,
            );
        }
    }
    let start = NaiveDate::from_ymd_opt(2020, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let timestamps = (0..rows).map(|t| start + Duration::hours(t as i64)).collect();
    let names = (0..variates).map(|j| format!("v{j}")).collect();
    TimeSeriesFrame::new(names, values, Some(timestamps))
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn plain(rows: usize, d: usize) -> TimeSeriesFrame {
        let names = (0..d).map(|j| format!("c{j}")).collect();
        let values = (0..rows * d).map(|v| v as f64).collect();
        TimeSeriesFrame::new(names, values, None).unwrap()
    }

    #[test]
    fn loads_small_file() {
        let f = write("a,b\n1.0,2.0\n3,4.5\n");
        let frame = load_csv(f.path(), None).unwrap();
        assert_eq!((frame.len(), frame.variates()), (2, 2));
        assert_eq!(frame.values(), &[1.0, 2.0, 3.0, 4.5]);
        assert!(frame.timestamps().is_none());
    }

    #[test]
    fn date_column_becomes_timestamps() {
        let f = write("date,OT\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,2\n");
        let frame = load_csv(f.path(), None).unwrap();
        assert_eq!(frame.names(), &["OT".to_string()]);
        assert_eq!(frame.timestamps().unwrap().len(), 2);
    }

    #[test]
    fn rejects_missing_header_and_empty_file() {
        assert!(matches!(load_csv(write("1,2\n3,4\n").path(), None), Err(Error::Data(_))));
        assert!(matches!(load_csv(write("").path(), None), Err(Error::Data(_))));
        assert!(matches!(load_csv(write("a,b\n").path(), None), Err(Error::Data(_))));
    }

    #[test]
    fn bad_cell_reports_row_and_column() {
        let err = load_csv(write("a,b\n1,2\n3,x\n").path(), None).unwrap_err();
        match err {
            Error::Parse { row, column, value, .. } => {
                assert_eq!((row, column.as_str(), value.as_str()), (3, "b", "x"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn nan_rows_are_dropped_and_counted() {
        let frame = load_csv(write("a,b\n1,2\nNaN,3\n4,\n5,6\n").path(), None).unwrap();
        assert_eq!(frame.len(), 2);
        assert_eq!(frame.rejected_rows(), 2);
        assert_eq!(frame.values(), &[1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn non_increasing_timestamps_rejected() {
        let f = write("date,a\n2020-01-01 01:00:00,1\n2020-01-01 00:00:00,2\n");
        assert!(matches!(load_csv(f.path(), None), Err(Error::Data(_))));
    }

    #[test]
    fn missing_file_is_io_not_found() {
        let err = load_csv(Path::new("/nonexistent/data.csv"), None).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("/nonexistent/data.csv"));
    }

    #[test]
    fn csv_round_trip() {
        let frame = synthetic_frame(50, 3, 1).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        frame.write_csv(f.path()).unwrap();
        assert_eq!(load_csv(f.path(), None).unwrap(), frame);
    }

    #[test]
    fn ratio_split_examples() {
        let s = split(&plain(10, 1), &SplitSpec::Ratio(6, 2, 2), 1).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..6, 6..8, 8..10));
        let s = split(&plain(11, 1), &SplitSpec::Ratio(6, 2, 2), 1).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..7, 7..9, 9..11));
        assert!(matches!(
            split(&plain(10, 1), &SplitSpec::Ratio(6, 2, 2), 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn month_split_on_hourly_series() {
        // 20 months of 30 days at one row per hour.
        let frame = synthetic_frame(20 * 30 * 24, 1, 0).unwrap();
        let s = split(&frame, &SplitSpec::ByMonths(12, 4, 4), 72).unwrap();
        assert_eq!((s.train, s.val, s.test), (0..8640, 8640..11520, 11520..14400));
        assert!(split(&plain(100, 1), &SplitSpec::ByMonths(1, 1, 1), 1).is_err());
        let short = synthetic_frame(24 * 30, 1, 0).unwrap();
        assert!(split(&short, &SplitSpec::ByMonths(12, 4, 4), 1).is_err());
    }

    #[test]
    fn split_spec_parses() {
        assert_eq!("ratio:7/1/2".parse::<SplitSpec>().unwrap(), SplitSpec::Ratio(7, 1, 2));
        assert_eq!(
            "months:12/4/4".parse::<SplitSpec>().unwrap(),
            SplitSpec::ByMonths(12, 4, 4)
        );
        assert!("ratio:1/2".parse::<SplitSpec>().is_err());
        let spec = SplitSpec::ByMonths(12, 4, 4);
        assert_eq!(spec.to_string().parse::<SplitSpec>().unwrap(), spec);
    }

    #[test]
    fn normalizer_uses_population_std() {
        let frame = TimeSeriesFrame::new(vec!["a".into()], vec![0.0, 2.0, 100.0], None).unwrap();
        let stats = NormStats::fit(&frame, 0..2).unwrap();
        assert_eq!((stats.mean[0], stats.std[0]), (1.0, 1.0));
    }

    #[test]
    fn constant_variate_is_named() {
        let frame =
            TimeSeriesFrame::new(vec!["a".into(), "flat".into()], vec![1.0, 5.0, 2.0, 5.0], None)
                .unwrap();
        let err = NormStats::fit(&frame, 0..2).unwrap_err();
        assert!(matches!(&err, Error::ConstantVariate(n) if n == "flat"));
    }

    #[test]
    fn normalize_round_trip() {
        let frame = synthetic_frame(200, 3, 5).unwrap();
        let stats = NormStats::fit(&frame, 0..120).unwrap();
        let mut v = frame.values().to_vec();
        stats.apply(&mut v);
        stats.invert(&mut v);
        for (a, b) in v.iter().zip(frame.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn window_counts() {
        let frame = plain(20, 2);
        assert_eq!(make_windows(&frame, 0..7, 4, 3).unwrap().len(), 1);
        assert_eq!(make_windows(&frame, 0..11, 4, 3).unwrap().len(), 5);
        assert!(make_windows(&frame, 0..6, 4, 3).is_err());
    }

    #[test]
    fn batch_layout_is_variate_major() {
        // frame rows are [2t, 2t + 1]
        let ds = make_windows(&plain(10, 2), 2..10, 3, 2).unwrap();
        let (x, y) = ds.batch(&[1]).unwrap();
        assert_eq!(x.shape(), &[1, 2, 3]);
        assert_eq!(x.data(), &[6.0, 8.0, 10.0, 7.0, 9.0, 11.0]);
        assert_eq!(y.data(), &[12.0, 14.0, 13.0, 15.0]);
        assert_eq!((ds.x_end(1), ds.y_start(1)), (5, 6));
    }

    #[test]
    fn invert_tensor_matches_row_invert() {
        let frame = synthetic_frame(40, 3, 2).unwrap();
        let stats = NormStats::fit(&frame, 0..40).unwrap();
        let norm = stats.normalized(&frame).unwrap();
        let ds = make_windows(&norm, 0..40, 8, 4).unwrap();
        let (_, mut y) = ds.batch(&[0, 5]).unwrap();
        stats.invert_tensor(&mut y).unwrap();
        let raw = make_windows(&frame, 0..40, 8, 4).unwrap();
        let (_, y_raw) = raw.batch(&[0, 5]).unwrap();
        for (a, b) in y.data().iter().zip(y_raw.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn batches_cover_dataset() {
        let ds = make_windows(&plain(20, 1), 0..20, 5, 2).unwrap();
        assert_eq!(ds.len(), 14);
        let ds = make_windows(&plain(20, 1), 0..16, 5, 2).unwrap();
        assert_eq!(ds.len(), 10);
        let sizes: Vec<usize> = batch_iter(&ds, 4, false, 0)
            .unwrap()
            .map(|b| b.indices.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let order: Vec<usize> = batch_iter(&ds, 4, false, 0)
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        assert_eq!(order, (0..10).collect::<Vec<_>>());
        assert!(batch_iter(&ds, 0, false, 0).is_err());
    }

    #[test]
    fn shuffle_is_seeded() {
        let ds = make_windows(&plain(100, 1), 0..100, 5, 2).unwrap();
        let run = |seed| -> Vec<usize> {
            batch_iter(&ds, 8, true, seed)
                .unwrap()
                .flat_map(|b| b.indices)
                .collect()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        let mut sorted = run(3);
        sorted.sort_unstable();
        assert_eq!(sorted, (0..ds.len()).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn target_follows_lookback(start in 0usize..20, len in 10usize..40, t in 1usize..6, h in 1usize..5) {
            let frame = plain(80, 1);
            let ds = make_windows(&frame, start..start + len, t, h).unwrap();
            prop_assert_eq!(ds.len(), len - t - h + 1);
            for i in 0..ds.len() {
                let (x, y) = ds.batch(&[i]).unwrap();
                prop_assert_eq!(ds.y_start(i), ds.x_end(i) + 1);
                prop_assert_eq!(x.data()[t - 1], ds.x_end(i) as f64);
                prop_assert_eq!(y.data()[0], ds.y_start(i) as f64);
                prop_assert!(ds.y_start(i) + h <= start + len);
            }
        }
    }
}
