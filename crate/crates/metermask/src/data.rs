//! Data ingestion, resampling, windowing, splitting, normalization, and a
//! synthetic load/occupancy generator for desk-scale experiments.
//!
//! The ingestion CSV format is `timestamp,power_w,occupancy` with integer
//! epoch-second timestamps, decimal watts, and binary occupancy. Consumption
//! is resampled to hourly means, windowed into midnight-aligned days of
//! `T = 24` steps, split 85:15 into a training pool and test set (10% of the
//! pool becoming validation), and standardized with statistics computed on
//! the training split only.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use thiserror::Error;

use crate::tensor::Tensor;

/// Steps per daily window.
pub const SEQ_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad header {found:?}, expected \"timestamp,power_w,occupancy\"")]
    BadHeader { found: String },
    #[error("line {line}: {message}")]
    MalformedRow { line: usize, message: String },
    #[error("line {line}: timestamp {ts} not strictly increasing")]
    NonMonotonicTimestamp { line: usize, ts: i64 },
    #[error("line {line}: occupancy must be 0 or 1, got {value}")]
    BadOccupancy { line: usize, value: String },
    #[error("empty input series")]
    Empty,
    #[error("input spacing {gap}s exceeds one hour at index {index}")]
    TooCoarse { gap: i64, index: usize },
    #[error("dataset too small: {n} sequences, need at least {min}")]
    TooSmall { n: usize, min: usize },
    #[error("normalize requires split tags; run split first")]
    SplitMissing,
    #[error("training split has zero variance; cannot standardize")]
    ZeroStd,
}

/// Raw metered series: strictly increasing epoch-second timestamps with
/// non-negative power readings and binary occupancy labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub household_id: String,
    pub timestamps: Vec<i64>,
    pub power: Vec<f64>,
    pub occupancy: Vec<u8>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "validation"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Mean and standard deviation of the training-split consumption.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn normalize_value(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize_value(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    pub fn denormalize(&self, t: &Tensor) -> Tensor {
        let values = t.values().iter().map(|&v| self.denormalize_value(v)).collect();
        Tensor::new(t.shape().to_vec(), values).expect("same shape")
    }
}

/// Daily consumption windows `y` with per-step occupancy labels `x`, both
/// `[N x 24]`, plus split tags and normalization statistics once assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub y: Tensor,
    pub x: Tensor,
    /// Household index per window (0 for single-household data).
    pub household: Vec<u32>,
    pub splits: Option<Vec<Split>>,
    pub norm: Option<NormStats>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        match &self.splits {
            None => Vec::new(),
            Some(tags) => tags
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == split)
                .map(|(i, _)| i)
                .collect(),
        }
    }

    /// Materialize `(y, x)` rows for the given indices.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let t_len = self.y.cols();
        let mut yv = Vec::with_capacity(indices.len() * t_len);
        let mut xv = Vec::with_capacity(indices.len() * t_len);
        for &i in indices {
            yv.extend_from_slice(&self.y.values()[i * t_len..(i + 1) * t_len]);
            xv.extend_from_slice(&self.x.values()[i * t_len..(i + 1) * t_len]);
        }
        (
            Tensor::matrix(indices.len(), t_len, yv).expect("gather y"),
            Tensor::matrix(indices.len(), t_len, xv).expect("gather x"),
        )
    }

    pub fn subset(&self, split: Split) -> (Tensor, Tensor) {
        self.gather(&self.indices_of(split))
    }
}

/// Parse an ingestion CSV. Returns the series and the number of rows dropped
/// for missing power values.
pub fn load_csv(path: impl AsRef<Path>) -> Result<(RawSeries, usize), DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let household_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "household".into());
    parse_csv_text(&text, household_id)
}

pub(crate) fn parse_csv_text(
    text: &str,
    household_id: String,
) -> Result<(RawSeries, usize), DataError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::Empty)?;
    if header.trim_end() != "timestamp,power_w,occupancy" {
        return Err(DataError::BadHeader {
            found: header.to_string(),
        });
    }
    let mut series = RawSeries {
        household_id,
        timestamps: Vec::new(),
        power: Vec::new(),
        occupancy: Vec::new(),
    };
    let mut dropped = 0usize;
    for (idx, raw_line) in lines {
        let line = idx + 1; // 1-based, header is line 1
        let row = raw_line.trim_end();
        if row.is_empty() {
            continue;
        }
        let mut fields = row.split(',');
        let (ts_s, power_s, occ_s) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), Some(c)) if fields.next().is_none() => (a, b, c),
            _ => {
                return Err(DataError::MalformedRow {
                    line,
                    message: format!("expected 3 comma-separated fields, got {row:?}"),
                })
            }
        };
        let ts: i64 = ts_s.trim().parse().map_err(|_| DataError::MalformedRow {
            line,
            message: format!("bad timestamp {ts_s:?}"),
        })?;
        let occ = match occ_s.trim() {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(DataError::BadOccupancy {
                    line,
                    value: other.to_string(),
                })
            }
        };
        let power_t = power_s.trim();
        if power_t.is_empty() || power_t.eq_ignore_ascii_case("nan") {
            dropped += 1;
            continue;
        }
        let power: f64 = power_t.parse().map_err(|_| DataError::MalformedRow {
            line,
            message: format!("bad power value {power_s:?}"),
        })?;
        if let Some(&last) = series.timestamps.last() {
            if ts <= last {
                return Err(DataError::NonMonotonicTimestamp { line, ts });
            }
        }
        series.timestamps.push(ts);
        series.power.push(power);
        series.occupancy.push(occ);
    }
    Ok((series, dropped))
}

/// Aggregate a sub-hourly series into hourly buckets: mean power, majority
/// occupancy (ties count as occupied). Buckets without data are dropped.
pub fn resample_hourly(raw: &RawSeries) -> Result<RawSeries, DataError> {
    if raw.is_empty() {
        return Err(DataError::Empty);
    }
    for (i, w) in raw.timestamps.windows(2).enumerate() {
        let gap = w[1] - w[0];
        if gap > 3600 {
            return Err(DataError::TooCoarse { gap, index: i });
        }
    }
    let mut out = RawSeries {
        household_id: raw.household_id.clone(),
        timestamps: Vec::new(),
        power: Vec::new(),
        occupancy: Vec::new(),
    };
    let mut i = 0;
    while i < raw.len() {
        let bucket = raw.timestamps[i].div_euclid(3600);
        let mut sum = 0.0;
        let mut ones = 0usize;
        let mut count = 0usize;
        while i < raw.len() && raw.timestamps[i].div_euclid(3600) == bucket {
            sum += raw.power[i];
            ones += raw.occupancy[i] as usize;
            count += 1;
            i += 1;
        }
        out.timestamps.push(bucket * 3600);
        out.power.push(sum / count as f64);
        out.occupancy.push(u8::from(2 * ones >= count));
    }
    Ok(out)
}

/// Cut an hourly series into non-overlapping midnight-aligned daily windows;
/// days missing any hour are dropped.
pub fn window_daily(hourly: &RawSeries) -> Result<WindowedDataset, DataError> {
    use std::collections::BTreeMap;
    let mut days: BTreeMap<i64, [(Option<f64>, u8); SEQ_LEN]> = BTreeMap::new();
    for ((&ts, &p), &o) in hourly
        .timestamps
        .iter()
        .zip(&hourly.power)
        .zip(&hourly.occupancy)
    {
        let day = ts.div_euclid(86400);
        let hour = ts.rem_euclid(86400) / 3600;
        days.entry(day).or_insert([(None, 0); SEQ_LEN])[hour as usize] = (Some(p), o);
    }
    let mut yv = Vec::new();
    let mut xv = Vec::new();
    let mut n = 0;
    for (_, slots) in days {
        if slots.iter().all(|(p, _)| p.is_some()) {
            for (p, o) in slots {
                yv.push(p.unwrap());
                xv.push(o as f64);
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(DataError::Empty);
    }
    Ok(WindowedDataset {
        y: Tensor::matrix(n, SEQ_LEN, yv).expect("window shape"),
        x: Tensor::matrix(n, SEQ_LEN, xv).expect("window shape"),
        household: vec![0; n],
        splits: None,
        norm: None,
    })
}

/// Tag each window train / validation / test: 15% (rounded down) becomes the
/// test set, 10% (rounded down) of the remaining pool becomes validation,
/// and the rest trains.
pub fn split(dataset: &mut WindowedDataset, seed: u64) {
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_test = (n as f64 * 0.15).floor() as usize;
    let pool = n - n_test;
    let n_val = (pool as f64 * 0.10).floor() as usize;
    let mut tags = vec![Split::Train; n];
    for &i in &order[0..n_test] {
        tags[i] = Split::Test;
    }
    for &i in &order[n_test..n_test + n_val] {
        tags[i] = Split::Validation;
    }
    dataset.splits = Some(tags);
}

/// Per-household 85:15 split: apply the same rounding rules within each
/// household's windows, so no household is only represented in one split.
pub fn split_per_household(dataset: &mut WindowedDataset, seed: u64) {
    let n = dataset.len();
    let mut tags = vec![Split::Train; n];
    let mut households: Vec<u32> = dataset.household.clone();
    households.sort_unstable();
    households.dedup();
    for hh in households {
        let members: Vec<usize> = (0..n).filter(|&i| dataset.household[i] == hh).collect();
        let mut order = members.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from(hh).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let m = order.len();
        let n_test = (m as f64 * 0.15).floor() as usize;
        let pool = m - n_test;
        let n_val = (pool as f64 * 0.10).floor() as usize;
        for &i in &order[0..n_test] {
            tags[i] = Split::Test;
        }
        for &i in &order[n_test..n_test + n_val] {
            tags[i] = Split::Validation;
        }
    }
    dataset.splits = Some(tags);
}

/// Standardize consumption in place using training-split statistics, storing
/// them for later de-normalization. Population standard deviation.
pub fn normalize(dataset: &mut WindowedDataset) -> Result<NormStats, DataError> {
    let train = dataset.indices_of(Split::Train);
    if dataset.splits.is_none() {
        return Err(DataError::SplitMissing);
    }
    let t_len = dataset.y.cols();
    let mut sum = 0.0;
    let mut count = 0usize;
    for &i in &train {
        for v in &dataset.y.values()[i * t_len..(i + 1) * t_len] {
            sum += v;
            count += 1;
        }
    }
    let mean = sum / count as f64;
    let mut var = 0.0;
    for &i in &train {
        for v in &dataset.y.values()[i * t_len..(i + 1) * t_len] {
            var += (v - mean) * (v - mean);
        }
    }
    let std = (var / count as f64).sqrt();
    if std == 0.0 {
        return Err(DataError::ZeroStd);
    }
    let stats = NormStats { mean, std };
    dataset
        .y
        .values_mut()
        .iter_mut()
        .for_each(|v| *v = (*v - mean) / std);
    dataset.norm = Some(stats);
    Ok(stats)
}

/// Hour-of-day occupancy transition probabilities: a 0.85/0.85 stay-home /
/// stay-away base with a bias toward occupancy in the morning and evening
/// and away from it during working hours.
pub(crate) fn stay_probabilities(hour: usize) -> (f64, f64) {
    let bias = match hour {
        6..=8 | 17..=22 => 0.10,
        9..=16 => -0.05,
        _ => 0.0,
    };
    (0.85 + bias, 0.85 - bias)
}

const BASE_LOAD_W: f64 = 100.0;
const APPLIANCE_MEDIAN_W: f64 = 400.0;
const APPLIANCE_SIGMA: f64 = 0.4;
const NOISE_STD_W: f64 = 30.0;

/// Generate `n_days` synthetic daily windows. Occupancy follows a two-state
/// Markov chain over hours (see [`stay_probabilities`]); consumption is a
/// base load plus an occupied-state log-normal appliance load and Gaussian
/// noise, clamped at zero. Labels and loads are strongly coupled by
/// construction, so an attacker on raw data resolves occupancy nearly
/// perfectly.
pub fn synthesize_dataset(n_days: usize, seed: u64) -> Result<WindowedDataset, DataError> {
    if n_days < 20 {
        return Err(DataError::TooSmall {
            n: n_days,
            min: 20,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let appliance = LogNormal::new(APPLIANCE_MEDIAN_W.ln(), APPLIANCE_SIGMA).expect("lognormal");
    let noise = Normal::new(0.0, NOISE_STD_W).expect("normal");
    let mut occupied = rng.gen_bool(0.5);
    let mut yv = Vec::with_capacity(n_days * SEQ_LEN);
    let mut xv = Vec::with_capacity(n_days * SEQ_LEN);
    for _ in 0..n_days {
        for hour in 0..SEQ_LEN {
            let (stay_occ, stay_vac) = stay_probabilities(hour);
            let stay = if occupied { stay_occ } else { stay_vac };
            if !rng.gen_bool(stay) {
                occupied = !occupied;
            }
            let mut load = BASE_LOAD_W + noise.sample(&mut rng);
            if occupied {
                load += appliance.sample(&mut rng);
            }
            yv.push(load.max(0.0));
            xv.push(f64::from(occupied));
        }
    }
    Ok(WindowedDataset {
        y: Tensor::matrix(n_days, SEQ_LEN, yv).expect("synthetic shape"),
        x: Tensor::matrix(n_days, SEQ_LEN, xv).expect("synthetic shape"),
        household: vec![0; n_days],
        splits: None,
        norm: None,
    })
}

/// Pool windows from several households into one dataset, tagging each
/// window with its source index. Split tags and normalization are dropped.
pub fn concat_datasets(parts: &[WindowedDataset]) -> Result<WindowedDataset, DataError> {
    if parts.is_empty() {
        return Err(DataError::Empty);
    }
    let t_len = parts[0].y.cols();
    let mut yv = Vec::new();
    let mut xv = Vec::new();
    let mut household = Vec::new();
    for (hh, part) in parts.iter().enumerate() {
        yv.extend_from_slice(part.y.values());
        xv.extend_from_slice(part.x.values());
        household.extend(std::iter::repeat(hh as u32).take(part.len()));
    }
    let n = household.len();
    Ok(WindowedDataset {
        y: Tensor::matrix(n, t_len, yv).expect("concat shape"),
        x: Tensor::matrix(n, t_len, xv).expect("concat shape"),
        household,
        splits: None,
        norm: None,
    })
}

/// Expand a windowed dataset into an ingestion-format raw series with
/// `samples_per_hour` identical readings per hour; the result survives the
/// CSV round trip through [`load_csv`], [`resample_hourly`] and
/// [`window_daily`] unchanged.
pub fn to_raw_series(dataset: &WindowedDataset, samples_per_hour: usize) -> RawSeries {
    assert!(samples_per_hour >= 1 && 3600 % samples_per_hour == 0);
    let step = 3600 / samples_per_hour as i64;
    let t_len = dataset.y.cols();
    let mut out = RawSeries {
        household_id: "synthetic".into(),
        timestamps: Vec::new(),
        power: Vec::new(),
        occupancy: Vec::new(),
    };
    for day in 0..dataset.len() {
        for hour in 0..t_len {
            let base = (day as i64) * 86400 + (hour as i64) * 3600;
            let y = dataset.y.get2(day, hour);
            let x = dataset.x.get2(day, hour) as u8;
            for s in 0..samples_per_hour {
                out.timestamps.push(base + s as i64 * step);
                out.power.push(y);
                out.occupancy.push(x);
            }
        }
    }
    out
}

/// Serialize a raw series in the ingestion CSV format.
pub fn write_csv(series: &RawSeries, path: impl AsRef<Path>) -> Result<(), DataError> {
    use std::io::Write;
    let path = path.as_ref();
    let mut buf = String::from("timestamp,power_w,occupancy\n");
    for i in 0..series.len() {
        buf.push_str(&format!(
            "{},{},{}\n",
            series.timestamps[i], series.power[i], series.occupancy[i]
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(buf.as_bytes()).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
