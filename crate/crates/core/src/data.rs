//! Dataset ingestion, normalization, windowing and synthetic data.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use log::warn;
use ndarray::{s, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::series::ChannelSeries;

/// Hourly ETT rows per month in the standard 12/4/4-month split.
const ETT_HOURLY_MONTH: usize = 30 * 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Per-channel z-score statistics, fitted on the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channel_names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    fn fit(raw: &ChannelSeries, rows: Range<usize>, names: &[String]) -> Result<Self> {
        let n = rows.len() as f64;
        let mut mean = Vec::with_capacity(raw.channels());
        let mut std = Vec::with_capacity(raw.channels());
        for (c, name) in names.iter().enumerate() {
            let values = raw.channel(c);
            let values = values.slice(s![rows.clone()]);
            let mu = values.sum() / n;
            let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd.is_nan() || sd <= 0.0 {
                return Err(Error::Data(format!(
                    "channel {name:?} is constant over the training rows"
                )));
            }
            mean.push(mu);
            std.push(sd);
        }
        Ok(Self {
            channel_names: names.to_vec(),
            mean,
            std,
        })
    }

    pub fn normalize(&self, raw: &ChannelSeries) -> ChannelSeries {
        let mut out = raw.clone();
        for (c, mut row) in out.as_array_mut().axis_iter_mut(Axis(0)).enumerate() {
            let (mu, sd) = (self.mean[c], self.std[c]);
            row.mapv_inplace(|v| (v - mu) / sd);
        }
        out
    }

    pub fn denormalize(&self, normalized: &ChannelSeries) -> ChannelSeries {
        let mut out = normalized.clone();
        for (c, mut row) in out.as_array_mut().axis_iter_mut(Axis(0)).enumerate() {
            let (mu, sd) = (self.mean[c], self.std[c]);
            row.mapv_inplace(|v| v * sd + mu);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// An immutable multi-channel dataset with chronological splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub raw: ChannelSeries,
    pub normalized: ChannelSeries,
    pub channel_names: Vec<String>,
    /// Train, validation and test row ranges.
    pub splits: [Range<usize>; 3],
    pub norm: NormStats,
    /// SHA-256 of the source bytes (CSV file, or raw values for generated data).
    pub content_hash: String,
    /// When false, validation/test lookbacks may reach into the previous split.
    pub strict_splits: bool,
}

/// One normalized `(lookback, target)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub x: ChannelSeries,
    pub y: ChannelSeries,
}

/// Start rows of every admissible window of one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Windows {
    pub starts: Vec<usize>,
    pub lookback: usize,
    pub horizon: usize,
}

impl Windows {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

impl Dataset {
    /// Builds a dataset from raw values, computing norm stats on `splits[0]`.
    pub fn from_raw(
        name: impl Into<String>,
        raw: ChannelSeries,
        channel_names: Vec<String>,
        splits: [Range<usize>; 3],
        content_hash: String,
    ) -> Result<Self> {
        if channel_names.len() != raw.channels() {
            return Err(Error::Data("channel name count does not match data".into()));
        }
        let total = raw.len();
        let ordered = splits[0].start == 0
            && splits[0].end == splits[1].start
            && splits[1].end == splits[2].start
            && splits[2].end <= total
            && splits.iter().all(|r| !r.is_empty());
        if !ordered {
            return Err(Error::Data(format!(
                "splits {splits:?} are not contiguous, non-empty and within {total} rows"
            )));
        }
        let norm = NormStats::fit(&raw, splits[0].clone(), &channel_names)?;
        let normalized = norm.normalize(&raw);
        Ok(Self {
            name: name.into(),
            raw,
            normalized,
            channel_names,
            splits,
            norm,
            content_hash,
            strict_splits: false,
        })
    }

    pub fn with_strict_splits(mut self, strict: bool) -> Self {
        self.strict_splits = strict;
        self
    }

    pub fn channels(&self) -> usize {
        self.raw.channels()
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        self.splits[split.index()].clone()
    }

    /// Rows a split's windows may read: its own rows, plus `lookback` rows of
    /// the preceding split unless splits are strict.
    fn window_segment(&self, split: Split, lookback: usize) -> Range<usize> {
        let r = self.split_range(split);
        if self.strict_splits || split == Split::Train {
            r
        } else {
            r.start.saturating_sub(lookback)..r.end
        }
    }

    /// Every window of `split` with the given stride, in chronological order.
    /// Targets never leave the split; the count is
    /// `⌈(segment_len − M − N + 1) / stride⌉`.
    pub fn windows(&self, split: Split, lookback: usize, horizon: usize, stride: usize) -> Windows {
        let seg = self.window_segment(split, lookback);
        let stride = stride.max(1);
        let starts = if seg.len() >= lookback + horizon {
            (seg.start..=seg.end - lookback - horizon).step_by(stride).collect()
        } else {
            warn!(
                "{} split of {} has {} rows, fewer than lookback + horizon = {}",
                split,
                self.name,
                seg.len(),
                lookback + horizon
            );
            Vec::new()
        };
        Windows {
            starts,
            lookback,
            horizon,
        }
    }

    pub fn sample(&self, start: usize, lookback: usize, horizon: usize) -> WindowSample {
        WindowSample {
            x: self.normalized.slice_steps(start, start + lookback),
            y: self.normalized.slice_steps(start + lookback, start + lookback + horizon),
        }
    }

    pub fn samples<'a>(&'a self, windows: &'a Windows) -> impl Iterator<Item = WindowSample> + 'a {
        windows
            .starts
            .iter()
            .map(|&s| self.sample(s, windows.lookback, windows.horizon))
    }

    /// Stacks the selected windows into `(B, C, M)` inputs and `(B, C, N)` targets.
    pub fn batch(&self, starts: &[usize], lookback: usize, horizon: usize) -> (Array3<f64>, Array3<f64>) {
        let c = self.channels();
        let data = self.normalized.as_array();
        let mut x = Array3::zeros((starts.len(), c, lookback));
        let mut y = Array3::zeros((starts.len(), c, horizon));
        for (b, &start) in starts.iter().enumerate() {
            x.index_axis_mut(Axis(0), b)
                .assign(&data.slice(s![.., start..start + lookback]));
            y.index_axis_mut(Axis(0), b)
                .assign(&data.slice(s![.., start + lookback..start + lookback + horizon]));
        }
        (x, y)
    }

    /// Fails unless every split yields at least one `(M, N)` window.
    pub fn check_supports(&self, lookback: usize, horizon: usize) -> Result<()> {
        for split in [Split::Train, Split::Val, Split::Test] {
            let seg = self.window_segment(split, lookback);
            if seg.len() < lookback + horizon {
                return Err(Error::Data(format!(
                    "{split} split of {} has {} usable rows; lookback {lookback} + horizon {horizon} do not fit",
                    self.name,
                    seg.len()
                )));
            }
        }
        Ok(())
    }
}

/// Standard split for a file: ETTh* 12/4/4 months of hourly rows, ETTm* the
/// same months at 15-minute resolution, anything else 70/10/20 by row count.
pub fn standard_splits(file_name: &str, rows: usize) -> Result<[Range<usize>; 3]> {
    let ett_scale = if file_name.starts_with("ETTh") {
        Some(1)
    } else if file_name.starts_with("ETTm") {
        Some(4)
    } else {
        None
    };
    if let Some(scale) = ett_scale {
        let month = ETT_HOURLY_MONTH * scale;
        let (train, val, test) = (12 * month, 4 * month, 4 * month);
        if rows < train + val + test {
            return Err(Error::Data(format!(
                "{file_name} has {rows} rows; the ETT split needs {}",
                train + val + test
            )));
        }
        return Ok([0..train, train..train + val, train + val..train + val + test]);
    }
    let train = rows * 7 / 10;
    let test = rows * 2 / 10;
    let val = rows - train - test;
    Ok([0..train, train..train + val, train + val..rows])
}

/// Reads an ETT-style CSV: a header row, a timestamp column named
/// `date_column` (ignored) and numeric channels in file order.
pub fn load_csv(path: impl AsRef<Path>, date_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let content_hash = hex_digest(&bytes);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes.as_slice());
    let headers = reader.headers()?.clone();
    let date_idx = headers.iter().position(|h| h == date_column);
    let channel_cols: Vec<usize> = (0..headers.len()).filter(|&i| Some(i) != date_idx).collect();
    if channel_cols.is_empty() {
        return Err(Error::Data(format!("{} has no numeric columns", path.display())));
    }
    let channel_names: Vec<String> = channel_cols.iter().map(|&i| headers[i].to_string()).collect();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); channel_cols.len()];
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        for (slot, &col) in channel_cols.iter().enumerate() {
            let cell = record.get(col).unwrap_or("");
            let value: f64 = cell.trim().parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                // 1-based, counting the header as row 1.
                row: row_idx + 2,
                column: channel_names[slot].clone(),
                value: cell.to_string(),
            })?;
            columns[slot].push(value);
        }
    }
    let rows = columns[0].len();
    if rows < 2 {
        return Err(Error::Data(format!("{} has fewer than two data rows", path.display())));
    }
    let raw = ChannelSeries::from_rows(&columns)?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let splits = standard_splits(&file_name, rows)?;
    let name = file_name.trim_end_matches(".csv").to_string();
    Dataset::from_raw(name, raw, channel_names, splits, content_hash)
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Dynamics assigned to synthetic channels, in rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// Slow sinusoid with a little Gaussian noise.
    Smooth,
    /// Short-period sawtooth with Laplace noise and right-skewed bursts.
    Volatile,
    /// Linear drift with occasional level shifts and moderate noise.
    Trend,
}

/// Parameters of [`synth_heterogeneous`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub smooth_period: f64,
    pub smooth_noise: f64,
    pub saw_period: usize,
    pub saw_amplitude: f64,
    /// Scale `b` of the Laplace noise on volatile channels.
    pub volatile_noise: f64,
    /// Mean of the one-sided exponential bursts on volatile channels. The
    /// bursts are centered, so they skew the noise without biasing it.
    pub burst_scale: f64,
    pub trend_slope: f64,
    /// Expected number of steps between level shifts.
    pub shift_interval: f64,
    pub shift_size: f64,
    pub trend_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            smooth_period: 168.0,
            smooth_noise: 0.02,
            saw_period: 12,
            saw_amplitude: 2.0,
            volatile_noise: 0.1,
            burst_scale: 0.8,
            trend_slope: 2e-4,
            shift_interval: 600.0,
            shift_size: 0.5,
            trend_noise: 0.1,
        }
    }
}

impl SynthSpec {
    pub fn kind_of(channel: usize) -> ChannelKind {
        match channel % 3 {
            0 => ChannelKind::Smooth,
            1 => ChannelKind::Volatile,
            _ => ChannelKind::Trend,
        }
    }
}

fn laplace(rng: &mut impl Rng, scale: f64) -> f64 {
    let u: f64 = rng.random_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}

fn centered_exponential(rng: &mut impl Rng, mean: f64) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -mean * u.ln() - mean
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; one sample per call keeps the stream layout simple.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates `channels` signals of length `len` with deliberately different
/// dynamics (see [`ChannelKind`]), split 70/10/20. Deterministic in `seed`.
pub fn synth_heterogeneous(channels: usize, len: usize, seed: u64, spec: &SynthSpec) -> Result<Dataset> {
    if channels == 0 || len < 10 {
        return Err(Error::Config(format!(
            "synthetic data needs at least one channel and ten steps (got {channels}x{len})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(channels);
    let mut names = Vec::with_capacity(channels);
    for c in 0..channels {
        let kind = SynthSpec::kind_of(c);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let mut level = 0.0;
        let row: Vec<f64> = (0..len)
            .map(|t| {
                let tf = t as f64;
                match kind {
                    ChannelKind::Smooth => {
                        (std::f64::consts::TAU * tf / spec.smooth_period + phase).sin()
                            + spec.smooth_noise * gaussian(&mut rng)
                    }
                    ChannelKind::Volatile => {
                        let p = spec.saw_period;
                        let offset = (phase / std::f64::consts::TAU * p as f64) as usize;
                        let frac = ((t + offset) % p) as f64 / p as f64;
                        spec.saw_amplitude * (frac - 0.5)
                            + laplace(&mut rng, spec.volatile_noise)
                            + centered_exponential(&mut rng, spec.burst_scale)
                    }
                    ChannelKind::Trend => {
                        if rng.random::<f64>() < 1.0 / spec.shift_interval {
                            level += spec.shift_size * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        }
                        spec.trend_slope * tf + level + spec.trend_noise * gaussian(&mut rng)
                    }
                }
            })
            .collect();
        names.push(format!("{:?}_{c}", kind).to_lowercase());
        rows.push(row);
    }
    let raw = ChannelSeries::from_rows(&rows)?;
    let mut bytes = Vec::with_capacity(8 * channels * len);
    for v in raw.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let splits = standard_splits("synthetic", len)?;
    Dataset::from_raw(
        format!("synthetic_c{channels}_t{len}_s{seed}"),
        raw,
        names,
        splits,
        hex_digest(&bytes),
    )
}

/// Mean absolute step-to-step change of one channel.
pub fn mean_abs_diff(series: &ChannelSeries, channel: usize) -> f64 {
    let row = series.channel(channel);
    let n = row.len();
    if n < 2 {
        return 0.0;
    }
    (1..n).map(|t| (row[t] - row[t - 1]).abs()).sum::<f64>() / (n - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn toy_csv(rows: usize) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        writeln!(f, "date,a,b").unwrap();
        for i in 0..rows {
            writeln!(f, "2020-01-01 {i:02}:00,{},{}", i as f64 * 0.5, ((i * 7) % 11) as f64).unwrap();
        }
        f
    }

    #[test]
    fn ratio_split_on_toy_csv() {
        let f = toy_csv(100);
        let ds = load_csv(f.path(), "date").unwrap();
        assert_eq!(ds.channels(), 2);
        assert_eq!(ds.channel_names, vec!["a", "b"]);
        assert_eq!(ds.splits, [0..70, 70..80, 80..100]);
    }

    #[test]
    fn train_split_is_standardized() {
        let f = toy_csv(100);
        let ds = load_csv(f.path(), "date").unwrap();
        for c in 0..2 {
            let row = ds.normalized.channel(c);
            let train = row.slice(s![0..70]);
            let mean = train.sum() / 70.0;
            let sd = (train.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 70.0).sqrt();
            assert!(mean.abs() < 1e-10);
            assert!((sd - 1.0).abs() < 1e-10);
        }
        let back = ds.norm.denormalize(&ds.normalized);
        assert!(back.sub(&ds.raw).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn parse_errors_name_row_and_column() {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        writeln!(f, "date,a,b\nx,1,2\ny,3,oops").unwrap();
        match load_csv(f.path(), "date") {
            Err(Error::Parse { row, column, value, .. }) => {
                assert_eq!((row, column.as_str(), value.as_str()), (3, "b", "oops"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_channel_rejected() {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        writeln!(f, "date,a,flat").unwrap();
        for i in 0..20 {
            writeln!(f, "{i},{i},3.0").unwrap();
        }
        let err = load_csv(f.path(), "date").unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("flat")), "{err}");
    }

    #[test]
    fn ett_split_sizes() {
        assert_eq!(
            standard_splits("ETTh1.csv", 17420).unwrap(),
            [0..8640, 8640..11520, 11520..14400]
        );
        assert_eq!(standard_splits("ETTm2.csv", 69680).unwrap()[2], 46080..57600);
        assert!(standard_splits("ETTh2.csv", 1000).is_err());
    }

    #[test]
    fn window_counts_and_adjacency() {
        let raw = ChannelSeries::from_rows(&[(0..40).map(|v| v as f64).collect()]).unwrap();
        let ds = Dataset::from_raw("toy", raw, vec!["a".into()], [0..10, 10..20, 20..40], String::new())
            .unwrap()
            .with_strict_splits(true);
        let w = ds.windows(Split::Train, 4, 2, 1);
        assert_eq!(w.len(), 5);
        let first = ds.sample(w.starts[0], 4, 2);
        assert_eq!(first.y, ds.normalized.slice_steps(4, 6));
        assert_eq!(ds.windows(Split::Train, 4, 2, 2).len(), 3);
        assert!(ds.windows(Split::Val, 8, 4, 1).is_empty());
    }

    #[test]
    fn borderless_lookback_reaches_previous_split_but_labels_do_not() {
        let raw = ChannelSeries::from_rows(&[(0..40).map(|v| (v * v) as f64).collect()]).unwrap();
        let ds = Dataset::from_raw("toy", raw, vec!["a".into()], [0..10, 10..20, 20..40], String::new()).unwrap();
        for split in [Split::Val, Split::Test] {
            let range = ds.split_range(split);
            let w = ds.windows(split, 4, 3, 1);
            assert_eq!(w.len(), range.len() - 3 + 1);
            for &s in &w.starts {
                assert!(s + 4 >= range.start && s + 4 + 3 <= range.end);
            }
        }
        let strict = ds.clone().with_strict_splits(true);
        assert_eq!(strict.windows(Split::Test, 4, 3, 1).len(), 20 - 4 - 3 + 1);
    }

    #[test]
    fn batch_matches_samples() {
        let ds = synth_heterogeneous(3, 400, 1, &SynthSpec::default()).unwrap();
        let w = ds.windows(Split::Val, 16, 8, 1);
        let (x, y) = ds.batch(&w.starts[..3], 16, 8);
        for (b, sample) in ds.samples(&w).take(3).enumerate() {
            assert_eq!(x.index_axis(Axis(0), b), sample.x.as_array().view());
            assert_eq!(y.index_axis(Axis(0), b), sample.y.as_array().view());
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_heterogeneous() {
        let spec = SynthSpec::default();
        let a = synth_heterogeneous(3, 2000, 42, &spec).unwrap();
        let b = synth_heterogeneous(3, 2000, 42, &spec).unwrap();
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.content_hash, b.content_hash);
        assert_ne!(a.raw, synth_heterogeneous(3, 2000, 43, &spec).unwrap().raw);
        let smooth = mean_abs_diff(&a.raw, 0);
        let volatile = mean_abs_diff(&a.raw, 1);
        assert!(smooth < 0.1 * volatile, "smooth {smooth} volatile {volatile}");
        let single = synth_heterogeneous(1, 500, 0, &spec).unwrap();
        assert_eq!(single.channel_names, vec!["smooth_0"]);
    }

    #[test]
    fn supports_check() {
        let ds = synth_heterogeneous(2, 200, 0, &SynthSpec::default()).unwrap();
        assert!(ds.check_supports(16, 8).is_ok());
        assert!(matches!(ds.check_supports(96, 96), Err(Error::Data(_))));
    }

    #[test]
    fn norm_stats_json() {
        let ds = synth_heterogeneous(2, 200, 0, &SynthSpec::default()).unwrap();
        let json = ds.norm.to_json().unwrap();
        let back: NormStats = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ds.norm);
    }
}
