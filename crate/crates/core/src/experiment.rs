//! Experiment sweeps: loss comparisons across horizons and seeds, and the
//! pyramid-scale ablation. Produces JSON/CSV reports and an aligned table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{load_csv, synth_heterogeneous, Dataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::filter::max_scales;
use crate::losses::LossKind;
use crate::train::{evaluate, save_history, train, Metrics, TrainConfig};

/// Where an experiment's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf, date_column: String },
    Synthetic { channels: usize, len: usize, seed: u64 },
}

impl DataSource {
    pub fn csv(path: impl Into<PathBuf>) -> Self {
        DataSource::Csv {
            path: path.into(),
            date_column: "date".into(),
        }
    }

    pub fn load(&self, strict_splits: bool) -> Result<Dataset> {
        let ds = match self {
            DataSource::Csv { path, date_column } => load_csv(path, date_column)?,
            DataSource::Synthetic { channels, len, seed } => {
                synth_heterogeneous(*channels, *len, *seed, &SynthSpec::default())?
            }
        };
        Ok(ds.with_strict_splits(strict_splits))
    }
}

/// Inputs of [`run_compare`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSpec {
    pub lookback: usize,
    pub horizons: Vec<usize>,
    pub losses: Vec<LossKind>,
    pub seeds: Vec<u64>,
    /// Loss, seed and (for the ablation) scales are overridden per cell.
    pub train: TrainConfig,
    pub strict_splits: bool,
}

/// Inputs of [`run_scale_ablation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub scales: Vec<usize>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub strict_splits: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub content_hash: String,
    pub channels: usize,
    pub rows: usize,
    pub channel_names: Vec<String>,
}

impl DatasetInfo {
    fn of(ds: &Dataset) -> Self {
        Self {
            name: ds.name.clone(),
            content_hash: ds.content_hash.clone(),
            channels: ds.channels(),
            rows: ds.raw.len(),
            channel_names: ds.channel_names.clone(),
        }
    }
}

/// Test metrics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub test: Metrics,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Learned filter kernels (CP loss only), channel-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_kernels: Option<Vec<Vec<f64>>>,
}

/// One `(horizon, loss[, scales])` cell, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub horizon: usize,
    pub loss: LossKind,
    /// Scales actually used (CP loss only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales: Option<usize>,
    /// Learnable filter values (CP loss only); `C · k`, independent of scales.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_param_count: Option<usize>,
    pub mse: f64,
    pub mae: f64,
    pub per_channel_mse: Vec<f64>,
    pub per_channel_mae: Vec<f64>,
    pub runs: Vec<SeedRun>,
}

/// Mean over horizons for one loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossAverage {
    pub loss: LossKind,
    pub mse: f64,
    pub mae: f64,
    pub horizons: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Compare,
    ScaleAblation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ReportKind,
    pub source: DataSource,
    pub dataset: DatasetInfo,
    pub lookback: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub strict_splits: bool,
    pub cells: Vec<Cell>,
    pub averages: Vec<LossAverage>,
    pub skipped: Vec<String>,
    /// Wall-clock time; the only field that varies between identical runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn mean_vec(rows: &[&[f64]]) -> Vec<f64> {
    let width = rows.first().map_or(0, |r| r.len());
    (0..width).map(|i| mean(rows.iter().map(|r| r[i]))).collect()
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    ds: &Dataset,
    base: &TrainConfig,
    lookback: usize,
    horizon: usize,
    loss: LossKind,
    scales: Option<usize>,
    seeds: &[u64],
    history_dir: Option<&Path>,
) -> Result<Cell> {
    let mut runs = Vec::with_capacity(seeds.len());
    let mut used_scales = None;
    let mut param_count = None;
    for &seed in seeds {
        let cfg = TrainConfig {
            loss,
            seed,
            scales: scales.unwrap_or(base.scales),
            ..base.clone()
        };
        let outcome = train(&cfg, ds, lookback, horizon)?;
        let test = evaluate(&outcome.model, ds, Split::Test, lookback, horizon)?;
        info!(
            "{} N={horizon} loss={loss} seed={seed}: test mse {:.4} mae {:.4}",
            ds.name, test.mse, test.mae
        );
        if let Some(dir) = history_dir {
            let tag = match scales {
                Some(k) => format!("h{horizon}_{loss}_k{k}_s{seed}"),
                None => format!("h{horizon}_{loss}_s{seed}"),
            };
            save_history(dir, &tag, &outcome.history)?;
        }
        if loss == LossKind::Cp {
            used_scales = Some(outcome.scales);
            param_count = outcome.filter.as_ref().map(|f| f.param_count());
        }
        runs.push(SeedRun {
            seed,
            test,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.len(),
            filter_kernels: outcome
                .filter
                .as_ref()
                .map(|f| f.kernels().outer_iter().map(|r| r.to_vec()).collect()),
        });
    }
    let mse_rows: Vec<&[f64]> = runs.iter().map(|r| r.test.per_channel_mse.as_slice()).collect();
    let mae_rows: Vec<&[f64]> = runs.iter().map(|r| r.test.per_channel_mae.as_slice()).collect();
    Ok(Cell {
        horizon,
        loss,
        scales: used_scales,
        filter_param_count: param_count,
        mse: mean(runs.iter().map(|r| r.test.mse)),
        mae: mean(runs.iter().map(|r| r.test.mae)),
        per_channel_mse: mean_vec(&mse_rows),
        per_channel_mae: mean_vec(&mae_rows),
        runs,
    })
}

fn loss_averages(cells: &[Cell]) -> Vec<LossAverage> {
    let mut by_loss: BTreeMap<LossKind, Vec<&Cell>> = BTreeMap::new();
    for c in cells {
        by_loss.entry(c.loss).or_default().push(c);
    }
    by_loss
        .into_iter()
        .map(|(loss, cs)| LossAverage {
            loss,
            mse: mean(cs.iter().map(|c| c.mse)),
            mae: mean(cs.iter().map(|c| c.mae)),
            horizons: cs.iter().map(|c| c.horizon).collect(),
        })
        .collect()
}

fn check_nonempty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Config(format!("at least one {what} is required")));
    }
    Ok(())
}

/// Full `horizons × losses × seeds` sweep; cells are averaged over seeds.
/// Horizons the dataset cannot support are skipped with a warning.
pub fn run_compare(source: &DataSource, spec: &CompareSpec, history_dir: Option<&Path>) -> Result<ExperimentReport> {
    check_nonempty(&spec.horizons, "horizon")?;
    check_nonempty(&spec.losses, "loss")?;
    check_nonempty(&spec.seeds, "seed")?;
    spec.train.validate()?;
    let started = Instant::now();
    let ds = source.load(spec.strict_splits)?;
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for &horizon in &spec.horizons {
        if let Err(e) = ds.check_supports(spec.lookback, horizon) {
            warn!("skipping horizon {horizon}: {e}");
            skipped.push(format!("horizon {horizon}: {e}"));
            continue;
        }
        for &loss in &spec.losses {
            cells.push(run_cell(&ds, &spec.train, spec.lookback, horizon, loss, None, &spec.seeds, history_dir)?);
        }
    }
    Ok(ExperimentReport {
        kind: ReportKind::Compare,
        source: source.clone(),
        dataset: DatasetInfo::of(&ds),
        lookback: spec.lookback,
        seeds: spec.seeds.clone(),
        train: spec.train.clone(),
        strict_splits: spec.strict_splits,
        averages: loss_averages(&cells),
        cells,
        skipped,
        wall_clock_seconds: Some(started.elapsed().as_secs_f64()),
    })
}

/// Trains with the CP loss at each requested scale count and reports test
/// metrics per scale. Scale counts the horizon cannot support are skipped.
pub fn run_scale_ablation(source: &DataSource, spec: &AblationSpec, history_dir: Option<&Path>) -> Result<ExperimentReport> {
    check_nonempty(&spec.scales, "scale count")?;
    check_nonempty(&spec.seeds, "seed")?;
    spec.train.validate()?;
    let started = Instant::now();
    let ds = source.load(spec.strict_splits)?;
    ds.check_supports(spec.lookback, spec.horizon)?;
    let max_k = max_scales(spec.horizon);
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for &k in &spec.scales {
        if k == 0 || k > max_k {
            warn!("skipping K={k}: horizon {} admits at most K={max_k}", spec.horizon);
            skipped.push(format!("scales {k}: horizon {} admits at most {max_k}", spec.horizon));
            continue;
        }
        cells.push(run_cell(&ds, &spec.train, spec.lookback, spec.horizon, LossKind::Cp, Some(k), &spec.seeds, history_dir)?);
    }
    Ok(ExperimentReport {
        kind: ReportKind::ScaleAblation,
        source: source.clone(),
        dataset: DatasetInfo::of(&ds),
        lookback: spec.lookback,
        seeds: spec.seeds.clone(),
        train: TrainConfig { loss: LossKind::Cp, ..spec.train.clone() },
        strict_splits: spec.strict_splits,
        averages: loss_averages(&cells),
        cells,
        skipped,
        wall_clock_seconds: Some(started.elapsed().as_secs_f64()),
    })
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON with the wall-clock field removed; identical for identical runs.
    pub fn canonical_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.wall_clock_seconds = None;
        copy.to_json()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn cell(&self, horizon: usize, loss: LossKind) -> Option<&Cell> {
        self.cells.iter().find(|c| c.horizon == horizon && c.loss == loss)
    }

    pub fn average(&self, loss: LossKind) -> Option<&LossAverage> {
        self.averages.iter().find(|a| a.loss == loss)
    }

    /// One CSV row per cell.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["horizon", "loss", "scales", "filter_params", "mse", "mae", "seeds"])?;
        for c in &self.cells {
            w.write_record([
                c.horizon.to_string(),
                c.loss.to_string(),
                c.scales.map_or(String::new(), |k| k.to_string()),
                c.filter_param_count.map_or(String::new(), |p| p.to_string()),
                c.mse.to_string(),
                c.mae.to_string(),
                c.runs.len().to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Aligned text table with three-decimal cells.
    pub fn table(&self) -> String {
        match self.kind {
            ReportKind::Compare => self.compare_table(),
            ReportKind::ScaleAblation => self.ablation_table(),
        }
    }

    fn compare_table(&self) -> String {
        let losses: Vec<LossKind> = self.averages.iter().map(|a| a.loss).collect();
        let mut horizons: Vec<usize> = self.cells.iter().map(|c| c.horizon).collect();
        horizons.dedup();
        let mut out = String::new();
        let _ = write!(out, "{:<8}", self.dataset.name);
        for l in &losses {
            let _ = write!(out, " | {:^15}", label(*l));
        }
        out.push('\n');
        let _ = write!(out, "{:<8}", "horizon");
        for _ in &losses {
            let _ = write!(out, " | {:>7} {:>7}", "MSE", "MAE");
        }
        out.push('\n');
        for h in &horizons {
            let _ = write!(out, "{:<8}", h);
            for l in &losses {
                match self.cell(*h, *l) {
                    Some(c) => {
                        let _ = write!(out, " | {:>7.3} {:>7.3}", c.mse, c.mae);
                    }
                    None => {
                        let _ = write!(out, " | {:>7} {:>7}", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<8}", "Avg");
        for a in &self.averages {
            let _ = write!(out, " | {:>7.3} {:>7.3}", a.mse, a.mae);
        }
        out.push('\n');
        out
    }

    fn ablation_table(&self) -> String {
        let mut out = format!("{:<8} | {:>7} {:>7} | {:>7}\n", "scales", "MSE", "MAE", "params");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:<8} | {:>7.3} {:>7.3} | {:>7}",
                c.scales.unwrap_or(0),
                c.mse,
                c.mae,
                c.filter_param_count.unwrap_or(0)
            );
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("report.csv"), self.to_csv()?)?;
        Ok(())
    }
}

fn label(loss: LossKind) -> &'static str {
    match loss {
        LossKind::Mse => "Vanilla (MSE)",
        LossKind::Mae => "MAE",
        LossKind::Cp => "CP Loss",
    }
}
