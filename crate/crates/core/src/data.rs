//! Vacant-space count ingestion, min-max scaling, sliding windows and the
//! chronological train/test split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fsutil::{csv_to_bytes, write_atomic};

/// Longest run of consecutive missing steps per column that forward-fill
/// will bridge (30 minutes at the 5-minute source interval).
pub const MAX_GAP_STEPS: usize = 6;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Parses ISO-8601 timestamps with or without an offset; offsets are
/// converted to UTC.
pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.naive_utc());
    }
    for fmt in [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt);
        }
    }
    Err(Error::Ingestion(format!("unparseable timestamp {s:?}")))
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

/// Per-column `(min, max)` pairs fitted on a prefix of the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub columns: Vec<(f64, f64)>,
}

impl MinMaxScaler {
    pub fn fit(values: &Tensor, rows: usize) -> Result<Self> {
        let (t, n) = values.dims2()?;
        if rows == 0 || rows > t {
            return Err(Error::Contract(format!(
                "scaler fit rows must be in 1..={t}, got {rows}"
            )));
        }
        let columns = (0..n)
            .map(|j| {
                (0..rows).map(|i| values.at(i, j)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                })
            })
            .collect();
        Ok(MinMaxScaler { columns })
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn scale(&self, column: usize, v: f64) -> f64 {
        let (lo, hi) = self.columns[column];
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    pub fn unscale(&self, column: usize, v: f64) -> f64 {
        let (lo, hi) = self.columns[column];
        v * (hi - lo) + lo
    }

    fn apply(&self, values: &Tensor, f: impl Fn(&Self, usize, f64) -> f64) -> Result<Tensor> {
        let n = *values.shape().last().unwrap();
        if n != self.columns.len() {
            return Err(Error::shape("scaler", values.shape(), &[self.columns.len()]));
        }
        let data = values
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(self, i % n, v))
            .collect();
        Tensor::new(values.shape(), data)
    }

    /// Scales every row (last axis = columns) of `values`.
    pub fn transform(&self, values: &Tensor) -> Result<Tensor> {
        self.apply(values, Self::scale)
    }
}

/// Inverse of min-max scaling for any tensor whose last axis is the site axis.
pub fn denormalize(values: &Tensor, scaler: &MinMaxScaler) -> Result<Tensor> {
    scaler.apply(values, MinMaxScaler::unscale)
}

/// Where the scaler's `(min, max)` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalingMode {
    /// Only the first `n` rows (the training portion).
    TrainingRows(usize),
    /// Every row, as when scaling all data before the split.
    Global,
}

/// Evenly spaced `T x N` matrix of counts, one column per site.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesPanel {
    timestamps: Vec<NaiveDateTime>,
    interval_minutes: u32,
    values: Tensor,
    site_order: Vec<String>,
    scaler: Option<MinMaxScaler>,
}

impl TimeSeriesPanel {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        interval_minutes: u32,
        values: Tensor,
        site_order: Vec<String>,
    ) -> Result<Self> {
        let (t, n) = values.dims2()?;
        if t != timestamps.len() || n != site_order.len() {
            return Err(Error::shape("panel", &[t, n], &[timestamps.len(), site_order.len()]));
        }
        if interval_minutes == 0 {
            return Err(Error::Contract("interval must be positive".into()));
        }
        let step = chrono::Duration::minutes(interval_minutes as i64);
        if let Some(w) = timestamps.windows(2).find(|w| w[1] - w[0] != step) {
            return Err(Error::Ingestion(format!(
                "timestamps {} and {} are not {interval_minutes} minutes apart",
                format_timestamp(&w[0]),
                format_timestamp(&w[1])
            )));
        }
        Ok(TimeSeriesPanel {
            timestamps,
            interval_minutes,
            values,
            site_order,
            scaler: None,
        })
    }

    /// Panel with timestamps generated from `start` at a fixed interval.
    pub fn from_values(start: NaiveDateTime, interval_minutes: u32, values: Tensor, site_order: Vec<String>) -> Result<Self> {
        let (t, _) = values.dims2()?;
        let step = chrono::Duration::minutes(interval_minutes as i64);
        let timestamps = (0..t).map(|i| start + step * i as i32).collect();
        Self::new(timestamps, interval_minutes, values, site_order)
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn site_order(&self) -> &[String] {
        &self.site_order
    }

    pub fn scaler(&self) -> Option<&MinMaxScaler> {
        self.scaler.as_ref()
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_sites(&self) -> usize {
        self.site_order.len()
    }

    /// Errors unless the columns are exactly `sites`, in order.
    pub fn check_site_order(&self, sites: &[String]) -> Result<()> {
        if self.site_order != sites {
            return Err(Error::Validation(format!(
                "panel sites {:?} do not match graph sites {:?}",
                self.site_order, sites
            )));
        }
        Ok(())
    }

    /// Min-max scales every column, returning a panel that carries its scaler.
    pub fn normalize(&self, mode: ScalingMode) -> Result<Self> {
        if self.scaler.is_some() {
            return Err(Error::Contract("panel is already normalized".into()));
        }
        let rows = match mode {
            ScalingMode::TrainingRows(n) => n,
            ScalingMode::Global => self.len(),
        };
        let scaler = MinMaxScaler::fit(&self.values, rows)?;
        self.with_scaler(scaler)
    }

    /// Scales with an already fitted scaler, e.g. one restored from a checkpoint.
    pub fn with_scaler(&self, scaler: MinMaxScaler) -> Result<Self> {
        if self.scaler.is_some() {
            return Err(Error::Contract("panel is already normalized".into()));
        }
        Ok(TimeSeriesPanel {
            values: scaler.transform(&self.values)?,
            scaler: Some(scaler),
            ..self.clone()
        })
    }

    /// Wide CSV `timestamp,<site_1>,...,<site_N>`.
    pub fn to_csv(&self, path: &Path) -> Result<Vec<u8>> {
        csv_to_bytes(path, |w| {
            let mut header = vec!["timestamp".to_string()];
            header.extend(self.site_order.iter().cloned());
            w.write_record(&header)?;
            for (i, ts) in self.timestamps.iter().enumerate() {
                let mut row = vec![format_timestamp(ts)];
                row.extend(self.values.row(i).iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
            Ok(())
        })
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv(path)?)
    }

    /// Long CSV `timestamp,site_id,available`, the format [`load_series`]
    /// reads.
    pub fn to_long_csv(&self, path: &Path) -> Result<Vec<u8>> {
        csv_to_bytes(path, |w| {
            w.write_record(["timestamp", "site_id", "available"])?;
            for (i, ts) in self.timestamps.iter().enumerate() {
                let ts = format_timestamp(ts);
                for (site, v) in self.site_order.iter().zip(self.values.row(i)) {
                    w.write_record([ts.as_str(), site.as_str(), v.to_string().as_str()])?;
                }
            }
            Ok(())
        })
    }
}

/// Convenience for callers holding an un-normalized panel.
pub fn minmax_normalize(panel: &TimeSeriesPanel, mode: ScalingMode) -> Result<TimeSeriesPanel> {
    panel.normalize(mode)
}

/// A cell that was missing in the source file and filled by the gap policy.
#[derive(Debug, Clone, PartialEq)]
pub struct FilledCell {
    pub timestamp: NaiveDateTime,
    pub site_id: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct Ingest {
    pub panel: TimeSeriesPanel,
    pub filled: Vec<FilledCell>,
}

#[derive(Debug, Deserialize)]
struct SeriesRow {
    timestamp: String,
    site_id: String,
    available: f64,
}

/// Loads a long-format `timestamp,site_id,available` CSV into a panel.
///
/// With `known_sites`, columns follow that order and any other site is a
/// validation error; otherwise columns are the observed sites sorted.
/// Missing cells are forward-filled (a leading gap takes the first observed
/// value) and each fill is reported; a run longer than [`MAX_GAP_STEPS`]
/// aborts ingestion.
pub fn load_series(path: &Path, expected_interval: u32, known_sites: Option<&[String]>) -> Result<Ingest> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut cells: BTreeMap<(NaiveDateTime, String), f64> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: SeriesRow = row.map_err(|e| Error::csv(path, e))?;
        let ts = parse_timestamp(&row.timestamp)?;
        if !row.available.is_finite() {
            return Err(Error::Ingestion(format!(
                "non-finite count at {} for site {}",
                row.timestamp, row.site_id
            )));
        }
        if cells.insert((ts, row.site_id.clone()), row.available).is_some() {
            return Err(Error::Ingestion(format!(
                "duplicate row for timestamp {} and site {}",
                format_timestamp(&ts),
                row.site_id
            )));
        }
    }
    if cells.is_empty() {
        return Err(Error::Ingestion(format!("{}: no rows", path.display())));
    }
    pivot(cells, expected_interval, known_sites)
}

fn pivot(
    cells: BTreeMap<(NaiveDateTime, String), f64>,
    interval: u32,
    known_sites: Option<&[String]>,
) -> Result<Ingest> {
    let observed: BTreeSet<&String> = cells.keys().map(|(_, s)| s).collect();
    let sites: Vec<String> = match known_sites {
        Some(known) => {
            if let Some(unknown) = observed.iter().find(|s| !known.contains(s)) {
                return Err(Error::Validation(format!("unknown site_id {unknown:?}")));
            }
            known.to_vec()
        }
        None => observed.into_iter().cloned().collect(),
    };
    let col: HashMap<&str, usize> = sites.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let times: BTreeSet<NaiveDateTime> = cells.keys().map(|(t, _)| *t).collect();
    let start = *times.iter().next().unwrap();
    let end = *times.iter().next_back().unwrap();
    let step = interval as i64 * 60;
    let off_grid: Vec<String> = times
        .iter()
        .filter(|t| (**t - start).num_seconds() % step != 0)
        .map(format_timestamp)
        .collect();
    if !off_grid.is_empty() {
        return Err(Error::Ingestion(format!(
            "timestamps not on the {interval}-minute grid: {}",
            off_grid.join(", ")
        )));
    }
    let t_len = ((end - start).num_seconds() / step) as usize + 1;
    let n = sites.len();
    let mut grid: Vec<Option<f64>> = vec![None; t_len * n];
    for ((t, s), v) in &cells {
        let row = ((*t - start).num_seconds() / step) as usize;
        grid[row * n + col[s.as_str()]] = Some(*v);
    }

    let timestamps: Vec<NaiveDateTime> = (0..t_len)
        .map(|i| start + chrono::Duration::seconds(step * i as i64))
        .collect();
    let mut values = vec![0.0; t_len * n];
    let mut filled = Vec::new();
    for (j, site) in sites.iter().enumerate() {
        let first = (0..t_len)
            .find_map(|i| grid[i * n + j])
            .ok_or_else(|| Error::Ingestion(format!("site {site} has no observations")))?;
        let mut last = first;
        let mut run = 0;
        for i in 0..t_len {
            match grid[i * n + j] {
                Some(v) => {
                    last = v;
                    run = 0;
                }
                None => {
                    run += 1;
                    if run > MAX_GAP_STEPS {
                        return Err(Error::Ingestion(format!(
                            "site {site}: more than {MAX_GAP_STEPS} consecutive missing steps ending at {}",
                            format_timestamp(&timestamps[i])
                        )));
                    }
                    filled.push(FilledCell {
                        timestamp: timestamps[i],
                        site_id: site.clone(),
                        value: last,
                    });
                }
            }
            values[i * n + j] = last;
        }
    }
    if !filled.is_empty() {
        log::warn!(
            "forward-filled {} missing cells (first: site {} at {})",
            filled.len(),
            filled[0].site_id,
            format_timestamp(&filled[0].timestamp)
        );
    }
    let panel = TimeSeriesPanel::new(timestamps, interval, Tensor::matrix(t_len, n, values)?, sites)?;
    Ok(Ingest { panel, filled })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowMode {
    /// Targets `h` steps past the window, for a horizon-specific model.
    Direct,
    /// One-step targets for the model that iterative roll-out reuses.
    IterativeBase,
}

/// Supervised samples cut from a panel: `inputs[k]` holds rows
/// `k..k+m` and `targets[k]` is row `k+m-1+h`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    inputs: Tensor,
    targets: Tensor,
    window: usize,
    horizon: usize,
    mode: WindowMode,
    target_rows: Vec<usize>,
}

impl WindowedDataset {
    /// Builds a dataset from pre-cut windows `[S, m, N]` and targets `[S, N]`.
    pub fn from_parts(inputs: Tensor, targets: Tensor, horizon: usize, mode: WindowMode, target_rows: Vec<usize>) -> Result<Self> {
        let (s, m, n) = match inputs.shape() {
            &[s, m, n] => (s, m, n),
            other => return Err(Error::shape("windowed inputs", other, &[0, 0, 0])),
        };
        if targets.shape() != [s, n] || target_rows.len() != s {
            return Err(Error::shape("windowed targets", targets.shape(), &[s, n]));
        }
        Ok(WindowedDataset {
            inputs,
            targets,
            window: m,
            horizon,
            mode,
            target_rows,
        })
    }

    pub fn len(&self) -> usize {
        self.target_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_rows.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn mode(&self) -> WindowMode {
        self.mode
    }

    pub fn num_sites(&self) -> usize {
        self.inputs.shape()[2]
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    /// Panel row index of each sample's target.
    pub fn target_rows(&self) -> &[usize] {
        &self.target_rows
    }

    /// Panel row index of each sample's first input row.
    pub fn input_start_rows(&self) -> Vec<usize> {
        self.target_rows
            .iter()
            .map(|r| r + 1 - self.horizon - self.window)
            .collect()
    }

    /// Gathers samples into `([B, m, N], [B, N])` tensors.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        if indices.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let (m, n) = (self.window, self.num_sites());
        let mut x = Vec::with_capacity(indices.len() * m * n);
        let mut y = Vec::with_capacity(indices.len() * n);
        for &k in indices {
            if k >= self.len() {
                return Err(Error::Contract(format!("sample {k} out of range {}", self.len())));
            }
            x.extend_from_slice(&self.inputs.data()[k * m * n..(k + 1) * m * n]);
            y.extend_from_slice(self.targets.row(k));
        }
        Ok((
            Tensor::new(&[indices.len(), m, n], x)?,
            Tensor::matrix(indices.len(), n, y)?,
        ))
    }

    /// Contiguous sub-range of samples.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > self.len() {
            return Err(Error::Contract(format!(
                "sample range {range:?} invalid for {} samples",
                self.len()
            )));
        }
        let idx: Vec<usize> = range.clone().collect();
        let (inputs, targets) = self.batch(&idx)?;
        Ok(WindowedDataset {
            inputs,
            targets,
            target_rows: self.target_rows[range].to_vec(),
            ..self.clone()
        })
    }
}

/// Cuts every length-`m` window with its target `h` steps past the window end.
///
/// ```
/// use stgbgru::autodiff::Tensor;
/// use stgbgru::data::{sliding_windows, TimeSeriesPanel};
///
/// let values = Tensor::matrix(15, 1, (0..15).map(f64::from).collect()).unwrap();
/// let start = "2018-05-11T00:00:00".parse().unwrap();
/// let panel = TimeSeriesPanel::from_values(start, 5, values, vec!["St1".into()]).unwrap();
/// let ds = sliding_windows(&panel, 12, 1).unwrap();
/// assert_eq!(ds.len(), 3);
/// assert_eq!(ds.targets().data(), &[12.0, 13.0, 14.0]);
/// ```
pub fn sliding_windows(panel: &TimeSeriesPanel, m: usize, h: usize) -> Result<WindowedDataset> {
    windows_with_mode(panel, m, h, WindowMode::Direct)
}

/// One-step windows tagged for iterative roll-out.
pub fn iterative_base_windows(panel: &TimeSeriesPanel, m: usize) -> Result<WindowedDataset> {
    windows_with_mode(panel, m, 1, WindowMode::IterativeBase)
}

fn windows_with_mode(panel: &TimeSeriesPanel, m: usize, h: usize, mode: WindowMode) -> Result<WindowedDataset> {
    if h < 1 {
        return Err(Error::Contract("horizon must be at least one step".into()));
    }
    if m < 1 {
        return Err(Error::Contract("window length must be at least one step".into()));
    }
    let t = panel.len();
    if t < m + h {
        return Err(Error::InsufficientData {
            needed: m + h,
            available: t,
        });
    }
    let n = panel.num_sites();
    let samples = t - m - h + 1;
    let v = panel.values().data();
    let mut inputs = Vec::with_capacity(samples * m * n);
    let mut targets = Vec::with_capacity(samples * n);
    for k in 0..samples {
        inputs.extend_from_slice(&v[k * n..(k + m) * n]);
        let r = k + m - 1 + h;
        targets.extend_from_slice(&v[r * n..(r + 1) * n]);
    }
    Ok(WindowedDataset {
        inputs: Tensor::new(&[samples, m, n], inputs)?,
        targets: Tensor::matrix(samples, n, targets)?,
        window: m,
        horizon: h,
        mode,
        target_rows: (0..samples).map(|k| k + m - 1 + h).collect(),
    })
}

/// Chronological split: the first `floor(ratio * S)` samples train.
pub fn train_test_split(dataset: &WindowedDataset, ratio: f64) -> Result<(WindowedDataset, WindowedDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Contract(format!("train ratio must be in (0, 1), got {ratio}")));
    }
    let s = dataset.len();
    let n_train = (ratio * s as f64).floor() as usize;
    if n_train == 0 || n_train == s {
        return Err(Error::Contract(format!(
            "split of {s} samples at ratio {ratio} leaves one side empty"
        )));
    }
    Ok((dataset.slice(0..n_train)?, dataset.slice(n_train..s)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s).unwrap()
    }

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "timestamp,site_id,available").unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    fn ramp_panel(t: usize, n: usize) -> TimeSeriesPanel {
        let values = Tensor::matrix(t, n, (0..t * n).map(|v| v as f64).collect()).unwrap();
        let sites = (0..n).map(|j| format!("S{j}")).collect();
        TimeSeriesPanel::from_values(ts("2018-05-11T00:00:00"), 5, values, sites).unwrap()
    }

    #[test]
    fn timestamp_formats() {
        let a = ts("2018-05-11T08:05:00");
        assert_eq!(ts("2018-05-11 08:05:00"), a);
        assert_eq!(ts("2018-05-11T08:05"), a);
        assert_eq!(ts("2018-05-11T01:05:00-07:00"), a);
        assert!(parse_timestamp("yesterday").is_err());
    }

    #[test]
    fn complete_pivot() {
        let f = write_csv(
            "2018-05-11T00:00:00,b,3\n2018-05-11T00:00:00,a,1\n2018-05-11T00:05:00,a,2\n\
             2018-05-11T00:05:00,b,4\n2018-05-11T00:10:00,a,5\n2018-05-11T00:10:00,b,6\n",
        );
        let ing = load_series(f.path(), 5, None).unwrap();
        assert!(ing.filled.is_empty());
        let p = ing.panel;
        assert_eq!(p.values().shape(), &[3, 2]);
        assert_eq!(p.site_order(), &["a", "b"]);
        assert_eq!(p.values().data(), &[1.0, 3.0, 2.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn missing_cell_is_forward_filled() {
        let f = write_csv(
            "2018-05-11T00:00:00,a,1\n2018-05-11T00:00:00,b,3\n2018-05-11T00:05:00,a,2\n\
             2018-05-11T00:10:00,a,5\n2018-05-11T00:10:00,b,6\n",
        );
        let ing = load_series(f.path(), 5, None).unwrap();
        assert_eq!(ing.filled.len(), 1);
        assert_eq!(ing.filled[0].site_id, "b");
        assert_eq!(ing.panel.values().at(1, 1), 3.0);
    }

    #[test]
    fn leading_gap_uses_first_observation() {
        let f = write_csv("2018-05-11T00:00:00,a,1\n2018-05-11T00:05:00,a,2\n2018-05-11T00:05:00,b,7\n");
        let ing = load_series(f.path(), 5, None).unwrap();
        assert_eq!(ing.panel.values().at(0, 1), 7.0);
    }

    #[test]
    fn long_gap_aborts() {
        let mut body = String::new();
        for i in 0..9 {
            body += &format!("2018-05-11T00:{:02}:00,a,1\n", i * 5);
        }
        body += "2018-05-11T00:00:00,b,1\n2018-05-11T00:40:00,b,1\n";
        let f = write_csv(&body);
        assert!(matches!(load_series(f.path(), 5, None), Err(Error::Ingestion(_))));
    }

    #[test]
    fn duplicate_and_irregular_rows_fail() {
        let dup = write_csv("2018-05-11T00:00:00,a,1\n2018-05-11T00:00:00,a,2\n");
        assert!(matches!(load_series(dup.path(), 5, None), Err(Error::Ingestion(_))));

        let off = write_csv("2018-05-11T00:00:00,a,1\n2018-05-11T00:07:00,a,2\n");
        let err = load_series(off.path(), 5, None).unwrap_err().to_string();
        assert!(err.contains("2018-05-11T00:07:00"), "{err}");
    }

    #[test]
    fn unknown_site_is_rejected() {
        let f = write_csv("2018-05-11T00:00:00,a,1\n2018-05-11T00:00:00,z,2\n");
        let known = vec!["a".to_string(), "b".to_string()];
        assert!(matches!(load_series(f.path(), 5, Some(&known)), Err(Error::Validation(_))));
    }

    #[test]
    fn minmax_fixtures() {
        let values = Tensor::from_rows(&[[10.0, 7.0], [110.0, 7.0], [60.0, 7.0]]).unwrap();
        let panel = TimeSeriesPanel::from_values(ts("2018-05-11T00:00:00"), 5, values.clone(), vec!["a".into(), "b".into()]).unwrap();
        let norm = panel.normalize(ScalingMode::Global).unwrap();
        assert_eq!(norm.values().at(2, 0), 0.5);
        assert!(norm.values().data().iter().skip(1).step_by(2).all(|&v| v == 0.0));
        let scaler = norm.scaler().unwrap();
        assert_eq!(scaler.columns[1], (7.0, 7.0));
        let back = denormalize(norm.values(), scaler).unwrap();
        assert!(back.max_abs_diff(&values).unwrap() < 1e-9);
        assert!(norm.normalize(ScalingMode::Global).is_err());
    }

    #[test]
    fn denormalize_fixtures() {
        let s = MinMaxScaler { columns: vec![(10.0, 110.0), (7.0, 7.0)] };
        let out = denormalize(&Tensor::from_rows(&[[0.5, 0.3], [0.0, 0.9]]).unwrap(), &s).unwrap();
        assert_eq!(out.data(), &[60.0, 7.0, 10.0, 7.0]);
        assert!(denormalize(&Tensor::zeros(&[1, 3]), &s).is_err());
    }

    #[test]
    fn scaler_uses_training_rows_only() {
        let panel = ramp_panel(10, 1);
        let norm = panel.normalize(ScalingMode::TrainingRows(5)).unwrap();
        assert_eq!(norm.scaler().unwrap().columns[0], (0.0, 4.0));
        assert_eq!(norm.values().at(9, 0), 9.0 / 4.0);
    }

    #[test]
    fn window_counts_and_alignment() {
        let ds = sliding_windows(&ramp_panel(15, 1), 12, 1).unwrap();
        assert_eq!(ds.len(), 3);

        let one = sliding_windows(&ramp_panel(13, 2), 12, 1).unwrap();
        assert_eq!(one.len(), 1);
        let (x, y) = one.batch(&[0]).unwrap();
        assert_eq!(x.data(), &(0..24).map(f64::from).collect::<Vec<_>>()[..]);
        assert_eq!(y.data(), &[24.0, 25.0]);
        assert_eq!(one.target_rows(), &[12]);
        assert_eq!(one.input_start_rows(), vec![0]);

        assert!(matches!(sliding_windows(&ramp_panel(12, 1), 12, 1), Err(Error::InsufficientData { .. })));
        assert!(matches!(sliding_windows(&ramp_panel(20, 1), 12, 0), Err(Error::Contract(_))));
        assert_eq!(iterative_base_windows(&ramp_panel(20, 1), 12).unwrap().mode(), WindowMode::IterativeBase);
    }

    #[test]
    fn split_fixtures() {
        let ds = sliding_windows(&ramp_panel(112, 1), 12, 1).unwrap();
        assert_eq!(ds.len(), 100);
        let (tr, te) = train_test_split(&ds, 0.8).unwrap();
        assert_eq!((tr.len(), te.len()), (80, 20));

        let small = sliding_windows(&ramp_panel(17, 1), 12, 1).unwrap();
        let (tr, te) = train_test_split(&small, 0.8).unwrap();
        assert_eq!((tr.len(), te.len()), (4, 1));
        assert!(train_test_split(&small, 0.1).is_err());
        assert!(train_test_split(&small, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn windows_reconstruct_panel_rows(t in 3usize..40, n in 1usize..4, m in 1usize..6, h in 1usize..4) {
            prop_assume!(t >= m + h);
            let panel = ramp_panel(t, n);
            let ds = sliding_windows(&panel, m, h).unwrap();
            prop_assert_eq!(ds.len(), t - m - h + 1);
            for k in 0..ds.len() {
                let (x, y) = ds.batch(&[k]).unwrap();
                for r in 0..m {
                    prop_assert_eq!(&x.data()[r * n..(r + 1) * n], panel.values().row(k + r));
                }
                prop_assert_eq!(y.data(), panel.values().row(k + m - 1 + h));
            }
        }

        #[test]
        fn split_is_chronological_partition(t in 20usize..80, ratio in 0.2f64..0.9) {
            let panel = ramp_panel(t, 2);
            let ds = sliding_windows(&panel, 4, 2).unwrap();
            if let Ok((tr, te)) = train_test_split(&ds, ratio) {
                prop_assert_eq!(tr.len() + te.len(), ds.len());
                let mut rows = tr.target_rows().to_vec();
                rows.extend_from_slice(te.target_rows());
                prop_assert_eq!(&rows[..], ds.target_rows());
                let last_train_input = tr.input_start_rows().last().unwrap() + tr.window() - 1;
                prop_assert!(te.target_rows().iter().all(|&r| r > last_train_input));
            }
        }

        #[test]
        fn normalization_is_monotone(values in prop::collection::vec(-50.0f64..500.0, 2..30)) {
            let t = values.len();
            let panel = TimeSeriesPanel::from_values(
                ts("2018-05-11T00:00:00"), 5, Tensor::matrix(t, 1, values.clone()).unwrap(), vec!["a".into()],
            ).unwrap();
            let norm = panel.normalize(ScalingMode::Global).unwrap();
            let nv = norm.values().data();
            for i in 0..t {
                prop_assert!((0.0..=1.0).contains(&nv[i]));
                for j in 0..t {
                    if values[i] < values[j] {
                        prop_assert!(nv[i] <= nv[j]);
                    }
                }
            }
            let back = denormalize(norm.values(), norm.scaler().unwrap()).unwrap();
            for (a, b) in back.data().iter().zip(&values) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
