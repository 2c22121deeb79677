//! Point-forecast error metrics and the per-site report built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::forecasting::Method;
use crate::fsutil::{csv_to_bytes, write_atomic};

fn check(actual: &[f64], pred: &[f64], op: &'static str) -> Result<()> {
    if actual.len() != pred.len() {
        return Err(Error::shape(op, &[actual.len()], &[pred.len()]));
    }
    if actual.is_empty() {
        return Err(Error::Contract(format!("{op} of zero samples")));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(actual: &[f64], pred: &[f64]) -> Result<f64> {
    check(actual, pred, "mae")?;
    Ok(actual.iter().zip(pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / actual.len() as f64)
}

/// Root mean squared error.
pub fn rmse(actual: &[f64], pred: &[f64]) -> Result<f64> {
    check(actual, pred, "rmse")?;
    let mse = actual.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum::<f64>() / actual.len() as f64;
    Ok(mse.sqrt())
}

/// Mean absolute percentage error in percent, or `None` when any actual
/// value is zero.
pub fn mape(actual: &[f64], pred: &[f64]) -> Result<Option<f64>> {
    check(actual, pred, "mape")?;
    if actual.iter().any(|&y| y == 0.0) {
        return Ok(None);
    }
    let s: f64 = actual.iter().zip(pred).map(|(y, p)| ((y - p) / y).abs()).sum();
    Ok(Some(100.0 * s / actual.len() as f64))
}

/// Symmetric MAPE in percent. Pairs where both values are zero contribute 0.
pub fn smape(actual: &[f64], pred: &[f64]) -> Result<f64> {
    check(actual, pred, "smape")?;
    let s: f64 = actual
        .iter()
        .zip(pred)
        .map(|(y, p)| {
            let denom = (y.abs() + p.abs()) / 2.0;
            if denom == 0.0 {
                0.0
            } else {
                (y - p).abs() / denom
            }
        })
        .sum();
    Ok(100.0 * s / actual.len() as f64)
}

/// One site, horizon and method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub site: String,
    pub horizon_min: u32,
    pub method: Method,
    pub mae: f64,
    pub rmse: f64,
    /// MAPE, or SMAPE when MAPE is undefined for this cell.
    pub mape_or_smape: f64,
    pub substituted: bool,
}

/// Aligned predictions and actuals `[S, N]` for one horizon and method,
/// in original count units.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub horizon_min: u32,
    pub method: Method,
    pub predicted: Tensor,
    pub actual: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForecastReport {
    pub rows: Vec<ReportRow>,
}

type CellKey = (String, u32, Method);

impl ForecastReport {
    pub fn build(evaluations: &[Evaluation], site_order: &[String]) -> Result<Self> {
        let mut rows = Vec::new();
        for ev in evaluations {
            if ev.predicted.shape() != ev.actual.shape() {
                return Err(Error::shape("report", ev.predicted.shape(), ev.actual.shape()));
            }
            let (s, n) = ev.actual.dims2()?;
            if n != site_order.len() {
                return Err(Error::shape("report sites", ev.actual.shape(), &[s, site_order.len()]));
            }
            for (j, site) in site_order.iter().enumerate() {
                let y: Vec<f64> = (0..s).map(|i| ev.actual.at(i, j)).collect();
                let p: Vec<f64> = (0..s).map(|i| ev.predicted.at(i, j)).collect();
                let (pct, substituted) = match mape(&y, &p)? {
                    Some(v) => (v, false),
                    None => (smape(&y, &p)?, true),
                };
                rows.push(ReportRow {
                    site: site.clone(),
                    horizon_min: ev.horizon_min,
                    method: ev.method,
                    mae: mae(&y, &p)?,
                    rmse: rmse(&y, &p)?,
                    mape_or_smape: pct,
                    substituted,
                });
            }
        }
        Ok(ForecastReport { rows })
    }

    fn keyed(&self) -> BTreeMap<CellKey, &ReportRow> {
        self.rows
            .iter()
            .map(|r| ((r.site.clone(), r.horizon_min, r.method), r))
            .collect()
    }

    pub fn sites(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.site.clone()))
            .map(|r| r.site.clone())
            .collect()
    }

    pub fn horizons(&self) -> Vec<u32> {
        self.rows.iter().map(|r| r.horizon_min).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn methods(&self) -> Vec<Method> {
        self.rows.iter().map(|r| r.method).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn get(&self, site: &str, horizon_min: u32, method: Method) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.site == site && r.horizon_min == horizon_min && r.method == method)
    }

    /// Cell-wise mean over repeated runs sharing one grid. A cell is marked
    /// substituted if any repeat substituted it.
    pub fn average(reports: &[ForecastReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Contract("averaging zero reports".into()))?;
        let grid: Vec<CellKey> = first.keyed().into_keys().collect();
        let maps: Vec<_> = reports.iter().map(|r| r.keyed()).collect();
        if maps.iter().any(|m| m.len() != grid.len() || !grid.iter().all(|k| m.contains_key(k))) {
            return Err(Error::Validation("reports do not share a site x horizon x method grid".into()));
        }
        let k = reports.len() as f64;
        let rows = first
            .rows
            .iter()
            .map(|r| {
                let key = (r.site.clone(), r.horizon_min, r.method);
                let cells: Vec<&ReportRow> = maps.iter().map(|m| m[&key]).collect();
                ReportRow {
                    mae: cells.iter().map(|c| c.mae).sum::<f64>() / k,
                    rmse: cells.iter().map(|c| c.rmse).sum::<f64>() / k,
                    mape_or_smape: cells.iter().map(|c| c.mape_or_smape).sum::<f64>() / k,
                    substituted: cells.iter().any(|c| c.substituted),
                    ..r.clone()
                }
            })
            .collect();
        Ok(ForecastReport { rows })
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        csv_to_bytes(Path::new("<report>"), |w| {
            if self.rows.is_empty() {
                w.write_record(["site", "horizon_min", "method", "mae", "rmse", "mape_or_smape", "substituted"])?;
            }
            for r in &self.rows {
                w.serialize(r)?;
            }
            Ok(())
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ReportRow>, _>>()
            .map_err(|e| Error::csv(path, e))?;
        Ok(ForecastReport { rows })
    }

    /// Plain-text table: one block per method, a row per site and metric,
    /// a column per horizon. Substituted percentages carry a `*`.
    pub fn to_table(&self) -> String {
        let horizons = self.horizons();
        let mut out = String::new();
        for method in self.methods() {
            let _ = writeln!(out, "{method} prediction");
            let _ = write!(out, "{:<10}{:<8}", "site", "metric");
            for h in &horizons {
                let _ = write!(out, "{:>10}", format!("{h}min"));
            }
            out.push('\n');
            for site in self.sites() {
                for metric in ["MAE", "RMSE", "MAPE%"] {
                    let _ = write!(out, "{:<10}{:<8}", site, metric);
                    for &h in &horizons {
                        let cell = match self.get(&site, h, method) {
                            None => "-".to_string(),
                            Some(r) => match metric {
                                "MAE" => format!("{:.2}", r.mae),
                                "RMSE" => format!("{:.2}", r.rmse),
                                _ if r.substituted => format!("{:.2}*", r.mape_or_smape),
                                _ => format!("{:.2}", r.mape_or_smape),
                            },
                        };
                        let _ = write!(out, "{cell:>10}");
                    }
                    out.push('\n');
                }
            }
            out.push('\n');
        }
        if self.rows.iter().any(|r| r.substituted) {
            out.push_str("* SMAPE substituted where MAPE is undefined (zero actual values)\n");
        }
        out
    }
}

/// Cells where one report is strictly lower than another, per metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Tally {
    pub cells: usize,
    pub mae: usize,
    pub rmse: usize,
    pub mape_or_smape: usize,
}

impl Tally {
    pub fn fraction(&self, wins: usize) -> f64 {
        if self.cells == 0 {
            0.0
        } else {
            wins as f64 / self.cells as f64
        }
    }
}

/// Counts site x horizon cells where `a` beats `b`. Each side can be
/// restricted to one method, which is how direct and iterative rows of a
/// single report are compared. Both sides must cover the same grid.
pub fn compare(
    a: &ForecastReport,
    b: &ForecastReport,
    method_a: Option<Method>,
    method_b: Option<Method>,
    min_horizon: Option<u32>,
) -> Result<Tally> {
    let select = |r: &ForecastReport, m: Option<Method>| -> BTreeMap<(String, u32, Option<Method>), ReportRow> {
        r.rows
            .iter()
            .filter(|row| m.map_or(true, |m| row.method == m))
            .filter(|row| min_horizon.map_or(true, |h| row.horizon_min >= h))
            .map(|row| {
                let key_method = if m.is_some() { None } else { Some(row.method) };
                ((row.site.clone(), row.horizon_min, key_method), row.clone())
            })
            .collect()
    };
    let (ra, rb) = (select(a, method_a), select(b, method_b));
    if ra.len() != rb.len() || !ra.keys().all(|k| rb.contains_key(k)) {
        return Err(Error::Validation(format!(
            "reports cover different site x horizon grids ({} vs {} cells)",
            ra.len(),
            rb.len()
        )));
    }
    let mut t = Tally {
        cells: ra.len(),
        ..Default::default()
    };
    for (k, x) in &ra {
        let y = &rb[k];
        t.mae += usize::from(x.mae < y.mae);
        t.rmse += usize::from(x.rmse < y.rmse);
        t.mape_or_smape += usize::from(x.mape_or_smape < y.mape_or_smape);
    }
    Ok(t)
}
