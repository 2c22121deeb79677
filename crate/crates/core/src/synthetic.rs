//! Reproducible synthetic parking panels.
//!
//! Sites sit on a `rows x cols` lattice with fixed spacing. Each site's
//! occupancy fraction is a daily sinusoid plus a disturbance that diffuses
//! along lattice edges:
//!
//! ```text
//! d(t+1) = rho * P d(t) + sigma * e(t)
//! u_i(t) = 0.5 + amp * sin(2 pi t / period + phase_i) + d_i(t) + noise * n_i(t)
//! count  = round(capacity_i * clamp(u_i, 0, 1))
//! ```
//!
//! `P` is the row-normalized lattice adjacency, so a site's neighbours carry
//! information about its next disturbance that its own history lacks.

use std::path::Path;

use chrono::NaiveDateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::data::TimeSeriesPanel;
use crate::forecasting::Predictor;
use crate::error::{Error, Result};
use crate::fsutil::{csv_to_bytes, write_atomic};
use crate::graph::{GeoPoint, GraphConfig, ParkingGraph, WeightMode, EARTH_RADIUS_KM};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub rows: usize,
    pub cols: usize,
    pub spacing_km: f64,
    pub origin: (f64, f64),
    /// Length of the series.
    pub steps: usize,
    pub interval_minutes: u32,
    /// Steps per sinusoid cycle; 288 five-minute steps is one day.
    pub period: f64,
    pub rho: f64,
    pub sigma: f64,
    pub amplitude: f64,
    /// Phases are drawn uniformly from `[0, phase_spread)`.
    pub phase_spread: f64,
    /// Weight a site's own disturbance keeps in the diffusion step.
    pub self_weight: f64,
    /// Standard deviation of independent per-reading noise on the
    /// occupancy fraction; it does not feed back into the dynamics.
    pub obs_noise: f64,
    pub min_capacity: f64,
    pub max_capacity: f64,
    /// Steps simulated and discarded before the first row.
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            rows: 2,
            cols: 4,
            spacing_km: 0.3,
            origin: (34.0195, -118.4912),
            steps: 2000,
            interval_minutes: 5,
            period: 288.0,
            rho: 0.9,
            sigma: 0.06,
            amplitude: 0.2,
            phase_spread: 0.0,
            self_weight: 0.0,
            obs_noise: 0.03,
            min_capacity: 60.0,
            max_capacity: 200.0,
            burn_in: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub points: Vec<GeoPoint>,
    pub panel: TimeSeriesPanel,
    pub capacities: Vec<f64>,
}

impl SyntheticData {
    /// Builds the graph with `epsilon_km` just above the lattice spacing, so
    /// lattice neighbours connect and diagonals do not.
    pub fn graph(&self, config: &SyntheticConfig, weight_mode: WeightMode) -> Result<ParkingGraph> {
        ParkingGraph::build(
            &self.points,
            GraphConfig {
                epsilon_km: config.spacing_km * 1.15,
                radius_km: EARTH_RADIUS_KM,
                weight_mode,
            },
        )
    }

    /// Writes `coords.csv` and `series.csv` in the formats the loaders read.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let coords = dir.join("coords.csv");
        let bytes = csv_to_bytes(&coords, |w| {
            w.write_record(["site_id", "lat", "lon"])?;
            for p in &self.points {
                w.write_record([p.site_id.clone(), p.lat.to_string(), p.lon.to_string()])?;
            }
            Ok(())
        })?;
        write_atomic(&coords, &bytes)?;
        let series = dir.join("series.csv");
        write_atomic(&series, &self.panel.to_long_csv(&series)?)
    }
}

fn lattice(config: &SyntheticConfig) -> Result<Vec<GeoPoint>> {
    let (lat0, lon0) = config.origin;
    let dlat = (config.spacing_km / EARTH_RADIUS_KM).to_degrees();
    let dlon = dlat / lat0.to_radians().cos();
    let width = (config.rows * config.cols).to_string().len();
    let mut points = Vec::with_capacity(config.rows * config.cols);
    for r in 0..config.rows {
        for c in 0..config.cols {
            let k = r * config.cols + c + 1;
            points.push(GeoPoint::new(
                format!("St{k:0width$}"),
                lat0 + r as f64 * dlat,
                lon0 + c as f64 * dlon,
            )?);
        }
    }
    Ok(points)
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticData> {
    let n = config.rows * config.cols;
    if n == 0 || config.steps == 0 {
        return Err(Error::Validation("synthetic panel needs at least one site and one step".into()));
    }
    if !(0.0..1.0).contains(&config.rho.abs()) {
        return Err(Error::Domain(format!("|rho| must be below 1, got {}", config.rho)));
    }
    let points = lattice(config)?;

    // lattice neighbours by grid position, independent of the geodesic graph
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let (ri, ci) = (i / config.cols, i % config.cols);
        let nbrs: Vec<usize> = (0..n)
            .filter(|&j| {
                let (rj, cj) = (j / config.cols, j % config.cols);
                ri.abs_diff(rj) + ci.abs_diff(cj) == 1
            })
            .collect();
        let share = if nbrs.is_empty() { 0.0 } else { (1.0 - config.self_weight) / nbrs.len() as f64 };
        for &j in &nbrs {
            p[i * n + j] = share;
        }
        p[i * n + i] = if nbrs.is_empty() { 1.0 } else { config.self_weight };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let phases: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * config.phase_spread).collect();
    let capacities: Vec<f64> = (0..n)
        .map(|i| {
            let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            (config.min_capacity + f * (config.max_capacity - config.min_capacity)).round()
        })
        .collect();

    let mut d = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut values = Vec::with_capacity(config.steps * n);
    for t in 0..config.burn_in + config.steps {
        for i in 0..n {
            let mixed: f64 = p[i * n..(i + 1) * n].iter().zip(&d).map(|(a, b)| a * b).sum();
            let e: f64 = rng.sample(StandardNormal);
            next[i] = config.rho * mixed + config.sigma * e;
        }
        std::mem::swap(&mut d, &mut next);
        if t < config.burn_in {
            continue;
        }
        let k = (t - config.burn_in) as f64;
        for i in 0..n {
            let eta: f64 = rng.sample(StandardNormal);
            let u = 0.5
                + config.amplitude * (std::f64::consts::TAU * k / config.period + phases[i]).sin()
                + d[i]
                + config.obs_noise * eta;
            values.push((capacities[i] * u.clamp(0.0, 1.0)).round());
        }
    }

    let start = NaiveDateTime::parse_from_str("2019-01-07 00:00:00", "%Y-%m-%d %H:%M:%S").expect("valid literal");
    let site_order = points.iter().map(|p| p.site_id.clone()).collect();
    let panel = TimeSeriesPanel::from_values(
        start,
        config.interval_minutes,
        Tensor::matrix(config.steps, n, values)?,
        site_order,
    )?;
    Ok(SyntheticData {
        points,
        panel,
        capacities,
    })
}

/// Noise-free sinusoids `0.5 + 0.3 sin(2 pi t / period + j)` for site `j`,
/// already in the unit range.
pub fn sinusoid_panel(steps: usize, sites: usize, period: f64, interval_minutes: u32) -> Result<TimeSeriesPanel> {
    let values = (0..steps)
        .flat_map(|t| (0..sites).map(move |j| 0.5 + 0.3 * (std::f64::consts::TAU * t as f64 / period + j as f64).sin()))
        .collect();
    let start = NaiveDateTime::parse_from_str("2019-01-07 00:00:00", "%Y-%m-%d %H:%M:%S").expect("valid literal");
    let site_order = (1..=sites).map(|j| format!("St{j}")).collect();
    TimeSeriesPanel::from_values(start, interval_minutes, Tensor::matrix(steps, sites, values)?, site_order)
}

/// Exact predictor for [`sinusoid_panel`] data plus a constant `bias`.
///
/// A sinusoid of angular step `w` around 0.5 obeys
/// `s(t+1) = 2 cos(w) s(t) - s(t-1)`, so two rows of history determine the
/// future. The oracle applies that recurrence `horizon` times and adds
/// `bias` once. With a bias, rolling the one-step oracle forward compounds
/// the error while the `horizon`-step oracle stays off by exactly `bias`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidOracle {
    pub window: usize,
    pub horizon: usize,
    pub sites: usize,
    pub period: f64,
    pub bias: f64,
}

impl Predictor for SinusoidOracle {
    fn window(&self) -> usize {
        self.window
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_sites(&self) -> usize {
        self.sites
    }

    fn predict_normalized(&self, windows: &Tensor) -> Result<Tensor> {
        let (b, m, n) = match *windows.shape() {
            [b, m, n] if m >= 2 => (b, m, n),
            ref other => return Err(Error::shape("oracle", other, &[0, self.window, self.sites])),
        };
        let c = 2.0 * (std::f64::consts::TAU / self.period).cos();
        let mut out = Vec::with_capacity(b * n);
        for w in windows.data().chunks(m * n) {
            for j in 0..n {
                let (mut prev, mut cur) = (w[(m - 2) * n + j] - 0.5, w[(m - 1) * n + j] - 0.5);
                for _ in 0..self.horizon {
                    (prev, cur) = (cur, c * cur - prev);
                }
                out.push(cur + 0.5 + self.bias);
            }
        }
        Tensor::matrix(b, n, out)
    }
}
