//! Parking-lot graph construction from site coordinates.
//!
//! Sites are joined when their great-circle distance is within a threshold
//! `epsilon`. The raw adjacency keeps the distance itself as the edge weight
//! (other weightings are available through [`WeightMode`]), and the models
//! consume the self-loop symmetric normalization
//! `D^-1/2 (A + I) D^-1/2` with `D_ii = sum_j (A + I)_ij`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fsutil::{csv_to_bytes, write_atomic};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_EPSILON_KM: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub site_id: String,
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(site_id: impl Into<String>, lat: f64, lon: f64) -> Result<Self> {
        let p = GeoPoint {
            site_id: site_id.into(),
            lat,
            lon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::Domain(format!(
                "site {}: coordinate ({}, {}) outside lat [-90, 90] / lon [-180, 180]",
                self.site_id, self.lat, self.lon
            )));
        }
        Ok(())
    }
}

/// Great-circle distance by the haversine formula, in the units of `radius`.
///
/// ```
/// use stgbgru::graph::{haversine_distance, GeoPoint};
///
/// let a = GeoPoint::new("a", 0.0, 0.0).unwrap();
/// let b = GeoPoint::new("b", 0.0, 180.0).unwrap();
/// let d = haversine_distance(&a, &b, 1.0).unwrap();
/// assert!((d - std::f64::consts::PI).abs() < 1e-12);
/// ```
pub fn haversine_distance(p1: &GeoPoint, p2: &GeoPoint, radius: f64) -> Result<f64> {
    p1.validate()?;
    p2.validate()?;
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::Domain(format!("radius must be positive, got {radius}")));
    }
    let half_dlat = (p1.lat - p2.lat).to_radians() / 2.0;
    let half_dlon = (p1.lon - p2.lon).to_radians() / 2.0;
    let h = half_dlat.sin().powi(2)
        + p1.lat.to_radians().cos() * p2.lat.to_radians().cos() * half_dlon.sin().powi(2);
    // rounding can push h a hair above 1 for antipodal points
    Ok(2.0 * radius * h.min(1.0).sqrt().asin())
}

/// How a kept edge (`d_ij <= epsilon`) is weighted in the raw adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// `A_ij = d_ij`.
    #[default]
    Distance,
    /// `A_ij = exp(-(d_ij / epsilon)^2)`.
    Gaussian,
    /// `A_ij = 1`.
    Binary,
}

impl WeightMode {
    fn weight(self, d: f64, epsilon: f64) -> f64 {
        match self {
            WeightMode::Distance => d,
            WeightMode::Gaussian => (-(d / epsilon).powi(2)).exp(),
            WeightMode::Binary => 1.0,
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Distance => "distance",
            WeightMode::Gaussian => "gaussian",
            WeightMode::Binary => "binary",
        })
    }
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distance" => Ok(WeightMode::Distance),
            "gaussian" => Ok(WeightMode::Gaussian),
            "binary" => Ok(WeightMode::Binary),
            other => Err(Error::Validation(format!(
                "unknown weight mode {other:?} (expected distance, gaussian or binary)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub epsilon_km: f64,
    pub radius_km: f64,
    pub weight_mode: WeightMode,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            epsilon_km: DEFAULT_EPSILON_KM,
            radius_km: EARTH_RADIUS_KM,
            weight_mode: WeightMode::Distance,
        }
    }
}

/// Sites ordered by ascending `site_id` with raw and normalized adjacency.
#[derive(Debug, Clone)]
pub struct ParkingGraph {
    nodes: Vec<GeoPoint>,
    distances: Tensor,
    adjacency: Tensor,
    normalized: Tensor,
    config: GraphConfig,
}

impl ParkingGraph {
    pub fn build(points: &[GeoPoint], config: GraphConfig) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("graph needs at least one site".into()));
        }
        if !(config.epsilon_km >= 0.0) || !config.epsilon_km.is_finite() {
            return Err(Error::Domain(format!(
                "epsilon must be a non-negative distance, got {}",
                config.epsilon_km
            )));
        }
        let mut nodes = points.to_vec();
        nodes.sort_by(|a, b| a.site_id.cmp(&b.site_id));
        if let Some(w) = nodes.windows(2).find(|w| w[0].site_id == w[1].site_id) {
            return Err(Error::Validation(format!("duplicate site_id {:?}", w[0].site_id)));
        }

        let n = nodes.len();
        let mut dist = vec![0.0; n * n];
        let mut adj = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = haversine_distance(&nodes[i], &nodes[j], config.radius_km)?;
                dist[i * n + j] = d;
                dist[j * n + i] = d;
                if d <= config.epsilon_km {
                    let w = config.weight_mode.weight(d, config.epsilon_km);
                    adj[i * n + j] = w;
                    adj[j * n + i] = w;
                }
            }
        }
        let adjacency = Tensor::matrix(n, n, adj)?;
        let normalized = normalize_adjacency(&adjacency)?;
        Ok(ParkingGraph {
            nodes,
            distances: Tensor::matrix(n, n, dist)?,
            adjacency,
            normalized,
            config,
        })
    }

    pub fn nodes(&self) -> &[GeoPoint] {
        &self.nodes
    }

    pub fn site_ids(&self) -> Vec<String> {
        self.nodes.iter().map(|p| p.site_id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Pairwise great-circle distances.
    pub fn distances(&self) -> &Tensor {
        &self.distances
    }

    /// Raw thresholded adjacency `A`.
    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    /// `D^-1/2 (A + I) D^-1/2`.
    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }

    pub fn config(&self) -> GraphConfig {
        self.config
    }

    /// Undirected pairs `i < j` with `d_ij <= epsilon`.
    pub fn edge_count(&self) -> usize {
        let n = self.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.distances.at(i, j) <= self.config.epsilon_km)
            .count()
    }

    /// Smallest and largest pairwise distance, `None` for a single site.
    pub fn distance_range(&self) -> Option<(f64, f64)> {
        let n = self.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.distances.at(i, j))
            .fold(None, |acc, d| match acc {
                None => Some((d, d)),
                Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
            })
    }

    /// CSV dump of `matrix` with site headers, preceded by a `#` metadata line.
    pub fn matrix_csv(&self, matrix: &Tensor, path: &Path) -> Result<Vec<u8>> {
        let ids = self.site_ids();
        let body = csv_to_bytes(path, |w| {
            let mut header = vec!["site_id".to_string()];
            header.extend(ids.iter().cloned());
            w.write_record(&header)?;
            for (i, id) in ids.iter().enumerate() {
                let mut row = vec![id.clone()];
                row.extend(matrix.row(i).iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
            Ok(())
        })?;
        let mut out = format!(
            "# epsilon_km={},radius_km={},weight_mode={}\n",
            self.config.epsilon_km, self.config.radius_km, self.config.weight_mode
        )
        .into_bytes();
        out.extend(body);
        Ok(out)
    }

    /// Writes `adjacency.csv` and `normalized_adjacency.csv` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let a = dir.join("adjacency.csv");
        write_atomic(&a, &self.matrix_csv(&self.adjacency, &a)?)?;
        let ah = dir.join("normalized_adjacency.csv");
        write_atomic(&ah, &self.matrix_csv(&self.normalized, &ah)?)
    }
}

/// Thresholded distance graph with distance weights.
pub fn build_adjacency(points: &[GeoPoint], epsilon: f64, radius: f64) -> Result<ParkingGraph> {
    ParkingGraph::build(
        points,
        GraphConfig {
            epsilon_km: epsilon,
            radius_km: radius,
            weight_mode: WeightMode::Distance,
        },
    )
}

/// Self-loop symmetric normalization `D^-1/2 (A + I) D^-1/2`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let (n, m) = a.dims2()?;
    if n != m {
        return Err(Error::Validation(format!("adjacency must be square, got {n}x{m}")));
    }
    let scale = a.max_abs().max(1.0);
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (a.at(i, j), a.at(j, i));
            if x < 0.0 {
                return Err(Error::Validation(format!("negative adjacency entry at ({i}, {j})")));
            }
            if (x - y).abs() > 1e-12 * scale {
                return Err(Error::Validation(format!(
                    "adjacency is not symmetric at ({i}, {j}): {x} vs {y}"
                )));
            }
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| 1.0 / (a.row(i).iter().sum::<f64>() + 1.0).sqrt())
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let tilde = a.at(i, j) + if i == j { 1.0 } else { 0.0 };
            out[i * n + j] = (inv_sqrt_deg[i] * inv_sqrt_deg[j]) * tilde;
        }
    }
    Tensor::matrix(n, n, out)
}

#[derive(Debug, Deserialize)]
struct CoordRow {
    site_id: String,
    lat: f64,
    lon: f64,
}

/// Reads a `site_id,lat,lon` CSV.
pub fn load_coordinates(path: &Path) -> Result<Vec<GeoPoint>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    for col in ["site_id", "lat", "lon"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Validation(format!(
                "{}: missing column {col:?} (expected header site_id,lat,lon)",
                path.display()
            )));
        }
    }
    let mut points = Vec::new();
    for row in rdr.deserialize() {
        let row: CoordRow = row.map_err(|e| Error::csv(path, e))?;
        points.push(GeoPoint::new(row.site_id, row.lat, row.lon)?);
    }
    if points.is_empty() {
        return Err(Error::Validation(format!("{}: no coordinates", path.display())));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook haversine written independently of the library path.
    fn oracle_haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64, r: f64) -> f64 {
        let (p1, p2) = (lat1 * std::f64::consts::PI / 180.0, lat2 * std::f64::consts::PI / 180.0);
        let dp = p2 - p1;
        let dl = (lon2 - lon1) * std::f64::consts::PI / 180.0;
        let a = (dp / 2.0).sin() * (dp / 2.0).sin()
            + p1.cos() * p2.cos() * (dl / 2.0).sin() * (dl / 2.0).sin();
        2.0 * r * a.sqrt().atan2((1.0 - a).sqrt())
    }

    /// `D^-1/2 * (A + I) * D^-1/2` as two explicit dense triple-loop products.
    pub(crate) fn oracle_normalize(a: &Tensor) -> Vec<f64> {
        let n = a.shape()[0];
        let mut tilde = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                tilde[i * n + j] = a.at(i, j) + if i == j { 1.0 } else { 0.0 };
            }
        }
        let mut dinv = vec![0.0; n * n];
        for i in 0..n {
            let deg: f64 = (0..n).map(|j| tilde[i * n + j]).sum();
            dinv[i * n + i] = deg.powf(-0.5);
        }
        let mul = |x: &[f64], y: &[f64]| {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        out[i * n + j] += x[i * n + k] * y[k * n + j];
                    }
                }
            }
            out
        };
        mul(&mul(&dinv, &tilde), &dinv)
    }

    fn pt(id: &str, lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(id, lat, lon).unwrap()
    }

    /// Point `km` kilometres due north of (34, -118.5).
    fn north_of_base(id: &str, km: f64) -> GeoPoint {
        pt(id, 34.0 + (km / EARTH_RADIUS_KM).to_degrees(), -118.5)
    }

    #[test]
    fn haversine_fixtures() {
        let p = pt("a", 34.0, -118.5);
        assert_eq!(haversine_distance(&p, &p, EARTH_RADIUS_KM).unwrap(), 0.0);

        let d = haversine_distance(&pt("a", 0.0, 0.0), &pt("b", 0.0, 180.0), 1.0).unwrap();
        assert!((d - std::f64::consts::PI).abs() < 1e-12);

        // corners of the Santa Monica bounding box
        let (a, b) = (pt("a", 34.019575, -118.499378), pt("b", 34.01289, -118.49372));
        let want = oracle_haversine(34.019575, -118.499378, 34.01289, -118.49372, 6371.0);
        let got = haversine_distance(&a, &b, 6371.0).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((got - 0.9087).abs() < 1e-3, "{got}");
    }

    #[test]
    fn haversine_rejects_bad_input() {
        let ok = pt("a", 0.0, 0.0);
        let bad = GeoPoint { site_id: "b".into(), lat: 91.0, lon: 0.0 };
        assert!(matches!(haversine_distance(&ok, &bad, 1.0), Err(Error::Domain(_))));
        assert!(haversine_distance(&ok, &ok, 0.0).is_err());
        assert!(GeoPoint::new("x", 0.0, -180.5).is_err());
    }

    #[test]
    fn adjacency_threshold_keeps_distance() {
        let far = build_adjacency(&[north_of_base("s1", 0.0), north_of_base("s2", 0.40)], 0.35, EARTH_RADIUS_KM)
            .unwrap();
        assert_eq!(far.adjacency().at(0, 1), 0.0);

        let near = build_adjacency(&[north_of_base("s1", 0.0), north_of_base("s2", 0.20)], 0.35, EARTH_RADIUS_KM)
            .unwrap();
        assert!((near.adjacency().at(0, 1) - 0.20).abs() < 1e-9);
        assert_eq!(near.adjacency().at(0, 0), 0.0);
        assert_eq!(near.adjacency().at(1, 1), 0.0);
        assert_eq!(near.edge_count(), 1);
    }

    #[test]
    fn nodes_are_sorted_and_unique() {
        let g = build_adjacency(&[pt("b", 0.0, 0.0), pt("a", 0.0, 0.001)], 0.35, EARTH_RADIUS_KM).unwrap();
        assert_eq!(g.site_ids(), vec!["a", "b"]);
        let dup = build_adjacency(&[pt("a", 0.0, 0.0), pt("a", 0.0, 0.001)], 0.35, EARTH_RADIUS_KM);
        assert!(matches!(dup, Err(Error::Validation(_))));
    }

    #[test]
    fn weight_modes() {
        let pts = [north_of_base("s1", 0.0), north_of_base("s2", 0.2)];
        let mk = |mode| {
            ParkingGraph::build(&pts, GraphConfig { weight_mode: mode, ..Default::default() }).unwrap()
        };
        assert_eq!(mk(WeightMode::Binary).adjacency().at(0, 1), 1.0);
        let g = mk(WeightMode::Gaussian).adjacency().at(0, 1);
        assert!((g - (-(0.2f64 / 0.35).powi(2)).exp()).abs() < 1e-9);
        assert_eq!("gaussian".parse::<WeightMode>().unwrap(), WeightMode::Gaussian);
        assert!("cosine".parse::<WeightMode>().is_err());
    }

    #[test]
    fn zero_epsilon_gives_empty_graph() {
        let g = build_adjacency(&[pt("a", 0.0, 0.0), pt("b", 0.0, 0.001)], 0.0, EARTH_RADIUS_KM).unwrap();
        assert!(g.adjacency().data().iter().all(|&v| v == 0.0));
        assert_eq!(g.normalized(), &Tensor::identity(2));
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn normalize_fixtures() {
        assert_eq!(normalize_adjacency(&Tensor::zeros(&[2, 2])).unwrap(), Tensor::identity(2));
        let a = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let got = normalize_adjacency(&a).unwrap();
        for (g, o) in got.data().iter().zip(oracle_normalize(&a)) {
            assert!((g - o).abs() < 1e-15);
            assert!((g - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_rejects_bad_matrices() {
        assert!(normalize_adjacency(&Tensor::zeros(&[2, 3])).is_err());
        let asym = Tensor::from_rows(&[[0.0, 1.0], [0.5, 0.0]]).unwrap();
        assert!(matches!(normalize_adjacency(&asym), Err(Error::Validation(_))));
        let neg = Tensor::from_rows(&[[0.0, -1.0], [-1.0, 0.0]]).unwrap();
        assert!(normalize_adjacency(&neg).is_err());
    }

    #[test]
    fn export_writes_metadata_and_headers() {
        let dir = tempfile::tempdir().unwrap();
        let g = build_adjacency(&[north_of_base("s1", 0.0), north_of_base("s2", 0.2)], 0.35, EARTH_RADIUS_KM).unwrap();
        g.export(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("normalized_adjacency.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# epsilon_km=0.35,radius_km=6371,weight_mode=distance");
        assert_eq!(lines.next().unwrap(), "site_id,s1,s2");
        assert_eq!(lines.count(), 2);
    }

    fn points_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
        // clustered within ~2 km so that a 0.35 km threshold produces edges
        prop::collection::vec((-0.01f64..0.01, -0.01f64..0.01), 1..=20)
    }

    proptest! {
        #[test]
        fn random_graphs_satisfy_invariants(offsets in points_strategy(), eps in 0.05f64..1.0) {
            let pts: Vec<GeoPoint> = offsets
                .iter()
                .enumerate()
                .map(|(i, (dlat, dlon))| pt(&format!("s{i:02}"), 34.0 + dlat, -118.5 + dlon))
                .collect();
            let g = build_adjacency(&pts, eps, EARTH_RADIUS_KM).unwrap();
            let n = g.len();
            let (a, ah) = (g.adjacency(), g.normalized());
            for i in 0..n {
                prop_assert_eq!(a.at(i, i), 0.0);
                for j in 0..n {
                    prop_assert_eq!(a.at(i, j), a.at(j, i));
                    let v = a.at(i, j);
                    prop_assert!(v == 0.0 || (v > 0.0 && v <= eps));
                    prop_assert_eq!(ah.at(i, j), ah.at(j, i));
                }
            }
            for (x, y) in ah.data().iter().zip(oracle_normalize(a)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn haversine_triangle_and_symmetry(
            a in (-89.0f64..89.0, -179.0f64..179.0),
            b in (-89.0f64..89.0, -179.0f64..179.0),
            c in (-89.0f64..89.0, -179.0f64..179.0),
        ) {
            let (p1, p2, p3) = (pt("1", a.0, a.1), pt("2", b.0, b.1), pt("3", c.0, c.1));
            let r = EARTH_RADIUS_KM;
            let d12 = haversine_distance(&p1, &p2, r).unwrap();
            let d21 = haversine_distance(&p2, &p1, r).unwrap();
            let d13 = haversine_distance(&p1, &p3, r).unwrap();
            let d23 = haversine_distance(&p2, &p3, r).unwrap();
            prop_assert!((d12 - d21).abs() < 1e-9);
            prop_assert!(d12 >= 0.0 && d12 <= std::f64::consts::PI * r + 1e-9);
            prop_assert!(d13 <= d12 + d23 + 1e-9);
        }
    }
}
