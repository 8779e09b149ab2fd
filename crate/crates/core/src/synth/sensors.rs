//! Observation operators: LEO swaths, GEO disks, sparse stations, and
//! derived products, all sampling one [`TruthField`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::truth::TruthField;
use crate::error::{invalid, Result};
use crate::geo::{haversine_km, BBox, BinaryMask, GeoPoint, GridSpec, Window, EARTH_RADIUS_KM};
use crate::seed::derive_seed;

/// Precessing great-circle band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitParams {
    pub inclination_deg: f64,
    /// Ascending-node longitude at t = 0.
    pub node_lon0_deg: f64,
    /// Node drift in degrees per hour.
    pub precession_deg_per_hour: f64,
    /// Full across-track width of the band.
    pub band_width_km: f64,
}

impl Default for OrbitParams {
    fn default() -> Self {
        Self { inclination_deg: 82.0, node_lon0_deg: 0.0, precession_deg_per_hour: 13.0, band_width_km: 560.0 }
    }
}

impl OrbitParams {
    pub fn node_lon(&self, t_hours: f64) -> f64 {
        (self.node_lon0_deg + self.precession_deg_per_hour * t_hours + 180.0).rem_euclid(360.0) - 180.0
    }

    /// Whether `(lon, lat)` lies within half the band width of the orbit plane.
    pub fn covers(&self, lon: f64, lat: f64, t_hours: f64) -> bool {
        if self.band_width_km <= 0.0 {
            return false;
        }
        let node = self.node_lon(t_hours).to_radians();
        let inc = self.inclination_deg.to_radians();
        let normal = [inc.sin() * node.sin(), -inc.sin() * node.cos(), inc.cos()];
        let (l, p) = (lon.to_radians(), lat.to_radians());
        let v = [p.cos() * l.cos(), p.cos() * l.sin(), p.sin()];
        let dot: f64 = normal.iter().zip(&v).map(|(a, b)| a * b).sum();
        dot.abs().min(1.0).asin() * EARTH_RADIUS_KM <= 0.5 * self.band_width_km
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Footprint {
    Leo(OrbitParams),
    Geo { nadir_lon: f64, radius_km: f64 },
}

/// A satellite instrument: footprint plus a seeded affine channel map
/// `values = mixing · truth + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instrument {
    pub id: String,
    pub channels: usize,
    pub footprint: Footprint,
    /// Row-major `[channels][truth channels]`.
    pub mixing: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Instrument {
    pub fn new(seed: u64, id: &str, channels: usize, truth_channels: usize, footprint: Footprint) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id, 1));
        let n = Normal::new(0.0, 0.5).unwrap();
        let mut mixing = Vec::with_capacity(channels * truth_channels);
        for s in 0..channels {
            for c in 0..truth_channels {
                // diagonal-dominant so every channel carries a distinct signal
                let base = if s % truth_channels == c { 1.0 } else { 0.0 };
                mixing.push(base + n.sample(&mut rng));
            }
        }
        let bias = (0..channels).map(|_| 0.2 * n.sample(&mut rng)).collect();
        Self { id: id.to_string(), channels, footprint, mixing, bias }
    }

    pub fn apply(&self, truth: &[f64]) -> Vec<f64> {
        let tc = truth.len();
        (0..self.channels)
            .map(|s| {
                self.bias[s] + self.mixing[s * tc..(s + 1) * tc].iter().zip(truth).map(|(m, t)| m * t).sum::<f64>()
            })
            .collect()
    }

    fn covers(&self, lon: f64, lat: f64, t_hours: f64) -> bool {
        match self.footprint {
            Footprint::Leo(o) => o.covers(lon, lat, t_hours),
            Footprint::Geo { nadir_lon, radius_km } => haversine_km(lon, lat, nadir_lon, 0.0) <= radius_km,
        }
    }
}

/// One instrument's gridded (sub-)image at one time. Values are exactly zero
/// wherever the mask is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwathFrame {
    pub instrument_id: String,
    pub step: usize,
    pub time: f64,
    pub bbox: BBox,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    /// `[channel][row][col]`
    pub values: Vec<f32>,
    pub mask: BinaryMask,
    /// Mask fraction at sampling time.
    pub coverage: f64,
    /// Ascending-node longitude for LEO frames.
    pub node_lon: Option<f64>,
}

impl SwathFrame {
    pub fn value(&self, c: usize, i: usize, j: usize) -> f32 {
        self.values[(c * self.rows + i) * self.cols + j]
    }

    /// Cuts out a sliding-window sub-image.
    pub fn crop(&self, w: &Window) -> Result<SwathFrame> {
        if w.row0 + w.rows > self.rows || w.col0 + w.cols > self.cols {
            return Err(invalid("window exceeds frame"));
        }
        let mut values = Vec::with_capacity(self.channels * w.rows * w.cols);
        for c in 0..self.channels {
            for i in 0..w.rows {
                for j in 0..w.cols {
                    values.push(self.value(c, w.row0 + i, w.col0 + j));
                }
            }
        }
        let mask = self.mask.crop(w.row0, w.col0, w.rows, w.cols);
        Ok(SwathFrame {
            instrument_id: self.instrument_id.clone(),
            step: self.step,
            time: self.time,
            bbox: w.bbox,
            channels: self.channels,
            rows: w.rows,
            cols: w.cols,
            values,
            coverage: mask.fraction(),
            mask,
            node_lon: self.node_lon,
        })
    }
}

fn sample_footprint(truth: &TruthField, inst: &Instrument, step: usize) -> Result<SwathFrame> {
    truth.check_step(step)?;
    if inst.mixing.len() != inst.channels * truth.channels() || inst.bias.len() != inst.channels {
        return Err(invalid(format!("instrument `{}` channel map has wrong size", inst.id)));
    }
    let g = truth.grid;
    let t = truth.time_hours(step);
    let (rows, cols) = (g.rows, g.cols);
    let mask = BinaryMask::from_fn(rows, cols, |i, j| {
        let (lon, lat) = g.center(i, j);
        inst.covers(lon, lat, t)
    });
    let mut values = vec![0f32; inst.channels * rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            if !mask.get(i, j) {
                continue;
            }
            let obs = inst.apply(&truth.vector_at(step, i, j));
            for (c, v) in obs.into_iter().enumerate() {
                values[(c * rows + i) * cols + j] = v as f32;
            }
        }
    }
    let node_lon = match inst.footprint {
        Footprint::Leo(o) => Some(o.node_lon(t)),
        Footprint::Geo { .. } => None,
    };
    Ok(SwathFrame {
        instrument_id: inst.id.clone(),
        step,
        time: t,
        bbox: g.extent,
        channels: inst.channels,
        rows,
        cols,
        values,
        coverage: mask.fraction(),
        mask,
        node_lon,
    })
}

/// Samples a polar-orbiter swath at time step `step`.
pub fn sample_leo(truth: &TruthField, inst: &Instrument, step: usize) -> Result<SwathFrame> {
    if !matches!(inst.footprint, Footprint::Leo(_)) {
        return Err(invalid(format!("`{}` is not a LEO instrument", inst.id)));
    }
    sample_footprint(truth, inst, step)
}

/// Samples a geostationary disk at time step `step`.
pub fn sample_geo(truth: &TruthField, inst: &Instrument, step: usize) -> Result<SwathFrame> {
    if !matches!(inst.footprint, Footprint::Geo { .. }) {
        return Err(invalid(format!("`{}` is not a GEO instrument", inst.id)));
    }
    sample_footprint(truth, inst, step)
}

/// Unordered in-situ samples at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSet {
    pub time: f64,
    pub step: usize,
    pub points: Vec<GeoPoint>,
    pub channels: usize,
    /// `[station][channel]`; missing entries hold 0.
    pub values: Vec<f32>,
    pub present: Vec<bool>,
}

impl StationSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn value(&self, s: usize, c: usize) -> Option<f32> {
        let k = s * self.channels + c;
        self.present[k].then_some(self.values[k])
    }

    /// Stations inside `bbox`, order preserved.
    pub fn within(&self, bbox: &BBox) -> StationSet {
        let keep: Vec<usize> =
            (0..self.len()).filter(|&s| bbox.contains(self.points[s].lon, self.points[s].lat)).collect();
        self.select(&keep)
    }

    pub fn select(&self, idx: &[usize]) -> StationSet {
        let c = self.channels;
        let mut values = Vec::with_capacity(idx.len() * c);
        let mut present = Vec::with_capacity(idx.len() * c);
        for &s in idx {
            values.extend_from_slice(&self.values[s * c..(s + 1) * c]);
            present.extend_from_slice(&self.present[s * c..(s + 1) * c]);
        }
        StationSet {
            time: self.time,
            step: self.step,
            points: idx.iter().map(|&s| self.points[s]).collect(),
            channels: c,
            values,
            present,
        }
    }
}

/// Station network: fixed seeded sites plus the station observation operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationNetwork {
    pub id: String,
    pub seed: u64,
    pub sites: Vec<GeoPoint>,
    /// Kelvin per metre applied to channel 0.
    pub lapse_rate: f64,
}

pub const DEFAULT_LAPSE_RATE: f64 = 0.0065;

/// Smooth non-negative terrain height in metres.
pub fn terrain_m(seed: u64, lon: f64, lat: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "terrain", 0));
    let mut h = 0.0;
    for _ in 0..10 {
        let (blon, blat): (f64, f64) = (rng.random_range(-180.0..180.0), rng.random_range(-60.0..70.0));
        let s: f64 = rng.random_range(5.0..15.0);
        let a: f64 = rng.random_range(500.0..3000.0);
        let d = haversine_km(lon, lat, blon, blat) / 111.2;
        h += a * (-(d * d) / (2.0 * s * s)).exp();
    }
    h
}

fn land_proxy(seed: u64, lon: f64, lat: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "land", 0));
    let mut v = -0.35;
    for _ in 0..12 {
        let (blon, blat): (f64, f64) = (rng.random_range(-180.0..180.0), rng.random_range(-60.0..75.0));
        let s: f64 = rng.random_range(15.0..35.0);
        let d = haversine_km(lon, lat, blon, blat) / 111.2;
        v += (-(d * d) / (2.0 * s * s)).exp();
    }
    v
}

impl StationNetwork {
    /// `n` sites drawn area-uniformly, kept where the seeded land proxy is
    /// positive.
    pub fn new(seed: u64, id: &str, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stations", n as u64));
        let mut sites = Vec::with_capacity(n);
        let mut tries = 0usize;
        while sites.len() < n {
            let lon: f64 = rng.random_range(-180.0..180.0);
            let lat: f64 = rng.random_range(-1.0f64..1.0).asin().to_degrees();
            tries += 1;
            // fall back to accept-all if the proxy is too strict
            if land_proxy(seed, lon, lat) > 0.0 || tries > 200 * n.max(1) {
                sites.push(GeoPoint { lon, lat, alt: terrain_m(seed, lon, lat) });
            }
        }
        Self { id: id.to_string(), seed, sites, lapse_rate: DEFAULT_LAPSE_RATE }
    }

    /// Station variables from a truth vector at altitude `alt`.
    pub fn operator(&self, truth: &[f64], alt: f64) -> Vec<f64> {
        let mut v = truth.to_vec();
        v[0] -= self.lapse_rate * alt;
        v
    }
}

pub fn sample_stations(truth: &TruthField, net: &StationNetwork, step: usize, missing_rate: f64) -> Result<StationSet> {
    truth.check_step(step)?;
    if !(0.0..=1.0).contains(&missing_rate) {
        return Err(invalid(format!("missing rate {missing_rate} outside [0, 1]")));
    }
    let channels = truth.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(net.seed, "missing", step as u64));
    let mut values = Vec::with_capacity(net.sites.len() * channels);
    let mut present = Vec::with_capacity(net.sites.len() * channels);
    for p in &net.sites {
        let obs = net.operator(&truth.interp(step, p.lon, p.lat), p.alt);
        for v in obs {
            let missing = rng.random::<f64>() < missing_rate;
            present.push(!missing);
            values.push(if missing { 0.0 } else { v as f32 });
        }
    }
    Ok(StationSet { time: truth.time_hours(step), step, points: net.sites.clone(), channels, values, present })
}

/// Downstream product: `softplus(weights · truth + bias)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductSpec {
    pub id: String,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ProductSpec {
    pub fn default_for(channels: usize) -> Self {
        let mut weights = vec![0.0; channels];
        weights[0] = 1.2;
        if channels > 1 {
            weights[1] = 0.8;
        }
        if channels > 2 {
            weights[2] = -0.5;
        }
        Self { id: "precip".into(), weights, bias: -0.5 }
    }

    pub fn apply(&self, truth: &[f64]) -> f64 {
        let s: f64 = self.weights.iter().zip(truth).map(|(w, t)| w * t).sum();
        eo1_autograd::softplus(s + self.bias)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductField {
    pub product_id: String,
    pub step: usize,
    pub time: f64,
    pub bbox: BBox,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl ProductField {
    pub fn crop(&self, w: &Window) -> ProductField {
        let mut values = Vec::with_capacity(w.rows * w.cols);
        for i in 0..w.rows {
            for j in 0..w.cols {
                values.push(self.values[(w.row0 + i) * self.cols + w.col0 + j]);
            }
        }
        ProductField {
            product_id: self.product_id.clone(),
            step: self.step,
            time: self.time,
            bbox: w.bbox,
            rows: w.rows,
            cols: w.cols,
            values,
        }
    }
}

/// Lattice block covered by `bbox`; the box must sit on cell edges.
pub fn block_of(grid: &GridSpec, bbox: &BBox) -> Result<(usize, usize, usize, usize)> {
    bbox.validate()?;
    let c0 = (bbox.lon_min - grid.extent.lon_min) / grid.dlon();
    let c1 = (bbox.lon_max - grid.extent.lon_min) / grid.dlon();
    let r0 = (grid.extent.lat_max - bbox.lat_max) / grid.dlat();
    let r1 = (grid.extent.lat_max - bbox.lat_min) / grid.dlat();
    let aligned = [c0, c1, r0, r1].iter().all(|v| (v - v.round()).abs() < 1e-9);
    if !aligned || c0 < -1e-9 || r0 < -1e-9 || c1.round() as usize > grid.cols || r1.round() as usize > grid.rows {
        return Err(invalid(format!("bbox {bbox:?} not aligned to the lattice")));
    }
    let (r0, c0) = (r0.round() as usize, c0.round() as usize);
    Ok((r0, c0, r1.round() as usize - r0, c1.round() as usize - c0))
}

pub fn derive_product(truth: &TruthField, bbox: &BBox, step: usize, spec: &ProductSpec) -> Result<ProductField> {
    truth.check_step(step)?;
    if spec.weights.len() != truth.channels() {
        return Err(invalid("product weights must match truth channels"));
    }
    let (r0, c0, rows, cols) = block_of(&truth.grid, bbox)?;
    let mut values = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            values.push(spec.apply(&truth.vector_at(step, r0 + i, c0 + j)) as f32);
        }
    }
    Ok(ProductField {
        product_id: spec.id.clone(),
        step,
        time: truth.time_hours(step),
        bbox: *bbox,
        rows,
        cols,
        values,
    })
}
