//! Spherical geometry and binary-mask morphology shared by the tokenizers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// A location on the globe. `lon` in [-180, 180), `lat` in [-90, 90], `alt` in
/// metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
    pub alt: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        Self::with_alt(lon, lat, 0.0)
    }

    pub fn with_alt(lon: f64, lat: f64, alt: f64) -> Result<Self> {
        let p = Self { lon, lat, alt };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lon.is_finite() && self.lat.is_finite() && self.alt.is_finite()) {
            return Err(invalid(format!("non-finite coordinates {self:?}")));
        }
        if !(-180.0..180.0).contains(&self.lon) || !(-90.0..=90.0).contains(&self.lat) {
            return Err(invalid(format!("coordinates out of range {self:?}")));
        }
        Ok(())
    }
}

/// Longitude/latitude rectangle. Never wraps the anti-meridian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl BBox {
    pub fn new(lon_min: f64, lon_max: f64, lat_min: f64, lat_max: f64) -> Result<Self> {
        let b = Self { lon_min, lon_max, lat_min, lat_max };
        b.validate()?;
        Ok(b)
    }

    pub const fn global() -> Self {
        Self { lon_min: -180.0, lon_max: 180.0, lat_min: -90.0, lat_max: 90.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lon_min, self.lon_max, self.lat_min, self.lat_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite bbox {self:?}")));
        }
        if self.lon_min >= self.lon_max || self.lat_min >= self.lat_max {
            return Err(invalid(format!("degenerate or wrapping bbox {self:?} (anti-meridian crossing unsupported)")));
        }
        if self.lon_min < -180.0 || self.lon_max > 180.0 || self.lat_min < -90.0 || self.lat_max > 90.0 {
            return Err(invalid(format!("bbox outside the globe {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.lon_max - self.lon_min
    }

    pub fn height(&self) -> f64 {
        self.lat_max - self.lat_min
    }

    /// Half-open membership test; the north edge is closed at the pole.
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        let lat_ok = lat >= self.lat_min && (lat < self.lat_max || (self.lat_max == 90.0 && lat <= 90.0));
        lon >= self.lon_min && lon < self.lon_max && lat_ok
    }
}

/// H×W grid of 0/1 cells, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(invalid(format!("mask dims must be positive, got {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(invalid(format!("mask {h}x{w} needs {} cells, got {}", h * w, data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(invalid("mask entries must be 0 or 1"));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        assert!(h > 0 && w > 0);
        Self { h, w, data: vec![0; h * w] }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        assert!(h > 0 && w > 0);
        Self { h, w, data: vec![1; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        assert!(h > 0 && w > 0);
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j) as u8);
            }
        }
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.w + j] == 1
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.w + j] = v as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count_ones() as f64 / self.data.len() as f64
    }

    /// Elementwise `self ≤ other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.h == other.h && self.w == other.w && self.data.iter().zip(&other.data).all(|(a, b)| a <= b)
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!((self.h, self.w), (other.h, other.w));
        BinaryMask { h: self.h, w: self.w, data: self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect() }
    }

    /// Nearest-neighbour expansion of each cell into a `p×p` block.
    pub fn upsample(&self, p: usize) -> BinaryMask {
        BinaryMask::from_fn(self.h * p, self.w * p, |i, j| self.get(i / p, j / p))
    }

    pub fn crop(&self, row0: usize, col0: usize, h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |i, j| self.get(row0 + i, col0 + j))
    }
}

/// Per-block valid fractions produced by [`area_downsample`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FractionGrid {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Cells with fraction ≥ `thresh` become 1.
    pub fn binarize(&self, thresh: f64) -> BinaryMask {
        BinaryMask::from_fn(self.h, self.w, |i, j| self.get(i, j) >= thresh)
    }
}

/// Great-circle distance in km between raw degree coordinates.
pub fn haversine_km(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = p2 - p1;
    let dlam = (lon2 - lon1).to_radians();
    let a = (dphi * 0.5).sin().powi(2) + p1.cos() * p2.cos() * (dlam * 0.5).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

pub fn haversine(a: &GeoPoint, b: &GeoPoint) -> Result<f64> {
    for p in [a, b] {
        if !(p.lon.is_finite() && p.lat.is_finite()) {
            return Err(invalid(format!("non-finite coordinates {p:?}")));
        }
    }
    Ok(haversine_km(a.lon, a.lat, b.lon, b.lat))
}

/// Indices of the `k` nearest refs for each query, ascending distance, ties
/// broken by ref index.
pub fn knn(queries: &[GeoPoint], refs: &[GeoPoint], k: usize) -> Result<Vec<Vec<usize>>> {
    if refs.is_empty() {
        return Err(invalid("knn needs at least one reference point"));
    }
    if k == 0 {
        return Err(invalid("knn needs K >= 1"));
    }
    for p in queries.iter().chain(refs) {
        if !(p.lon.is_finite() && p.lat.is_finite()) {
            return Err(invalid(format!("non-finite coordinates {p:?}")));
        }
    }
    let k = k.min(refs.len());
    Ok(queries
        .iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> =
                refs.iter().enumerate().map(|(i, r)| (haversine_km(q.lon, q.lat, r.lon, r.lat), i)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.truncate(k);
            d.into_iter().map(|(_, i)| i).collect()
        })
        .collect())
}

/// Erosion with a `(2r+1)²` square; cells outside the grid count as 0.
pub fn erode_mask(m: &BinaryMask, radius: i64) -> Result<BinaryMask> {
    if radius < 0 {
        return Err(invalid(format!("erosion radius must be >= 0, got {radius}")));
    }
    let r = radius as usize;
    if r == 0 {
        return Ok(m.clone());
    }
    let (h, w) = (m.h, m.w);
    // separable: a row pass then a column pass of running minima
    let mut rows = vec![0u8; h * w];
    for i in 0..h {
        for j in 0..w {
            let ok = j >= r && j + r < w && (j - r..=j + r).all(|jj| m.data[i * w + jj] == 1);
            rows[i * w + j] = ok as u8;
        }
    }
    let mut out = vec![0u8; h * w];
    for i in 0..h {
        for j in 0..w {
            let ok = i >= r && i + r < h && (i - r..=i + r).all(|ii| rows[ii * w + j] == 1);
            out[i * w + j] = ok as u8;
        }
    }
    Ok(BinaryMask { h, w, data: out })
}

/// Mean of each `p×p` block.
pub fn area_downsample(m: &BinaryMask, p: usize) -> Result<FractionGrid> {
    if p == 0 || !m.h.is_multiple_of(p) || !m.w.is_multiple_of(p) {
        return Err(invalid(format!("patch size {p} does not divide mask dims {}x{}", m.h, m.w)));
    }
    let (oh, ow) = (m.h / p, m.w / p);
    let area = (p * p) as f64;
    let mut data = Vec::with_capacity(oh * ow);
    for bi in 0..oh {
        for bj in 0..ow {
            let mut c = 0usize;
            for i in bi * p..(bi + 1) * p {
                for j in bj * p..(bj + 1) * p {
                    c += m.data[i * m.w + j] as usize;
                }
            }
            data.push(c as f64 / area);
        }
    }
    Ok(FractionGrid { h: oh, w: ow, data })
}

/// `l×l` cell-centre anchors, north row first, west to east within a row.
pub fn grid_anchors(bbox: &BBox, l: usize) -> Result<Vec<GeoPoint>> {
    bbox.validate()?;
    if l == 0 {
        return Err(invalid("anchor grid side must be >= 1"));
    }
    let dlon = bbox.width() / l as f64;
    let dlat = bbox.height() / l as f64;
    let mut out = Vec::with_capacity(l * l);
    for r in (0..l).rev() {
        let lat = bbox.lat_min + (r as f64 + 0.5) * dlat;
        for c in 0..l {
            let lon = bbox.lon_min + (c as f64 + 0.5) * dlon;
            out.push(GeoPoint { lon, lat, alt: 0.0 });
        }
    }
    Ok(out)
}

/// A regular equirectangular lattice over an extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub extent: BBox,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(extent: BBox, rows: usize, cols: usize) -> Result<Self> {
        extent.validate()?;
        if rows == 0 || cols == 0 {
            return Err(invalid("grid dims must be positive"));
        }
        Ok(Self { extent, rows, cols })
    }

    pub fn global(rows: usize, cols: usize) -> Self {
        Self { extent: BBox::global(), rows, cols }
    }

    pub fn dlon(&self) -> f64 {
        self.extent.width() / self.cols as f64
    }

    pub fn dlat(&self) -> f64 {
        self.extent.height() / self.rows as f64
    }

    /// Centre of cell `(i, j)`; row 0 is the northernmost.
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (self.extent.lon_min + (j as f64 + 0.5) * self.dlon(), self.extent.lat_max - (i as f64 + 0.5) * self.dlat())
    }

    /// Extent of the sub-block starting at `(row0, col0)`.
    pub fn block_bbox(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> BBox {
        BBox {
            lon_min: self.extent.lon_min + col0 as f64 * self.dlon(),
            lon_max: self.extent.lon_min + (col0 + cols) as f64 * self.dlon(),
            lat_min: self.extent.lat_max - (row0 + rows) as f64 * self.dlat(),
            lat_max: self.extent.lat_max - row0 as f64 * self.dlat(),
        }
    }
}

/// One sliding-window placement on a [`GridSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    pub bbox: BBox,
}

fn window_starts(dim: usize, win: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + win >= dim {
            starts.push(dim - win);
            break;
        }
        starts.push(s);
        s += stride;
    }
    starts
}

/// Windows of `window = (rows, cols)` cells stepping by `stride`; the last
/// window on each axis is clamped to the boundary.
pub fn sliding_windows(grid: &GridSpec, window: (usize, usize), stride: usize) -> Result<Vec<Window>> {
    let (wr, wc) = window;
    if stride == 0 {
        return Err(invalid("stride must be >= 1"));
    }
    if wr == 0 || wc == 0 {
        return Err(invalid("window dims must be positive"));
    }
    if wr > grid.rows || wc > grid.cols {
        return Err(invalid(format!("window {wr}x{wc} larger than extent {}x{}", grid.rows, grid.cols)));
    }
    let mut out = Vec::new();
    for r in window_starts(grid.rows, wr, stride) {
        for c in window_starts(grid.cols, wc, stride) {
            out.push(Window { row0: r, col0: c, rows: wr, cols: wc, bbox: grid.block_bbox(r, c, wr, wc) });
        }
    }
    Ok(out)
}
