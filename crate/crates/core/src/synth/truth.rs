use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geo::GridSpec;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthParams {
    pub seed: u64,
    pub steps: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub dt_hours: f64,
    pub n_bumps: usize,
    /// Zonal advection speed per channel, degrees of longitude per hour.
    pub speeds: Vec<f64>,
}

impl Default for TruthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 16,
            rows: 64,
            cols: 128,
            channels: 3,
            dt_hours: 6.0,
            n_bumps: 24,
            speeds: vec![0.46875, -0.234375, 0.9375],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Bump {
    lon: f64,
    lat: f64,
    sigma: f64,
}

/// Seeded analytic atmosphere: Gaussian bumps advected zonally over a static
/// latitudinal background, evaluated on an equirectangular lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthField {
    pub params: TruthParams,
    pub grid: GridSpec,
    bumps: Vec<Bump>,
    /// `[bump][channel]`
    amps: Vec<f64>,
    /// `[step][channel][row][col]`
    data: Vec<f64>,
}

fn wrap_lon(d: f64) -> f64 {
    (d + 180.0).rem_euclid(360.0) - 180.0
}

fn background(c: usize, lat: f64) -> f64 {
    let r = lat.to_radians();
    match c % 3 {
        0 => 1.5 * r.cos() - 0.5,
        1 => 0.4 * r.sin(),
        _ => 0.3 * (2.0 * r).cos(),
    }
}

pub fn gen_truth(params: TruthParams) -> Result<TruthField> {
    if params.steps < 1 {
        return Err(invalid("truth needs at least one step"));
    }
    if params.rows < 16 || params.cols < 16 {
        return Err(invalid(format!("truth lattice must be at least 16x16, got {}x{}", params.rows, params.cols)));
    }
    if params.channels == 0 || params.speeds.len() != params.channels {
        return Err(invalid("one advection speed per truth channel is required"));
    }
    if !(params.dt_hours > 0.0) || params.speeds.iter().any(|v| !v.is_finite()) {
        return Err(invalid("dt and speeds must be finite and dt positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, "truth", 0));
    let amp = Normal::new(0.0, 0.8).unwrap();
    let mut bumps = Vec::with_capacity(params.n_bumps);
    let mut amps = Vec::with_capacity(params.n_bumps * params.channels);
    for _ in 0..params.n_bumps {
        bumps.push(Bump {
            lon: rng.random_range(-180.0..180.0),
            lat: rng.random_range(-70.0..70.0),
            sigma: rng.random_range(8.0..18.0),
        });
        for _ in 0..params.channels {
            amps.push(amp.sample(&mut rng));
        }
    }
    let grid = GridSpec::global(params.rows, params.cols);
    let mut field = TruthField { params, grid, bumps, amps, data: Vec::new() };
    let p = &field.params;
    let mut data = Vec::with_capacity(p.steps * p.channels * p.rows * p.cols);
    for s in 0..p.steps {
        let t = s as f64 * p.dt_hours;
        for c in 0..p.channels {
            for i in 0..p.rows {
                for j in 0..p.cols {
                    let (lon, lat) = field.grid.center(i, j);
                    data.push(field.eval(c, lon, lat, t));
                }
            }
        }
    }
    field.data = data;
    Ok(field)
}

impl TruthField {
    /// Analytic value of channel `c` at an arbitrary location and time.
    pub fn eval(&self, c: usize, lon: f64, lat: f64, t_hours: f64) -> f64 {
        let shift = self.params.speeds[c] * t_hours;
        let nc = self.params.channels;
        let mut v = background(c, lat);
        for (b, bump) in self.bumps.iter().enumerate() {
            let dx = wrap_lon(lon - bump.lon - shift);
            let dy = lat - bump.lat;
            let g = (-(dx * dx + dy * dy) / (2.0 * bump.sigma * bump.sigma)).exp();
            v += self.amps[b * nc + c] * g;
        }
        v
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn channels(&self) -> usize {
        self.params.channels
    }

    pub fn time_hours(&self, step: usize) -> f64 {
        step as f64 * self.params.dt_hours
    }

    pub fn check_step(&self, step: usize) -> Result<()> {
        if step >= self.params.steps {
            return Err(invalid(format!("time step {step} outside truth range 0..{}", self.params.steps)));
        }
        Ok(())
    }

    pub fn at(&self, step: usize, c: usize, i: usize, j: usize) -> f64 {
        let p = &self.params;
        self.data[((step * p.channels + c) * p.rows + i) * p.cols + j]
    }

    /// All channels at one lattice node.
    pub fn vector_at(&self, step: usize, i: usize, j: usize) -> Vec<f64> {
        (0..self.params.channels).map(|c| self.at(step, c, i, j)).collect()
    }

    /// One step as `[channel][row][col]`.
    pub fn step_slice(&self, step: usize) -> &[f64] {
        let p = &self.params;
        let n = p.channels * p.rows * p.cols;
        &self.data[step * n..(step + 1) * n]
    }

    /// Bilinear interpolation between lattice centres; periodic in longitude,
    /// clamped at the polar rows. Exact at lattice nodes.
    pub fn interp(&self, step: usize, lon: f64, lat: f64) -> Vec<f64> {
        let p = &self.params;
        let snap = |x: f64| {
            let r = x.round();
            if (x - r).abs() < 1e-9 {
                r
            } else {
                x
            }
        };
        let x = snap((lon - self.grid.extent.lon_min) / self.grid.dlon() - 0.5);
        let y = snap((self.grid.extent.lat_max - lat) / self.grid.dlat() - 0.5).clamp(0.0, (p.rows - 1) as f64);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let cols = p.cols as i64;
        let j0 = (x0 as i64).rem_euclid(cols) as usize;
        let j1 = (x0 as i64 + 1).rem_euclid(cols) as usize;
        let i0 = y0 as usize;
        let i1 = (i0 + 1).min(p.rows - 1);
        (0..p.channels)
            .map(|c| {
                let v00 = self.at(step, c, i0, j0);
                if fx == 0.0 && fy == 0.0 {
                    return v00;
                }
                let v01 = self.at(step, c, i0, j1);
                let v10 = self.at(step, c, i1, j0);
                let v11 = self.at(step, c, i1, j1);
                (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
            })
            .collect()
    }
}
