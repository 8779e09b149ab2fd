//! Seeded synthetic Earth system and its simulated observing network.

pub mod container;
pub mod sensors;
pub mod truth;

use serde::{Deserialize, Serialize};

pub use container::{read_dataset, write_dataset, Dataset, Dims, ProductSeries, StationSeries, SwathSeries};
pub use sensors::{
    derive_product, sample_geo, sample_leo, sample_stations, Footprint, Instrument, OrbitParams, ProductField,
    ProductSpec, StationNetwork, StationSet, SwathFrame,
};
pub use truth::{gen_truth, TruthField, TruthParams};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentSpec {
    pub id: String,
    pub channels: usize,
    pub footprint: Footprint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub truth: TruthParams,
    pub instruments: Vec<InstrumentSpec>,
    pub stations_id: String,
    pub n_stations: usize,
    pub missing_rate: f64,
    pub product: ProductSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let truth = TruthParams::default();
        let product = ProductSpec::default_for(truth.channels);
        Self {
            truth,
            instruments: vec![
                InstrumentSpec { id: "leo_a".into(), channels: 3, footprint: Footprint::Leo(OrbitParams::default()) },
                InstrumentSpec {
                    id: "leo_b".into(),
                    channels: 2,
                    footprint: Footprint::Leo(OrbitParams {
                        inclination_deg: 98.0,
                        node_lon0_deg: 100.0,
                        precession_deg_per_hour: -9.5,
                        band_width_km: 560.0,
                    }),
                },
                InstrumentSpec {
                    id: "geo_a".into(),
                    channels: 2,
                    footprint: Footprint::Geo { nadir_lon: 0.0, radius_km: 6500.0 },
                },
            ],
            stations_id: "insitu".into(),
            n_stations: 400,
            missing_rate: 0.1,
            product,
        }
    }
}

/// The generating system behind a dataset.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub truth: TruthField,
    pub instruments: Vec<Instrument>,
    pub network: StationNetwork,
    pub product: ProductSpec,
}

pub fn build_system(cfg: &SynthConfig) -> Result<Synthetic> {
    let truth = gen_truth(cfg.truth.clone())?;
    let seed = cfg.truth.seed;
    let instruments = cfg
        .instruments
        .iter()
        .map(|s| Instrument::new(seed, &s.id, s.channels, cfg.truth.channels, s.footprint))
        .collect();
    let network = StationNetwork::new(seed, &cfg.stations_id, cfg.n_stations);
    Ok(Synthetic { truth, instruments, network, product: cfg.product.clone() })
}

/// Samples every instrument, the station network and the product at every step.
pub fn generate(cfg: &SynthConfig) -> Result<(Synthetic, Dataset)> {
    let sys = build_system(cfg)?;
    let steps = sys.truth.steps();
    let mut swaths = Vec::new();
    for inst in &sys.instruments {
        let frames = (0..steps)
            .map(|s| match inst.footprint {
                Footprint::Leo(_) => sample_leo(&sys.truth, inst, s),
                Footprint::Geo { .. } => sample_geo(&sys.truth, inst, s),
            })
            .collect::<Result<Vec<_>>>()?;
        swaths.push(SwathSeries { instrument_id: inst.id.clone(), channels: inst.channels, frames });
    }
    let sets = (0..steps)
        .map(|s| sample_stations(&sys.truth, &sys.network, s, cfg.missing_rate))
        .collect::<Result<Vec<_>>>()?;
    let fields = (0..steps)
        .map(|s| derive_product(&sys.truth, &sys.truth.grid.extent, s, &sys.product))
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        seed: cfg.truth.seed,
        dims: Dims { rows: cfg.truth.rows, cols: cfg.truth.cols, steps, dt_hours: cfg.truth.dt_hours },
        forecast: false,
        lead_time_hours: None,
        swaths,
        stations: vec![StationSeries { id: cfg.stations_id.clone(), channels: cfg.truth.channels, sets }],
        products: vec![ProductSeries { id: sys.product.id.clone(), fields }],
    };
    Ok((sys, ds))
}
