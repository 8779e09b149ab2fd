//! On-disk dataset container.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<instrument_id>/<step:06>.val   raw f32 LE, [channel][row][col]
//! <dir>/<instrument_id>/<step:06>.msk   u8, [row][col]
//! <dir>/<station_id>/<step:06>.csv      lon,lat,alt,var0,..  (NA = missing)
//! <dir>/<product_id>/<step:06>.val      raw f32 LE, [row][col]
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sensors::{ProductField, StationSet, SwathFrame};
use crate::error::{invalid, Error, Result};
use crate::geo::{BBox, BinaryMask, GeoPoint};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub rows: usize,
    pub cols: usize,
    pub steps: usize,
    pub dt_hours: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Swath,
    Stations,
    Product,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub step: usize,
    pub time: f64,
    pub bbox: BBox,
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityEntry {
    pub instrument_id: String,
    pub kind: ModalityKind,
    pub channels: usize,
    pub frame_count: usize,
    pub dtype: String,
    pub byte_order: String,
    pub frames: Vec<FrameEntry>,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub dims: Dims,
    #[serde(default)]
    pub forecast: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lead_time_hours: Option<f64>,
    pub modalities: Vec<ModalityEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwathSeries {
    pub instrument_id: String,
    pub channels: usize,
    pub frames: Vec<SwathFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSeries {
    pub id: String,
    pub channels: usize,
    pub sets: Vec<StationSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductSeries {
    pub id: String,
    pub fields: Vec<ProductField>,
}

/// Everything a dataset directory holds, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub dims: Dims,
    pub forecast: bool,
    pub lead_time_hours: Option<f64>,
    pub swaths: Vec<SwathSeries>,
    pub stations: Vec<StationSeries>,
    pub products: Vec<ProductSeries>,
}

impl Dataset {
    pub fn swath(&self, id: &str) -> Option<&SwathSeries> {
        self.swaths.iter().find(|s| s.instrument_id == id)
    }

    pub fn station_series(&self, id: &str) -> Option<&StationSeries> {
        self.stations.iter().find(|s| s.id == id)
    }

    pub fn product(&self, id: &str) -> Option<&ProductSeries> {
        self.products.iter().find(|s| s.id == id)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn f32_from_bytes(b: &[u8]) -> Result<Vec<f32>> {
    if !b.len().is_multiple_of(4) {
        return Err(Error::Integrity("float32 payload length not a multiple of 4".into()));
    }
    Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(invalid(format!("modality id `{id}` must be [A-Za-z0-9_-]+")))
    }
}

struct Writer<'a> {
    root: &'a Path,
}

impl Writer<'_> {
    fn put(&self, rel: String, bytes: &[u8]) -> Result<FileEntry> {
        let full = self.root.join(&rel);
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&full, bytes)?;
        Ok(FileEntry { path: rel, sha256: sha256_hex(bytes) })
    }
}

fn stations_csv(set: &StationSet) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["lon".to_string(), "lat".to_string(), "alt".to_string()];
    header.extend((0..set.channels).map(|c| format!("var{c}")));
    w.write_record(&header)?;
    for (s, p) in set.points.iter().enumerate() {
        let mut row = vec![p.lon.to_string(), p.lat.to_string(), p.alt.to_string()];
        for c in 0..set.channels {
            row.push(match set.value(s, c) {
                Some(v) => v.to_string(),
                None => "NA".to_string(),
            });
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn parse_stations_csv(bytes: &[u8], channels: usize, step: usize, time: f64) -> Result<StationSet> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?.clone();
    if header.len() != 3 + channels {
        return Err(Error::Integrity(format!("station csv has {} columns, expected {}", header.len(), 3 + channels)));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::Integrity(format!("bad number `{s}` in station csv")))
    };
    let mut points = Vec::new();
    let mut values = Vec::new();
    let mut present = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        points.push(GeoPoint { lon: num(&rec[0])?, lat: num(&rec[1])?, alt: num(&rec[2])? });
        for c in 0..channels {
            let cell = &rec[3 + c];
            if cell == "NA" {
                values.push(0.0);
                present.push(false);
            } else {
                let v =
                    cell.parse::<f32>().map_err(|_| Error::Integrity(format!("bad value `{cell}` in station csv")))?;
                values.push(v);
                present.push(true);
            }
        }
    }
    Ok(StationSet { time, step, points, channels, values, present })
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let w = Writer { root: dir };
    let mut modalities = Vec::new();
    for s in &ds.swaths {
        check_id(&s.instrument_id)?;
        let mut frames = Vec::new();
        let mut files = Vec::new();
        for f in &s.frames {
            if f.channels != s.channels {
                return Err(invalid("frame channel count differs from its series"));
            }
            files.push(w.put(format!("{}/{:06}.val", s.instrument_id, f.step), &f32_bytes(&f.values))?);
            files.push(w.put(format!("{}/{:06}.msk", s.instrument_id, f.step), f.mask.data())?);
            frames.push(FrameEntry {
                step: f.step,
                time: f.time,
                bbox: f.bbox,
                rows: f.rows,
                cols: f.cols,
                coverage: Some(f.coverage),
                node_lon: f.node_lon,
                stations: None,
            });
        }
        modalities.push(ModalityEntry {
            instrument_id: s.instrument_id.clone(),
            kind: ModalityKind::Swath,
            channels: s.channels,
            frame_count: frames.len(),
            dtype: "float32".into(),
            byte_order: "little-endian".into(),
            frames,
            files,
        });
    }
    for s in &ds.stations {
        check_id(&s.id)?;
        let mut frames = Vec::new();
        let mut files = Vec::new();
        for set in &s.sets {
            files.push(w.put(format!("{}/{:06}.csv", s.id, set.step), &stations_csv(set)?)?);
            frames.push(FrameEntry {
                step: set.step,
                time: set.time,
                bbox: BBox::global(),
                rows: 0,
                cols: 0,
                coverage: None,
                node_lon: None,
                stations: Some(set.len()),
            });
        }
        modalities.push(ModalityEntry {
            instrument_id: s.id.clone(),
            kind: ModalityKind::Stations,
            channels: s.channels,
            frame_count: frames.len(),
            dtype: "float32".into(),
            byte_order: "little-endian".into(),
            frames,
            files,
        });
    }
    for p in &ds.products {
        check_id(&p.id)?;
        let mut frames = Vec::new();
        let mut files = Vec::new();
        for f in &p.fields {
            files.push(w.put(format!("{}/{:06}.val", p.id, f.step), &f32_bytes(&f.values))?);
            frames.push(FrameEntry {
                step: f.step,
                time: f.time,
                bbox: f.bbox,
                rows: f.rows,
                cols: f.cols,
                coverage: None,
                node_lon: None,
                stations: None,
            });
        }
        modalities.push(ModalityEntry {
            instrument_id: p.id.clone(),
            kind: ModalityKind::Product,
            channels: 1,
            frame_count: frames.len(),
            dtype: "float32".into(),
            byte_order: "little-endian".into(),
            frames,
            files,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: ds.seed,
        dims: ds.dims.clone(),
        forecast: ds.forecast,
        lead_time_hours: ds.lead_time_hours,
        modalities,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Integrity(format!("unsupported container version {}", m.format_version)));
    }
    Ok(m)
}

fn read_checked(dir: &Path, entry: &FileEntry) -> Result<Vec<u8>> {
    if entry.path.contains("..") {
        return Err(Error::Integrity(format!("suspicious path `{}`", entry.path)));
    }
    let bytes = fs::read(dir.join(&entry.path))?;
    let got = sha256_hex(&bytes);
    if got != entry.sha256 {
        return Err(Error::Integrity(format!(
            "checksum mismatch for `{}`: manifest {}, file {}",
            entry.path, entry.sha256, got
        )));
    }
    Ok(bytes)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let mut ds = Dataset {
        seed: m.seed,
        dims: m.dims.clone(),
        forecast: m.forecast,
        lead_time_hours: m.lead_time_hours,
        swaths: Vec::new(),
        stations: Vec::new(),
        products: Vec::new(),
    };
    for md in &m.modalities {
        if md.frame_count != md.frames.len() {
            return Err(Error::Integrity(format!(
                "`{}`: frame_count {} but {} frame entries",
                md.instrument_id,
                md.frame_count,
                md.frames.len()
            )));
        }
        if md.dtype != "float32" || md.byte_order != "little-endian" {
            return Err(Error::Integrity(format!("`{}`: unsupported dtype", md.instrument_id)));
        }
        let per_frame = match md.kind {
            ModalityKind::Swath => 2,
            _ => 1,
        };
        if md.files.len() != per_frame * md.frames.len() {
            return Err(Error::Integrity(format!("`{}`: file list incomplete", md.instrument_id)));
        }
        match md.kind {
            ModalityKind::Swath => {
                let mut frames = Vec::new();
                for (k, fe) in md.frames.iter().enumerate() {
                    let values = f32_from_bytes(&read_checked(dir, &md.files[2 * k])?)?;
                    let mask_bytes = read_checked(dir, &md.files[2 * k + 1])?;
                    if values.len() != md.channels * fe.rows * fe.cols {
                        return Err(Error::Integrity(format!("`{}`: value payload size", md.instrument_id)));
                    }
                    let mask =
                        BinaryMask::new(fe.rows, fe.cols, mask_bytes).map_err(|e| Error::Integrity(e.to_string()))?;
                    frames.push(SwathFrame {
                        instrument_id: md.instrument_id.clone(),
                        step: fe.step,
                        time: fe.time,
                        bbox: fe.bbox,
                        channels: md.channels,
                        rows: fe.rows,
                        cols: fe.cols,
                        values,
                        coverage: fe.coverage.unwrap_or_else(|| mask.fraction()),
                        mask,
                        node_lon: fe.node_lon,
                    });
                }
                ds.swaths.push(SwathSeries { instrument_id: md.instrument_id.clone(), channels: md.channels, frames });
            }
            ModalityKind::Stations => {
                let mut sets = Vec::new();
                for (k, fe) in md.frames.iter().enumerate() {
                    let bytes = read_checked(dir, &md.files[k])?;
                    sets.push(parse_stations_csv(&bytes, md.channels, fe.step, fe.time)?);
                }
                ds.stations.push(StationSeries { id: md.instrument_id.clone(), channels: md.channels, sets });
            }
            ModalityKind::Product => {
                let mut fields = Vec::new();
                for (k, fe) in md.frames.iter().enumerate() {
                    let values = f32_from_bytes(&read_checked(dir, &md.files[k])?)?;
                    if values.len() != fe.rows * fe.cols {
                        return Err(Error::Integrity(format!("`{}`: product payload size", md.instrument_id)));
                    }
                    fields.push(ProductField {
                        product_id: md.instrument_id.clone(),
                        step: fe.step,
                        time: fe.time,
                        bbox: fe.bbox,
                        rows: fe.rows,
                        cols: fe.cols,
                        values,
                    });
                }
                ds.products.push(ProductSeries { id: md.instrument_id.clone(), fields });
            }
        }
    }
    Ok(ds)
}
