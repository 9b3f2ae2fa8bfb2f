//! Strain maps on a regular grid, with CSV + JSON sidecar and PNG export.

use super::{AnalysisError, Trace};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Regular grid in µm; `z` is physical depth below the surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub dims: [usize; 3],
}

impl GridGeometry {
    pub fn plane(origin: [f64; 2], spacing: [f64; 2], dims: [usize; 2], z: f64) -> Self {
        Self { origin: [origin[0], origin[1], z], spacing: [spacing[0], spacing[1], 1.0], dims: [dims[0], dims[1], 1] }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major index with x fastest.
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let ix = i % self.dims[0];
        let iy = (i / self.dims[0]) % self.dims[1];
        let iz = i / (self.dims[0] * self.dims[1]);
        [ix, iy, iz]
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        let c = self.coords(i);
        [0, 1, 2].map(|k| self.origin[k] + self.spacing[k] * c[k] as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct MapMetadata {
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    /// Virtual acquisition time from sequence/camera timing, s.
    pub virtual_time_s: f64,
    pub units: BTreeMap<String, String>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrainMap {
    pub geometry: GridGeometry,
    /// Mz per cell, Hz.
    pub mz: Vec<f64>,
    /// Weighted-average strain ε̄ per cell.
    pub strain: Vec<f64>,
    /// 1σ uncertainty of Mz, Hz.
    pub sigma: Vec<f64>,
    /// Fringe amplitude (ν_XY denominator or fitted visibility amplitude).
    pub amplitude: Vec<f64>,
    /// Cells excluded from analysis.
    pub masked: Vec<bool>,
    pub metadata: MapMetadata,
}

impl MapMetadata {
    /// Empty metadata with the standard column units.
    pub fn new() -> Self {
        Self { units: default_units(), ..Default::default() }
    }
}

fn default_units() -> BTreeMap<String, String> {
    [("x", "um"), ("y", "um"), ("z", "um"), ("Mz_Hz", "Hz"), ("strain", "1"), ("sigma", "Hz"), ("amplitude", "1")]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Row {
    x: f64,
    y: f64,
    z: f64,
    #[serde(rename = "Mz_Hz")]
    mz: f64,
    strain: f64,
    sigma: f64,
    amplitude: f64,
    mask: u8,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    geometry: GridGeometry,
    #[serde(flatten)]
    metadata: MapMetadata,
}

fn io_err(e: impl std::fmt::Display) -> AnalysisError {
    AnalysisError::Io(e.to_string())
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

impl StrainMap {
    pub fn new(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            mz: vec![0.0; n],
            strain: vec![0.0; n],
            sigma: vec![0.0; n],
            amplitude: vec![0.0; n],
            masked: vec![true; n],
            metadata: MapMetadata::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.mz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mz.is_empty()
    }

    pub fn set(&mut self, i: usize, mz: f64, sigma: f64, amplitude: f64) {
        self.mz[i] = mz;
        self.strain[i] = crate::sample::strain_from_mz(mz);
        self.sigma[i] = sigma;
        self.amplitude[i] = amplitude;
        self.masked[i] = false;
    }

    pub fn mask(&mut self, i: usize) {
        self.mz[i] = 0.0;
        self.strain[i] = 0.0;
        self.sigma[i] = 0.0;
        self.masked[i] = true;
    }

    pub fn measured(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| !self.masked[i])
    }

    pub fn median_amplitude(&self) -> f64 {
        let mut a: Vec<f64> = self.measured().map(|i| self.amplitude[i]).collect();
        if a.is_empty() {
            return 0.0;
        }
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        a[a.len() / 2]
    }

    /// Masks cells whose amplitude is below `fraction` of the median.
    pub fn apply_amplitude_mask(&mut self, fraction: f64) -> usize {
        let thr = fraction * self.median_amplitude();
        let low: Vec<usize> = self.measured().filter(|&i| self.amplitude[i] < thr).collect();
        for &i in &low {
            self.mask(i);
        }
        low.len()
    }

    pub fn mean_mz(&self) -> f64 {
        let v: Vec<f64> = self.measured().map(|i| self.mz[i]).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    /// Subtracts the field-of-view mean to give relative Mz and strain.
    pub fn relative(&self) -> Self {
        let m = self.mean_mz();
        let mut out = self.clone();
        for i in 0..self.len() {
            if !self.masked[i] {
                out.mz[i] -= m;
                out.strain[i] = crate::sample::strain_from_mz(out.mz[i]);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let n = self.geometry.len();
        for (name, l) in [
            ("mz", self.mz.len()),
            ("strain", self.strain.len()),
            ("sigma", self.sigma.len()),
            ("amplitude", self.amplitude.len()),
            ("masked", self.masked.len()),
        ] {
            if l != n {
                return Err(AnalysisError::LengthMismatch(format!("{name} has {l} cells, grid has {n}")));
            }
        }
        for i in self.measured() {
            if ![self.mz[i], self.strain[i], self.sigma[i], self.amplitude[i]].iter().all(|v| v.is_finite()) {
                return Err(AnalysisError::InvalidInput(format!("non-finite value in cell {i}")));
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, AnalysisError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for i in 0..self.len() {
            let p = self.geometry.position(i);
            w.serialize(Row {
                x: p[0],
                y: p[1],
                z: p[2],
                mz: self.mz[i],
                strain: self.strain[i],
                sigma: self.sigma[i],
                amplitude: self.amplitude[i],
                mask: self.masked[i] as u8,
            })
            .map_err(io_err)?;
        }
        String::from_utf8(w.into_inner().map_err(io_err)?).map_err(io_err)
    }

    pub fn sidecar_json(&self) -> Result<String, AnalysisError> {
        let s = Sidecar { geometry: self.geometry.clone(), metadata: self.metadata.clone() };
        serde_json::to_string_pretty(&s).map_err(io_err)
    }

    /// Writes `path` (CSV) and the JSON sidecar next to it.
    pub fn write(&self, path: &Path) -> Result<(), AnalysisError> {
        self.validate()?;
        std::fs::write(path, self.to_csv_string()?).map_err(io_err)?;
        std::fs::write(sidecar_path(path), self.sidecar_json()? + "\n").map_err(io_err)
    }

    pub fn read(path: &Path) -> Result<Self, AnalysisError> {
        let side: Sidecar =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(path)).map_err(io_err)?).map_err(io_err)?;
        let mut r = csv::Reader::from_path(path).map_err(io_err)?;
        let mut map = StrainMap::new(side.geometry);
        map.metadata = side.metadata;
        let mut count = 0;
        for (i, row) in r.deserialize::<Row>().enumerate() {
            let row = row.map_err(io_err)?;
            if i >= map.len() {
                return Err(AnalysisError::LengthMismatch("more rows than grid cells".into()));
            }
            map.mz[i] = row.mz;
            map.strain[i] = row.strain;
            map.sigma[i] = row.sigma;
            map.amplitude[i] = row.amplitude;
            map.masked[i] = row.mask != 0;
            count += 1;
        }
        if count != map.len() {
            return Err(AnalysisError::LengthMismatch(format!("{count} rows for {} cells", map.len())));
        }
        Ok(map)
    }

    /// 16-bit grayscale image of one depth slice of `strain`, scaled min→max.
    pub fn write_png(&self, path: &Path, iz: usize) -> Result<(), AnalysisError> {
        let [nx, ny, nz] = self.geometry.dims;
        if iz >= nz {
            return Err(AnalysisError::InvalidInput(format!("slice {iz} out of {nz}")));
        }
        let idx: Vec<usize> = (0..ny)
            .flat_map(|iy| (0..nx).map(move |ix| (ix, iy)))
            .map(|(ix, iy)| self.geometry.index(ix, iy, iz))
            .collect();
        let vals: Vec<f64> = idx.iter().filter(|&&i| !self.masked[i]).map(|&i| self.strain[i]).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = if hi > lo { hi - lo } else { 1.0 };
        let mut data = Vec::with_capacity(2 * idx.len());
        for &i in &idx {
            let v = if self.masked[i] { 0 } else { (((self.strain[i] - lo) / range) * 65535.0).round() as u16 };
            data.extend_from_slice(&v.to_be_bytes());
        }
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), nx as u32, ny as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc.write_header().map_err(io_err)?;
        w.write_image_data(&data).map_err(io_err)
    }
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    x: f64,
    y: f64,
    sigma: f64,
}

/// Writes a trace as CSV (x, y, sigma) with a JSON sidecar.
pub fn write_trace(trace: &Trace, path: &Path, metadata: &MapMetadata) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    for i in 0..trace.len() {
        w.serialize(TraceRow { x: trace.x[i], y: trace.y[i], sigma: trace.sigma[i] }).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(metadata).map_err(io_err)? + "\n").map_err(io_err)
}

/// Reads a trace CSV; a single-column file is read as `y` with unit spacing.
pub fn read_trace(path: &Path) -> Result<Trace, AnalysisError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(io_err)?;
    let headers = r.headers().map_err(io_err)?.clone();
    let (mut x, mut y, mut s) = (Vec::new(), Vec::new(), Vec::new());
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (cx, cy, cs) = (col("x"), col("y").or(if headers.len() == 1 { Some(0) } else { None }), col("sigma"));
    let cy = cy.ok_or_else(|| AnalysisError::Io("trace needs a 'y' column".into()))?;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(io_err)?;
        let get = |c: usize| -> Result<f64, AnalysisError> {
            rec.get(c).ok_or_else(|| io_err("short row"))?.trim().parse::<f64>().map_err(io_err)
        };
        x.push(match cx {
            Some(c) => get(c)?,
            None => i as f64,
        });
        y.push(get(cy)?);
        s.push(match cs {
            Some(c) => get(c)?,
            None => 0.0,
        });
    }
    Trace::new(x, y, s)
}
