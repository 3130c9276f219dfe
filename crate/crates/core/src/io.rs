//! File formats: panel CSV, partition CSV, distance CSV with JSON sidecar,
//! dendrogram JSON, study CSV and the binary covariance cache.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cluster::{Dendrogram, Partition};
use crate::error::{Error, Result};
use crate::multiscale::{DistanceMatrix, DistanceMeta, LocationScaleGrid};
use crate::panel::{validate_panel, PanelData, RawRecord};
use crate::simulate::StudyReport;
use crate::threshold::{GaussianDesign, RepairInfo};

/// Reads a `series_id,t,x,y` CSV (header required).
pub fn read_panel<R: Read>(reader: R) -> Result<PanelData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in ["series_id", "t", "x", "y"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Format(format!("missing column {col:?} in CSV header")));
        }
    }
    let records = rdr
        .deserialize::<RawRecord>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    validate_panel(&records)
}

pub fn read_panel_csv(path: &Path) -> Result<PanelData> {
    read_panel(BufReader::new(File::open(path).map_err(|e| io_err(path, e))?))
}

/// Writes a panel in long format.
pub fn write_panel_csv(path: &Path, panel: &PanelData) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, id) in panel.series_ids().iter().enumerate() {
        for (k, &t) in panel.times().iter().enumerate() {
            w.serialize(RawRecord {
                series_id: id.clone(),
                t,
                x: panel.x_row(i)[k],
                y: panel.y_row(i)[k],
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

/// `series_id,cluster` with 1-based cluster numbers in canonical order.
pub fn write_partition_csv(path: &Path, series_ids: &[String], partition: &Partition) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series_id", "cluster"])?;
    for (i, label) in partition.labels().into_iter().enumerate() {
        w.write_record([series_ids[i].as_str(), &(label + 1).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Metadata written next to a distance CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSidecar {
    pub n: usize,
    pub series_ids: Vec<String>,
    pub floor: f64,
    #[serde(flatten)]
    pub meta: Option<DistanceMeta>,
}

/// Path of the sidecar for a distance CSV: `distances.csv` → `distances.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// `i,j,d` rows for `i < j` (0-based indices) plus the JSON sidecar.
pub fn write_distances(csv_path: &Path, dm: &DistanceMatrix, series_ids: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(["i", "j", "d"])?;
    for (i, j, d) in dm.pairs() {
        w.write_record([i.to_string(), j.to_string(), format!("{d:?}")])?;
    }
    w.flush()?;
    let sidecar = DistanceSidecar {
        n: dm.n(),
        series_ids: series_ids.to_vec(),
        floor: dm.floor(),
        meta: dm.meta().cloned(),
    };
    write_json(&sidecar_path(csv_path), &sidecar)
}

/// Reads a distance CSV and its sidecar back into a matrix.
pub fn read_distances(csv_path: &Path) -> Result<(DistanceMatrix, Vec<String>)> {
    let sidecar: DistanceSidecar = read_json(&sidecar_path(csv_path))?;
    let n = sidecar.n;
    let mut values = vec![sidecar.floor; n * n];
    let mut seen = vec![false; n * n];
    let mut rdr = csv::Reader::from_path(csv_path)?;
    for row in rdr.deserialize::<(usize, usize, f64)>() {
        let (i, j, d) = row?;
        if i >= j || j >= n {
            return Err(Error::Format(format!("bad pair ({i}, {j}) for n = {n}")));
        }
        values[i * n + j] = d;
        values[j * n + i] = d;
        seen[i * n + j] = true;
    }
    let missing = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).find(|&(i, j)| !seen[i * n + j]);
    if let Some((i, j)) = missing {
        return Err(Error::Format(format!("distance for pair ({i}, {j}) missing")));
    }
    let dm = DistanceMatrix::from_values(n, values, sidecar.floor)?.with_meta(sidecar.meta);
    Ok((dm, sidecar.series_ids))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    Ok(serde_json::from_reader(r)?)
}

pub fn write_dendrogram(path: &Path, dend: &Dendrogram) -> Result<()> {
    write_json(path, dend)
}

/// Reads and structurally validates a dendrogram JSON file.
pub fn read_dendrogram(path: &Path) -> Result<Dendrogram> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let dend: Dendrogram =
        serde_json::from_str(&text).map_err(|e| Error::MalformedDendrogram(e.to_string()))?;
    dend.validate()?;
    Ok(dend)
}

/// One row per method and replication.
pub fn write_study_csv(path: &Path, report: &StudyReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "rep", "k_hat", "errors_F", "threshold", "error"])?;
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in &report.methods {
        for r in &m.records {
            w.write_record([
                m.name.clone(),
                r.rep.to_string(),
                opt(r.k_hat),
                opt(r.errors_f),
                format!("{:?}", r.threshold),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

const CACHE_MAGIC: &[u8; 8] = b"MSCOV\x00\x01\x00";

/// Cache file for a covariance keyed by its grid/kernel fingerprint.
pub fn covariance_cache_path(dir: &Path, fingerprint: &str) -> PathBuf {
    dir.join(format!("{fingerprint}.cov"))
}

/// Binary layout, little endian: magic, fingerprint length (u32) and bytes,
/// `p` (u64), min eigenvalue, clipped count (u64), max diagonal deviation,
/// then `σ` and `Lᵀ` as `p²` column-major `f64` each.
pub fn write_covariance_cache(path: &Path, fingerprint: &str, design: &GaussianDesign) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let tmp = path.with_extension("cov.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(|e| io_err(&tmp, e))?);
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(fingerprint.len() as u32).to_le_bytes())?;
        w.write_all(fingerprint.as_bytes())?;
        w.write_all(&(design.grid().len() as u64).to_le_bytes())?;
        let rep = design.repair();
        w.write_all(&rep.min_eigenvalue.to_le_bytes())?;
        w.write_all(&(rep.clipped as u64).to_le_bytes())?;
        w.write_all(&rep.max_diagonal_deviation.to_le_bytes())?;
        for m in [design.sigma(), design.factor_t()] {
            for v in m.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, k: usize) -> Result<&[u8]> {
        if self.0.len() < k {
            return Err(Error::Format("truncated covariance cache".into()));
        }
        let (head, tail) = self.0.split_at(k);
        self.0 = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a cached design for `grid`. Returns `Ok(None)` when the file is
/// absent, and an error when it exists but does not match.
pub fn read_covariance_cache(
    path: &Path,
    fingerprint: &str,
    grid: &LocationScaleGrid,
) -> Result<Option<GaussianDesign>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut c = Cursor(&bytes);
    if c.take(8)? != CACHE_MAGIC {
        return Err(Error::Format(format!("{} is not a covariance cache", path.display())));
    }
    let len = u32::from_le_bytes(c.take(4)?.try_into().unwrap()) as usize;
    if c.take(len)? != fingerprint.as_bytes() {
        return Err(Error::Format(format!("{} was written for another grid", path.display())));
    }
    let p = c.u64()? as usize;
    if p != grid.len() {
        return Err(Error::Format(format!("cache has {p} points, grid {}", grid.len())));
    }
    let repair = RepairInfo {
        min_eigenvalue: c.f64()?,
        clipped: c.u64()? as usize,
        max_diagonal_deviation: c.f64()?,
    };
    let mut read_matrix = || -> Result<DMatrix<f64>> {
        let vals = (0..p * p).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_vec(p, p, vals))
    };
    let sigma = read_matrix()?;
    let factor_t = read_matrix()?;
    if !c.0.is_empty() {
        return Err(Error::Format("trailing bytes in covariance cache".into()));
    }
    Ok(Some(GaussianDesign::from_parts(grid.clone(), sigma, factor_t, repair)?))
}
