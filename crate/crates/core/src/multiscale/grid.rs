use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernel::{check_bandwidth, check_location, KernelProfile};

/// One `(x, h)` location-scale point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub h: f64,
}

/// The points sharing one bandwidth, as a contiguous index range.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthLevel {
    pub h: f64,
    pub range: Range<usize>,
}

/// Finite location-scale grid, ordered by bandwidth and then location.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationScaleGrid {
    points: Vec<GridPoint>,
    levels: Vec<BandwidthLevel>,
}

impl LocationScaleGrid {
    pub fn from_points(mut points: Vec<GridPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyGrid);
        }
        for p in &points {
            check_bandwidth(p.h)?;
            check_location(p.x)?;
        }
        points.sort_by(|a, b| a.h.total_cmp(&b.h).then(a.x.total_cmp(&b.x)));
        points.dedup();

        let mut levels: Vec<BandwidthLevel> = Vec::new();
        for (k, p) in points.iter().enumerate() {
            match levels.last_mut() {
                Some(level) if level.h == p.h => level.range.end = k + 1,
                _ => levels.push(BandwidthLevel {
                    h: p.h,
                    range: k..k + 1,
                }),
            }
        }
        Ok(Self { points, levels })
    }

    pub fn points(&self) -> &[GridPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn levels(&self) -> &[BandwidthLevel] {
        &self.levels
    }

    pub fn h_min(&self) -> f64 {
        self.levels[0].h
    }

    pub fn h_max(&self) -> f64 {
        self.levels[self.levels.len() - 1].h
    }

    pub fn bandwidths(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.h).collect()
    }

    /// Distinct locations across all levels, ascending.
    pub fn locations(&self) -> Vec<f64> {
        let mut xs: Vec<f64> = self.points.iter().map(|p| p.x).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        xs
    }

    /// The same locations paired with the single bandwidth `h`.
    pub fn with_single_bandwidth(&self, h: f64) -> Result<Self> {
        make_grid(&self.locations(), &[h])
    }

    /// Keeps the points whose mask entry is `true`.
    pub fn subset(&self, keep: &[bool]) -> Result<Self> {
        Self::from_points(
            self.points
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(p, _)| *p)
                .collect(),
        )
    }

    /// Stable hex digest of the grid, the kernel name and any extra tags.
    pub fn fingerprint(&self, kern: &KernelProfile, extra: &[&str]) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"mscluster-grid-v1\n");
        hasher.update(kern.name().as_bytes());
        for tag in extra {
            hasher.update(b"\n");
            hasher.update(tag.as_bytes());
        }
        for p in &self.points {
            hasher.update(p.x.to_bits().to_le_bytes());
            hasher.update(p.h.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Cartesian product of locations and bandwidths.
pub fn make_grid(locations: &[f64], bandwidths: &[f64]) -> Result<LocationScaleGrid> {
    if locations.is_empty() || bandwidths.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let points = bandwidths
        .iter()
        .flat_map(|&h| locations.iter().map(move |&x| GridPoint { x, h }))
        .collect();
    LocationScaleGrid::from_points(points)
}

/// Wavelet-style grid `{(r 2^-v, 2^-v) : 1 ≤ r ≤ 2^v − 1, h_min ≤ 2^-v ≤ h_max}`.
pub fn dyadic_grid(h_min: f64, h_max: f64) -> Result<LocationScaleGrid> {
    check_bandwidth(h_min)?;
    check_bandwidth(h_max)?;
    if h_min > h_max {
        return Err(Error::EmptyGrid);
    }
    let mut points = Vec::new();
    for v in 1..=52 {
        let h = 0.5f64.powi(v);
        if h < h_min {
            break;
        }
        if h <= h_max {
            points.extend((1..(1u64 << v)).map(|r| GridPoint { x: r as f64 * h, h }));
        }
    }
    LocationScaleGrid::from_points(points)
}

/// Additive scale correction `λ(2h) = √(2 log(1/(2h)))`.
pub fn lambda_correction(h: f64) -> Result<f64> {
    if !(h > 0.0 && 2.0 * h <= 1.0) {
        return Err(Error::BadBandwidth { h });
    }
    Ok((2.0 * (1.0 / (2.0 * h)).ln()).sqrt())
}

fn snap(v: f64) -> f64 {
    (v * 1e12).round() / 1e12
}

/// Multiples `k · step` inside `[lo, hi]`.
fn multiples(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(lo <= hi) {
        return Err(Error::EmptyGrid);
    }
    let first = (lo / step - 1e-9).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    Ok((first..=last).map(|k| snap(k as f64 * step)).collect())
}

/// Declarative grid description, as found in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridSpec {
    Explicit {
        locations: Vec<f64>,
        bandwidths: Vec<f64>,
    },
    Regular {
        x_min: f64,
        x_max: f64,
        x_step: f64,
        h_min: f64,
        h_max: f64,
        h_step: f64,
    },
    Dyadic {
        h_min: f64,
        h_max: f64,
    },
    /// Bandwidth window chosen from the series length: `T·h_min ≈ 10` and
    /// `h_max ≈ 1/4`, both snapped to multiples of `h_step`.
    Auto {
        x_min: f64,
        x_max: f64,
        x_step: f64,
        h_step: f64,
    },
}

impl Default for GridSpec {
    /// Locations `r/100, r = 5..95`; bandwidths `0.025 k, k = 1..10`.
    fn default() -> Self {
        GridSpec::Regular {
            x_min: 0.05,
            x_max: 0.95,
            x_step: 0.01,
            h_min: 0.025,
            h_max: 0.25,
            h_step: 0.025,
        }
    }
}

impl GridSpec {
    /// Resolves to a concrete grid. `t_len` is required by [`GridSpec::Auto`].
    pub fn resolve(&self, t_len: Option<usize>) -> Result<LocationScaleGrid> {
        match self {
            GridSpec::Explicit {
                locations,
                bandwidths,
            } => make_grid(locations, bandwidths),
            GridSpec::Regular {
                x_min,
                x_max,
                x_step,
                h_min,
                h_max,
                h_step,
            } => make_grid(
                &multiples(*x_min, *x_max, *x_step)?,
                &multiples(*h_min, *h_max, *h_step)?,
            ),
            GridSpec::Dyadic { h_min, h_max } => dyadic_grid(*h_min, *h_max),
            GridSpec::Auto {
                x_min,
                x_max,
                x_step,
                h_step,
            } => {
                let t = t_len.ok_or_else(|| {
                    Error::Format("automatic bandwidth window needs the series length".into())
                })?;
                let (h_min, h_max) = auto_window(t, *h_step)?;
                make_grid(
                    &multiples(*x_min, *x_max, *x_step)?,
                    &multiples(h_min, h_max, *h_step)?,
                )
            }
        }
    }
}

/// Default bandwidth window for series length `t`, snapped to `step`.
pub fn auto_window(t: usize, step: f64) -> Result<(f64, f64)> {
    if t == 0 || !(step > 0.0 && step <= 0.25) {
        return Err(Error::BadBandwidth { h: step });
    }
    let k_max = ((0.25 / step) + 1e-9).floor().max(1.0);
    let k_min = (10.0 / (t as f64 * step)).round().clamp(1.0, k_max);
    Ok((snap(k_min * step), snap(k_max * step)))
}
