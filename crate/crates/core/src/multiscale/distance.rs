use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{lambda_correction, GridPoint, LocationScaleGrid};
use crate::error::{Error, Result, WindowFailure, WindowFailureKind};
use crate::kernel::{kernel_constants, KernelConstants, KernelProfile, SortedSeries, DENSITY_FLOOR};
use crate::panel::TransformedPanel;

/// Which error-variance estimator enters `ν̂_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    #[default]
    Homoskedastic,
    Conditional,
}

impl VarianceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VarianceMode::Homoskedastic => "homoskedastic",
            VarianceMode::Conditional => "conditional",
        }
    }
}

/// What to do with grid points where some series has too little local data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPolicy {
    /// Fail, listing every degenerate `(i, x, h)`.
    #[default]
    Strict,
    /// Drop every grid point that is degenerate for any series, for all pairs.
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceOptions {
    pub variance_mode: VarianceMode,
    pub policy: WindowPolicy,
    pub parallel: bool,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        Self {
            variance_mode: VarianceMode::Homoskedastic,
            policy: WindowPolicy::Strict,
            parallel: true,
        }
    }
}

/// Provenance attached to a distance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMeta {
    pub fingerprint: String,
    pub kernel: String,
    pub variance_mode: VarianceMode,
    pub h_min: f64,
    pub h_max: f64,
    pub grid_points: usize,
    pub dropped_points: usize,
    pub grid: Vec<GridPoint>,
}

/// Symmetric matrix of multiscale distances with diagonal `−λ(2 h_max)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
    floor: f64,
    meta: Option<DistanceMeta>,
}

impl DistanceMatrix {
    /// Wraps a row-major `n × n` matrix. The diagonal must equal `floor` and
    /// the matrix must be symmetric.
    pub fn from_values(n: usize, values: Vec<f64>, floor: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::TooFewSeries { n });
        }
        if values.len() != n * n {
            return Err(Error::InvalidMatrix(format!(
                "expected {} entries, got {}",
                n * n,
                values.len()
            )));
        }
        for i in 0..n {
            if values[i * n + i].to_bits() != floor.to_bits() {
                return Err(Error::InvalidMatrix(format!(
                    "diagonal entry {i} is {} instead of {floor}",
                    values[i * n + i]
                )));
            }
            for j in 0..i {
                if values[i * n + j].to_bits() != values[j * n + i].to_bits() {
                    return Err(Error::InvalidMatrix(format!("not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self {
            n,
            values,
            floor,
            meta: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Diagonal value `−λ(2 h_max)`.
    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn meta(&self) -> Option<&DistanceMeta> {
        self.meta.as_ref()
    }

    pub fn with_meta(mut self, meta: Option<DistanceMeta>) -> Self {
        self.meta = meta;
        self
    }

    /// Upper-triangle entries `(i, j, d_ij)` with `i < j`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| ((i + 1)..self.n).map(move |j| (i, j, self.get(i, j))))
    }
}

/// Per-point constants shared by all series.
struct PointConstants {
    kc: Vec<KernelConstants>,
    lambda: Vec<f64>,
}

impl PointConstants {
    fn new(grid: &LocationScaleGrid, kern: &KernelProfile) -> Result<Self> {
        let kc = grid
            .points()
            .iter()
            .map(|p| kernel_constants(kern, p.x, p.h))
            .collect::<Result<Vec<_>>>()?;
        let lambda = grid
            .points()
            .iter()
            .map(|p| lambda_correction(p.h))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kc, lambda })
    }
}

/// Local fit and variance-to-density ratio `σ̂²/f̂` of one series at every
/// grid point. Failed points carry NaN and are listed in `failures`.
struct SeriesProfile {
    fit: Vec<f64>,
    scale: Vec<f64>,
    failures: Vec<(usize, WindowFailure)>,
}

/// Fitted values at every sample point for one bandwidth; `None` where the fit
/// is degenerate.
fn sample_fits(s: &SortedSeries, kern: &KernelProfile, h: f64) -> Vec<Result<f64, WindowFailure>> {
    s.x().iter().map(|&xt| s.fit(kern, xt, h)).collect()
}

fn at_sample_failure(x: f64, h: f64, at: f64, f: &WindowFailure) -> WindowFailure {
    let distinct = match f.kind {
        WindowFailureKind::TooFewPoints { distinct } => distinct,
        _ => 0,
    };
    WindowFailure::new(x, h, WindowFailureKind::FitAtSample { at, distinct })
}

/// Evaluates `(m̂(x), σ̂²/f̂)` for every point of one bandwidth level.
#[allow(clippy::too_many_arguments)]
fn level_stats(
    s: &SortedSeries,
    kern: &KernelProfile,
    h: f64,
    xs: &[f64],
    kcs: &[KernelConstants],
    mode: VarianceMode,
) -> Vec<Result<(f64, f64), WindowFailure>> {
    let fits = sample_fits(s, kern, h);
    let first_bad = fits.iter().enumerate().find_map(|(k, r)| r.as_ref().err().map(|f| (k, f.clone())));
    let fitted: Vec<f64> = fits.iter().map(|r| *r.as_ref().unwrap_or(&f64::NAN)).collect();
    let homo = match (&first_bad, mode) {
        (None, VarianceMode::Homoskedastic) => Some(s.homoskedastic_variance(&fitted)),
        _ => None,
    };

    xs.iter()
        .zip(kcs)
        .map(|(&x, kc)| {
            let m = s.fit(kern, x, h)?;
            let f = s.density(kern, x, h, kc.kappa[0]);
            if f <= DENSITY_FLOOR {
                return Err(WindowFailure::new(x, h, WindowFailureKind::DensityFloor { density: f }));
            }
            let var = match mode {
                VarianceMode::Homoskedastic => match (&homo, &first_bad) {
                    (Some(v), _) => *v,
                    (None, Some((k, fail))) => return Err(at_sample_failure(x, h, s.x()[*k], fail)),
                    (None, None) => unreachable!(),
                },
                VarianceMode::Conditional => {
                    let window = s.window(x, h);
                    let bad = window.clone().find(|&k| {
                        fits[k].is_err() && kern.eval((s.x()[k] - x) / h) > 0.0
                    });
                    if let Some(k) = bad {
                        let fail = fits[k].as_ref().unwrap_err();
                        return Err(at_sample_failure(x, h, s.x()[k], fail));
                    }
                    s.conditional_variance(kern, &fitted, x, h)?
                }
            };
            Ok((m, var / f))
        })
        .collect()
}

fn series_profile(
    ystar: &[f64],
    x_row: &[f64],
    grid: &LocationScaleGrid,
    consts: &PointConstants,
    kern: &KernelProfile,
    mode: VarianceMode,
) -> SeriesProfile {
    let s = SortedSeries::new(x_row, ystar);
    let p = grid.len();
    let mut out = SeriesProfile {
        fit: vec![f64::NAN; p],
        scale: vec![f64::NAN; p],
        failures: Vec::new(),
    };
    for level in grid.levels() {
        let xs: Vec<f64> = grid.points()[level.range.clone()].iter().map(|g| g.x).collect();
        let stats = level_stats(&s, kern, level.h, &xs, &consts.kc[level.range.clone()], mode);
        for (offset, r) in stats.into_iter().enumerate() {
            let k = level.range.start + offset;
            match r {
                Ok((m, v)) => {
                    out.fit[k] = m;
                    out.scale[k] = v;
                }
                Err(f) => out.failures.push((k, f)),
            }
        }
    }
    out
}

/// `√(Th)(m̂_i − m̂_j)/√ν̂` with `ν̂ = (σ̂²_i/f̂_i + σ̂²_j/f̂_j) s(x,h)`.
/// Identical fits give exactly zero; `None` flags a zero normalization with
/// differing fits.
#[inline]
fn psi_value(t_len: usize, h: f64, s: f64, mi: f64, vi: f64, mj: f64, vj: f64) -> Option<f64> {
    let diff = mi - mj;
    if diff == 0.0 {
        return Some(0.0);
    }
    let nu = (vi + vj) * s;
    if !(nu > 0.0) {
        return None;
    }
    Some((t_len as f64 * h).sqrt() * diff / nu.sqrt())
}

fn check_pair(tp: &TransformedPanel, i: usize, j: usize) -> Result<()> {
    let n = tp.n();
    if i >= n || j >= n {
        return Err(Error::Format(format!("series index out of range for n = {n}")));
    }
    Ok(())
}

/// Pairwise statistic `ψ̂_ij(x, h)`, computed from scratch.
pub fn psi_statistic(
    tp: &TransformedPanel,
    i: usize,
    j: usize,
    x: f64,
    h: f64,
    kern: &KernelProfile,
    variance_mode: VarianceMode,
) -> Result<f64> {
    check_pair(tp, i, j)?;
    let kc = kernel_constants(kern, x, h)?;
    let stats = |k: usize| {
        let s = SortedSeries::new(tp.x_row(k), tp.ystar_row(k));
        level_stats(&s, kern, h, &[x], &[kc], variance_mode)
            .pop()
            .unwrap()
            .map_err(|f| {
                let f = f.for_series(k);
                match f.kind {
                    WindowFailureKind::DensityFloor { .. } => Error::DegenerateDensity { failure: f },
                    _ => Error::InsufficientLocalData { failures: vec![f] },
                }
            })
    };
    let (mi, vi) = stats(i)?;
    let (mj, vj) = stats(j)?;
    psi_value(tp.t_len(), h, kc.s, mi, vi, mj, vj).ok_or(Error::ZeroVariance { i, j, x, h })
}

/// Usable point indices and the degenerate ones, per the window policy.
fn usable_points(
    profiles: &[(usize, &SeriesProfile)],
    p: usize,
    policy: WindowPolicy,
) -> Result<Vec<usize>> {
    let mut ok = vec![true; p];
    let mut failures = Vec::new();
    for (i, prof) in profiles {
        for (k, f) in &prof.failures {
            ok[*k] = false;
            failures.push(f.clone().for_series(*i));
        }
    }
    if !failures.is_empty() && policy == WindowPolicy::Strict {
        return Err(Error::InsufficientLocalData { failures });
    }
    let usable: Vec<usize> = (0..p).filter(|&k| ok[k]).collect();
    if usable.is_empty() {
        return Err(Error::AllPointsDegenerate);
    }
    Ok(usable)
}

fn pair_distance(
    t_len: usize,
    grid: &LocationScaleGrid,
    consts: &PointConstants,
    usable: &[usize],
    (i, a): (usize, &SeriesProfile),
    (j, b): (usize, &SeriesProfile),
) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for &k in usable {
        let g = grid.points()[k];
        let psi = psi_value(t_len, g.h, consts.kc[k].s, a.fit[k], a.scale[k], b.fit[k], b.scale[k])
            .ok_or(Error::ZeroVariance { i, j, x: g.x, h: g.h })?;
        let v = psi.abs() - consts.lambda[k];
        if v > best {
            best = v;
        }
    }
    Ok(best)
}

/// `d̂_ij = max over the grid of |ψ̂_ij(x,h)| − λ(2h)`.
pub fn multiscale_distance(
    tp: &TransformedPanel,
    i: usize,
    j: usize,
    grid: &LocationScaleGrid,
    kern: &KernelProfile,
    options: &DistanceOptions,
) -> Result<f64> {
    check_pair(tp, i, j)?;
    let consts = PointConstants::new(grid, kern)?;
    let pi = series_profile(tp.ystar_row(i), tp.x_row(i), grid, &consts, kern, options.variance_mode);
    let pj = series_profile(tp.ystar_row(j), tp.x_row(j), grid, &consts, kern, options.variance_mode);
    let usable = usable_points(&[(i, &pi), (j, &pj)], grid.len(), options.policy)?;
    pair_distance(tp.t_len(), grid, &consts, &usable, (i, &pi), (j, &pj))
}

/// All pairwise multiscale distances. The result does not depend on
/// `options.parallel`: every cell is computed by the same code from the same
/// inputs.
pub fn distance_matrix(
    tp: &TransformedPanel,
    grid: &LocationScaleGrid,
    kern: &KernelProfile,
    options: &DistanceOptions,
) -> Result<DistanceMatrix> {
    let n = tp.n();
    if n < 2 {
        return Err(Error::TooFewSeries { n });
    }
    let consts = PointConstants::new(grid, kern)?;
    let mode = options.variance_mode;
    let profile = |i: usize| series_profile(tp.ystar_row(i), tp.x_row(i), grid, &consts, kern, mode);
    let profiles: Vec<SeriesProfile> = if options.parallel {
        (0..n).into_par_iter().map(profile).collect()
    } else {
        (0..n).map(profile).collect()
    };

    let indexed: Vec<(usize, &SeriesProfile)> = profiles.iter().enumerate().collect();
    let usable = usable_points(&indexed, grid.len(), options.policy)?;
    let h_max = usable.iter().map(|&k| grid.points()[k].h).fold(f64::MIN, f64::max);
    let h_min = usable.iter().map(|&k| grid.points()[k].h).fold(f64::MAX, f64::min);
    let floor = -lambda_correction(h_max)?;

    let t_len = tp.t_len();
    let row = |i: usize| -> Result<Vec<f64>> {
        ((i + 1)..n)
            .map(|j| pair_distance(t_len, grid, &consts, &usable, (i, &profiles[i]), (j, &profiles[j])))
            .collect()
    };
    let rows: Vec<Vec<f64>> = if options.parallel {
        (0..n).into_par_iter().map(row).collect::<Result<_>>()?
    } else {
        (0..n).map(row).collect::<Result<_>>()?
    };

    let mut values = vec![floor; n * n];
    for (i, r) in rows.iter().enumerate() {
        for (offset, &d) in r.iter().enumerate() {
            let j = i + 1 + offset;
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }

    let used_grid = if usable.len() == grid.len() {
        grid.clone()
    } else {
        let mut keep = vec![false; grid.len()];
        usable.iter().for_each(|&k| keep[k] = true);
        grid.subset(&keep)?
    };
    let meta = DistanceMeta {
        fingerprint: used_grid.fingerprint(kern, &[mode.as_str()]),
        kernel: kern.name().to_string(),
        variance_mode: mode,
        h_min,
        h_max,
        grid_points: usable.len(),
        dropped_points: grid.len() - usable.len(),
        grid: used_grid.points().to_vec(),
    };
    Ok(DistanceMatrix {
        n,
        values,
        floor,
        meta: Some(meta),
    })
}
