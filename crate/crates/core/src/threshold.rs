//! Gaussian calibration of the dendrogram threshold.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{effective_support, kernel_constants, KernelConstants, KernelProfile};
use crate::multiscale::{lambda_correction, LocationScaleGrid};
use crate::quadrature;

/// Allowed deviation of a diagonal entry from one half before repair.
pub const DIAGONAL_TOL: f64 = 1e-8;
/// Absolute quadrature tolerance on each normalized covariance entry.
pub const COVARIANCE_TOL: f64 = 1e-8;
/// Added to every eigenvalue after clipping at zero.
pub const EIGEN_JITTER: f64 = 1e-10;
/// Overlap width (in x units) below which two kernel supports count as disjoint.
const SUPPORT_SLIVER: f64 = 1e-12;
pub const DEFAULT_ALPHA: f64 = 0.95;
pub const DEFAULT_REPS: usize = 1000;

/// Summary of the positive-semidefinite repair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepairInfo {
    pub min_eigenvalue: f64,
    pub clipped: usize,
    pub max_diagonal_deviation: f64,
}

/// Covariance of the stacked Gaussian statistics over one grid, with its
/// Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianDesign {
    grid: LocationScaleGrid,
    sigma: DMatrix<f64>,
    lambda: Vec<f64>,
    factor_t: DMatrix<f64>,
    repair: RepairInfo,
}

impl GaussianDesign {
    /// Repairs and factors a symmetric covariance matrix for `grid`.
    pub fn from_sigma(grid: LocationScaleGrid, sigma: DMatrix<f64>) -> Result<Self> {
        let p = grid.len();
        if sigma.nrows() != p || sigma.ncols() != p {
            return Err(Error::InvalidMatrix(format!(
                "covariance is {}×{}, grid has {p} points",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let max_diagonal_deviation = (0..p).map(|k| (sigma[(k, k)] - 0.5).abs()).fold(0.0, f64::max);
        if max_diagonal_deviation > DIAGONAL_TOL {
            return Err(Error::QuadratureFailure(format!(
                "covariance diagonal deviates from 0.5 by {max_diagonal_deviation:.3e}"
            )));
        }
        let eig = SymmetricEigen::new(sigma.clone());
        let min_eigenvalue = eig.eigenvalues.min();
        let clipped = eig.eigenvalues.iter().filter(|&&v| v < 0.0).count();
        let vals = eig.eigenvalues.map(|v| v.max(0.0) + EIGEN_JITTER);
        let v = &eig.eigenvectors;
        let repaired = v * DMatrix::from_diagonal(&vals) * v.transpose();
        let repaired = (&repaired + repaired.transpose()) * 0.5;
        let chol = repaired.cholesky().ok_or_else(|| {
            Error::FactorizationFailure(format!("Cholesky failed on {p}×{p} repaired covariance"))
        })?;
        let factor_t = chol.l().transpose();
        let lambda = grid
            .points()
            .iter()
            .map(|g| lambda_correction(g.h))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid,
            sigma,
            lambda,
            factor_t,
            repair: RepairInfo {
                min_eigenvalue,
                clipped,
                max_diagonal_deviation,
            },
        })
    }

    /// Reassembles a design from a cached covariance and upper factor `Lᵀ`.
    pub fn from_parts(
        grid: LocationScaleGrid,
        sigma: DMatrix<f64>,
        factor_t: DMatrix<f64>,
        repair: RepairInfo,
    ) -> Result<Self> {
        let p = grid.len();
        for (name, m) in [("covariance", &sigma), ("factor", &factor_t)] {
            if m.nrows() != p || m.ncols() != p {
                return Err(Error::InvalidMatrix(format!("{name} does not match a grid of {p} points")));
            }
        }
        let lambda = grid
            .points()
            .iter()
            .map(|g| lambda_correction(g.h))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid,
            sigma,
            lambda,
            factor_t,
            repair,
        })
    }

    pub fn grid(&self) -> &LocationScaleGrid {
        &self.grid
    }

    /// Symmetrized covariance before the eigenvalue repair.
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// `λ(2h)` at every grid point.
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// Transposed lower Cholesky factor of the repaired covariance.
    pub fn factor_t(&self) -> &DMatrix<f64> {
        &self.factor_t
    }

    pub fn repair(&self) -> RepairInfo {
        self.repair
    }
}

/// Unsymmetrized covariance between the statistics at `(x, h)` and `(x′, h′)`,
/// evaluated as written with the change of variables `v = (hu + x − x′)/h′`.
pub fn covariance_entry(
    kern: &KernelProfile,
    (x, h, c): (f64, f64, &KernelConstants),
    (xp, hp, cp): (f64, f64, &KernelConstants),
) -> Result<f64> {
    let (lo, hi) = effective_support(x, h);
    let (lo_p, hi_p) = effective_support(xp, hp);
    let a = lo.max((xp - x + hp * lo_p) / h);
    let b = hi.min((xp - x + hp * hi_p) / h);
    // Supports that only touch overlap in a rounding-sized sliver.
    if (b - a) * h <= SUPPORT_SLIVER {
        return Ok(0.0);
    }
    let norm = (h / hp).sqrt() / (2.0 * (c.rho * cp.rho).sqrt());
    let (k1, k2) = (c.kappa[1], c.kappa[2]);
    let (k1p, k2p) = (cp.kappa[1], cp.kappa[2]);
    let integrand = |u: f64| {
        let v = (h * u + x - xp) / hp;
        kern.eval(u) * (k2 - k1 * u) * kern.eval(v) * (k2p - k1p * v)
    };
    let integral = if kern.is_epanechnikov() {
        // Degree-six polynomial on [a, b].
        quadrature::gauss_legendre4(integrand, a, b)
    } else {
        quadrature::integrate(integrand, a, b, COVARIANCE_TOL / norm)?
    };
    Ok(norm * integral)
}

/// Builds and factors the covariance of the Gaussian approximation over `grid`.
pub fn build_covariance(grid: &LocationScaleGrid, kern: &KernelProfile) -> Result<GaussianDesign> {
    let pts = grid.points();
    let p = pts.len();
    let consts = pts
        .iter()
        .map(|g| kernel_constants(kern, g.x, g.h))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|r| {
            (0..p)
                .map(|q| {
                    covariance_entry(
                        kern,
                        (pts[r].x, pts[r].h, &consts[r]),
                        (pts[q].x, pts[q].h, &consts[q]),
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let raw = DMatrix::from_fn(p, p, |r, q| rows[r][q]);
    let sigma = (&raw + raw.transpose()) * 0.5;
    GaussianDesign::from_sigma(grid.clone(), sigma)
}

fn check_sampling(n: usize, reps: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::TooFewSeries { n });
    }
    if reps == 0 {
        return Err(Error::BadReps);
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::BadLevel { alpha })
    }
}

/// One draw of `B_n = max_{i,j} max_p (|ζ_ip − ζ_jp| − λ_p)` from stream `rep`.
fn draw_bn(design: &GaussianDesign, n: usize, seed: u64, rep: u64) -> f64 {
    let p = design.grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    let mut z = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        for k in 0..p {
            z[(i, k)] = StandardNormal.sample(&mut rng);
        }
    }
    let zeta = z * &design.factor_t;
    let mut best = f64::NEG_INFINITY;
    for (k, col) in zeta.column_iter().enumerate() {
        let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        best = best.max(hi - lo - design.lambda[k]);
    }
    best
}

/// `reps` independent draws of `B_n`, in replication order. Replication `r`
/// uses stream `r` of a ChaCha8 generator seeded with `seed`.
pub fn sample_bn(design: &GaussianDesign, n: usize, reps: usize, seed: u64) -> Result<Vec<f64>> {
    check_sampling(n, reps)?;
    Ok((0..reps as u64)
        .into_par_iter()
        .map(|r| draw_bn(design, n, seed, r))
        .collect())
}

/// Order statistic `⌈α · len⌉` of `samples`.
pub fn empirical_quantile(samples: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if samples.is_empty() {
        return Err(Error::BadReps);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    // Guard against α·m landing a rounding error above an integer.
    let rank = ((alpha * m as f64) - 1e-9).ceil().clamp(1.0, m as f64) as usize;
    Ok(sorted[rank - 1])
}

/// Monte-Carlo `α`-quantile `q_n(α)` of `B_n`.
pub fn quantile_qn(design: &GaussianDesign, n: usize, alpha: f64, reps: usize, seed: u64) -> Result<f64> {
    check_alpha(alpha)?;
    empirical_quantile(&sample_bn(design, n, reps, seed)?, alpha)
}
