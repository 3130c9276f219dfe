//! Kernel profiles, boundary-corrected kernel constants and the local-linear
//! building blocks of the pairwise statistics.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, WindowFailure, WindowFailureKind};
use crate::quadrature;

/// Density estimates at or below this value are treated as degenerate.
pub const DENSITY_FLOOR: f64 = 1e-6;

/// Absolute tolerance for kernel constants computed by adaptive quadrature.
pub const QUADRATURE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Family {
    Epanechnikov,
    Other,
}

/// A symmetric kernel supported on `[-1, 1]`.
#[derive(Clone)]
pub struct KernelProfile {
    name: String,
    family: Family,
    eval: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for KernelProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelProfile")
            .field("name", &self.name)
            .finish()
    }
}

impl PartialEq for KernelProfile {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
    }
}

impl KernelProfile {
    /// `K(u) = 0.75 (1 − u²)` on `[-1, 1]`.
    pub fn epanechnikov() -> Self {
        Self {
            name: "epanechnikov".into(),
            family: Family::Epanechnikov,
            eval: Arc::new(|u: f64| 0.75 * (1.0 - u * u)),
        }
    }

    /// `K(u) = 15/16 (1 − u²)²`.
    pub fn biweight() -> Self {
        Self::custom("biweight", |u| {
            let v = 1.0 - u * u;
            0.9375 * v * v
        })
    }

    /// `K(u) = 35/32 (1 − u²)³`.
    pub fn triweight() -> Self {
        Self::custom("triweight", |u| {
            let v = 1.0 - u * u;
            1.093_75 * v * v * v
        })
    }

    /// A user-supplied kernel. `f` is only ever called on `[-1, 1]`; it must be
    /// nonnegative, symmetric, Lipschitz and integrate to one. Constants for such
    /// kernels are computed by adaptive quadrature.
    pub fn custom<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            family: Family::Other,
            eval: Arc::new(f),
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "epanechnikov" => Ok(Self::epanechnikov()),
            "biweight" | "quartic" => Ok(Self::biweight()),
            "triweight" => Ok(Self::triweight()),
            other => Err(Error::Format(format!(
                "unknown kernel {other:?} (expected epanechnikov, biweight or triweight)"
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn support_radius(&self) -> f64 {
        1.0
    }

    pub(crate) fn is_epanechnikov(&self) -> bool {
        self.family == Family::Epanechnikov
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        if u.abs() > 1.0 {
            0.0
        } else {
            (self.eval)(u)
        }
    }
}

impl Default for KernelProfile {
    fn default() -> Self {
        Self::epanechnikov()
    }
}

/// Boundary-corrected kernel constants at one `(x, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConstants {
    /// `κ_ℓ(x,h) = ∫ u^ℓ K(u) du` over `[−x/h, (1−x)/h]`, for `ℓ = 0..=3`.
    pub kappa: [f64; 4],
    /// `ρ(x,h) = ∫ K²(u) [κ₂ − κ₁u]² du` over the same interval.
    pub rho: f64,
    /// `s(x,h) = ρ / (κ₀κ₂ − κ₁²)²`.
    pub s: f64,
}

pub(crate) fn check_location(x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::BadLocation { x })
    }
}

pub(crate) fn check_bandwidth(h: f64) -> Result<()> {
    if h > 0.0 && h <= 0.5 {
        Ok(())
    } else {
        Err(Error::BadBandwidth { h })
    }
}

/// Integration limits `[max(−1, −x/h), min(1, (1−x)/h)]`.
pub(crate) fn effective_support(x: f64, h: f64) -> (f64, f64) {
    ((-x / h).max(-1.0), ((1.0 - x) / h).min(1.0))
}

/// Product of two polynomials in ascending coefficient order.
fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_integral(c: &[f64], lo: f64, hi: f64) -> f64 {
    c.iter()
        .enumerate()
        .map(|(k, ck)| {
            let p = (k + 1) as i32;
            ck * (hi.powi(p) - lo.powi(p)) / p as f64
        })
        .sum()
}

pub fn kernel_constants(kern: &KernelProfile, x: f64, h: f64) -> Result<KernelConstants> {
    check_bandwidth(h)?;
    check_location(x)?;
    let (lo, hi) = effective_support(x, h);

    let (kappa, rho) = if kern.is_epanechnikov() {
        let mut kappa = [0.0; 4];
        for (l, k) in kappa.iter_mut().enumerate() {
            let mut c = vec![0.0; l + 3];
            c[l] = 0.75;
            c[l + 2] = -0.75;
            *k = poly_integral(&c, lo, hi);
        }
        // K²(u) = 0.5625 (1 − 2u² + u⁴)
        let k2 = [0.5625, 0.0, -1.125, 0.0, 0.5625];
        let lin2 = [kappa[2] * kappa[2], -2.0 * kappa[1] * kappa[2], kappa[1] * kappa[1]];
        (kappa, poly_integral(&poly_mul(&k2, &lin2), lo, hi))
    } else {
        let mut kappa = [0.0; 4];
        for (l, k) in kappa.iter_mut().enumerate() {
            *k = quadrature::integrate(
                |u| u.powi(l as i32) * kern.eval(u),
                lo,
                hi,
                QUADRATURE_TOL,
            )?;
        }
        let rho = quadrature::integrate(
            |u| {
                let k = kern.eval(u);
                let lin = kappa[2] - kappa[1] * u;
                k * k * lin * lin
            },
            lo,
            hi,
            QUADRATURE_TOL,
        )?;
        (kappa, rho)
    };

    let det = kappa[0] * kappa[2] - kappa[1] * kappa[1];
    Ok(KernelConstants {
        kappa,
        rho,
        s: rho / (det * det),
    })
}

/// Running kernel moments of one series inside one window, in the scaled
/// coordinate `u = (X − x)/h`.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct LocalMoments {
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
    pub a0: f64,
    pub a1: f64,
    pub distinct: usize,
}

/// One series with its observations sorted by design point, so that kernel
/// windows are contiguous slices.
#[derive(Debug, Clone)]
pub(crate) struct SortedSeries {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl SortedSeries {
    pub fn new(x_row: &[f64], y_row: &[f64]) -> Self {
        let mut idx: Vec<usize> = (0..x_row.len()).collect();
        idx.sort_by(|&a, &b| x_row[a].total_cmp(&x_row[b]));
        Self {
            x: idx.iter().map(|&k| x_row[k]).collect(),
            y: idx.iter().map(|&k| y_row[k]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn window(&self, x: f64, h: f64) -> Range<usize> {
        let lo = self.x.partition_point(|&v| v < x - h);
        let hi = self.x.partition_point(|&v| v <= x + h);
        lo..hi.max(lo)
    }

    pub fn moments(&self, kern: &KernelProfile, x: f64, h: f64) -> LocalMoments {
        let mut m = LocalMoments::default();
        let mut last: Option<f64> = None;
        for k in self.window(x, h) {
            let u = (self.x[k] - x) / h;
            let w = kern.eval(u);
            if w <= 0.0 {
                continue;
            }
            if last != Some(self.x[k]) {
                m.distinct += 1;
                last = Some(self.x[k]);
            }
            let wu = w * u;
            m.s0 += w;
            m.s1 += wu;
            m.s2 += wu * u;
            m.a0 += w * self.y[k];
            m.a1 += wu * self.y[k];
        }
        m
    }

    pub fn fit(&self, kern: &KernelProfile, x: f64, h: f64) -> Result<f64, WindowFailure> {
        let m = self.moments(kern, x, h);
        let det = m.s0 * m.s2 - m.s1 * m.s1;
        if m.distinct < 2 || det <= 0.0 {
            return Err(WindowFailure::new(
                x,
                h,
                WindowFailureKind::TooFewPoints {
                    distinct: m.distinct,
                },
            ));
        }
        Ok((m.s2 * m.a0 - m.s1 * m.a1) / det)
    }

    /// `Σ_t K((X_t − x)/h)`.
    pub fn kernel_sum(&self, kern: &KernelProfile, x: f64, h: f64) -> f64 {
        self.window(x, h)
            .map(|k| kern.eval((self.x[k] - x) / h))
            .sum()
    }

    pub fn density(&self, kern: &KernelProfile, x: f64, h: f64, kappa0: f64) -> f64 {
        self.kernel_sum(kern, x, h) / (h * kappa0 * self.len() as f64)
    }

    /// Local-linear fits evaluated at every (sorted) sample point.
    pub fn fitted_at_samples(
        &self,
        kern: &KernelProfile,
        h: f64,
    ) -> Result<Vec<f64>, WindowFailure> {
        self.x
            .iter()
            .map(|&xt| {
                self.fit(kern, xt, h).map_err(|f| {
                    let distinct = match f.kind {
                        WindowFailureKind::TooFewPoints { distinct } => distinct,
                        _ => 0,
                    };
                    WindowFailure::new(xt, h, WindowFailureKind::FitAtSample { at: xt, distinct })
                })
            })
            .collect()
    }

    pub fn homoskedastic_variance(&self, fitted: &[f64]) -> f64 {
        let ss: f64 = self
            .y
            .iter()
            .zip(fitted)
            .map(|(y, f)| (y - f) * (y - f))
            .sum();
        ss / self.len() as f64
    }

    pub fn conditional_variance(
        &self,
        kern: &KernelProfile,
        fitted: &[f64],
        x: f64,
        h: f64,
    ) -> Result<f64, WindowFailure> {
        let mut num = 0.0;
        let mut den = 0.0;
        for k in self.window(x, h) {
            let w = kern.eval((self.x[k] - x) / h);
            let r = self.y[k] - fitted[k];
            num += w * r * r;
            den += w;
        }
        if den > 0.0 {
            Ok(num / den)
        } else {
            Err(WindowFailure::new(
                x,
                h,
                WindowFailureKind::TooFewPoints { distinct: 0 },
            ))
        }
    }
}

fn insufficient(f: WindowFailure) -> Error {
    Error::InsufficientLocalData { failures: vec![f] }
}

fn check_rows(ystar_row: &[f64], x_row: &[f64]) -> Result<()> {
    if ystar_row.len() != x_row.len() || x_row.is_empty() {
        return Err(Error::UnbalancedPanel(format!(
            "{} responses but {} design points",
            ystar_row.len(),
            x_row.len()
        )));
    }
    Ok(())
}

/// Local-linear estimate `m̂_h(x) = Σ w_t Ŷ*_t / Σ w_t` with
/// `w_t = K_h(X_t − x){S₂ − ((X_t − x)/h) S₁}`.
pub fn local_linear_fit(
    ystar_row: &[f64],
    x_row: &[f64],
    x: f64,
    h: f64,
    kern: &KernelProfile,
) -> Result<f64> {
    check_rows(ystar_row, x_row)?;
    check_bandwidth(h)?;
    SortedSeries::new(x_row, ystar_row)
        .fit(kern, x, h)
        .map_err(insufficient)
}

/// Boundary-corrected density estimate `{κ₀(x,h) T}⁻¹ Σ K_h(X_t − x)`.
pub fn density_estimate(x_row: &[f64], x: f64, h: f64, kern: &KernelProfile) -> Result<f64> {
    let kc = kernel_constants(kern, x, h)?;
    let s: f64 = x_row.iter().map(|&xt| kern.eval((xt - x) / h)).sum();
    Ok(s / (h * kc.kappa[0] * x_row.len() as f64))
}

/// `T⁻¹ Σ (Ŷ*_t − m̂_h(X_t))²`.
pub fn variance_homoskedastic(
    ystar_row: &[f64],
    x_row: &[f64],
    h: f64,
    kern: &KernelProfile,
) -> Result<f64> {
    check_rows(ystar_row, x_row)?;
    check_bandwidth(h)?;
    let s = SortedSeries::new(x_row, ystar_row);
    let fitted = s.fitted_at_samples(kern, h).map_err(insufficient)?;
    Ok(s.homoskedastic_variance(&fitted))
}

/// Kernel-weighted residual variance localized at `x`.
pub fn variance_conditional(
    ystar_row: &[f64],
    x_row: &[f64],
    x: f64,
    h: f64,
    kern: &KernelProfile,
) -> Result<f64> {
    check_rows(ystar_row, x_row)?;
    check_bandwidth(h)?;
    let s = SortedSeries::new(x_row, ystar_row);
    let window = s.window(x, h);
    if s.kernel_sum(kern, x, h) <= 0.0 {
        return Err(insufficient(WindowFailure::new(
            x,
            h,
            WindowFailureKind::TooFewPoints { distinct: 0 },
        )));
    }
    // Only the in-window residuals are needed.
    let mut fitted = vec![0.0; s.len()];
    for k in window {
        fitted[k] = s.fit(kern, s.x()[k], h).map_err(|f| {
            let distinct = match f.kind {
                WindowFailureKind::TooFewPoints { distinct } => distinct,
                _ => 0,
            };
            insufficient(WindowFailure::new(
                x,
                h,
                WindowFailureKind::FitAtSample {
                    at: s.x()[k],
                    distinct,
                },
            ))
        })?;
    }
    s.conditional_variance(kern, &fitted, x, h)
        .map_err(insufficient)
}
