//! End-to-end estimation: distances, dendrogram and the calibrated cut.

use crate::cluster::{estimate_k0, hac_complete_linkage_labeled, ClusteringResult, Dendrogram};
use crate::error::Result;
use crate::kernel::KernelProfile;
use crate::multiscale::{distance_matrix, DistanceMatrix, DistanceOptions, LocationScaleGrid};
use crate::panel::TransformedPanel;
use crate::threshold::{build_covariance, quantile_qn, GaussianDesign};

#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    pub distances: DistanceMatrix,
    pub dendrogram: Dendrogram,
    pub clustering: ClusteringResult,
}

/// Covariance over `grid` and the `alpha`-quantile of `B_n` for `n` series.
pub fn calibrate_threshold(
    grid: &LocationScaleGrid,
    kern: &KernelProfile,
    n: usize,
    alpha: f64,
    mc_reps: usize,
    seed: u64,
) -> Result<(GaussianDesign, f64)> {
    let design = build_covariance(grid, kern)?;
    let q = quantile_qn(&design, n, alpha, mc_reps, seed)?;
    Ok((design, q))
}

/// Runs distances and clustering, asking `threshold_for` for the cut level on
/// the grid actually used (smaller than `grid` when points were dropped).
pub fn cluster_panel<F>(
    tp: &TransformedPanel,
    grid: &LocationScaleGrid,
    kern: &KernelProfile,
    options: &DistanceOptions,
    threshold_for: F,
) -> Result<ClusterOutcome>
where
    F: FnOnce(&LocationScaleGrid) -> Result<f64>,
{
    let distances = distance_matrix(tp, grid, kern, options)?;
    let used = match distances.meta() {
        Some(meta) if meta.dropped_points > 0 => LocationScaleGrid::from_points(meta.grid.clone())?,
        _ => grid.clone(),
    };
    let threshold = threshold_for(&used)?;
    let dendrogram = hac_complete_linkage_labeled(&distances, tp.series_ids().to_vec())?;
    let clustering = estimate_k0(&dendrogram, &distances, threshold)?;
    Ok(ClusterOutcome {
        distances,
        dendrogram,
        clustering,
    })
}
