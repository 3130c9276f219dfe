//! Location-scale grids and the multiscale distance statistic.

mod distance;
mod grid;

pub use distance::{
    distance_matrix, multiscale_distance, psi_statistic, DistanceMatrix, DistanceMeta,
    DistanceOptions, VarianceMode, WindowPolicy,
};
pub use grid::{
    auto_window, dyadic_grid, lambda_correction, make_grid, BandwidthLevel, GridPoint, GridSpec,
    LocationScaleGrid,
};
