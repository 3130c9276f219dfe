//! Clustering of nonparametric regression curves in panel data with a
//! multiscale distance, complete-linkage clustering and a Gaussian threshold.

pub mod cluster;
mod error;
pub mod io;
pub mod kernel;
pub mod multiscale;
pub mod panel;
pub mod pipeline;
pub mod quadrature;
pub mod render;
pub mod simulate;
pub mod threshold;

pub use cluster::{
    cut_dendrogram, estimate_k0, group_mean_curves, hac_complete_linkage, partition_with_k,
    ClusteringResult, Dendrogram, Merge, Partition,
};
pub use error::{Error, ErrorCategory, Result, WindowFailure, WindowFailureKind};
pub use kernel::{
    density_estimate, kernel_constants, local_linear_fit, variance_conditional,
    variance_homoskedastic, KernelConstants, KernelProfile,
};
pub use multiscale::{
    distance_matrix, dyadic_grid, lambda_correction, make_grid, multiscale_distance,
    psi_statistic, DistanceMatrix, DistanceOptions, GridPoint, GridSpec, LocationScaleGrid,
    VarianceMode, WindowPolicy,
};
pub use panel::{
    prepare, untransformed, validate_panel, within_transform, PanelData, RawRecord,
    TransformedPanel,
};
pub use threshold::{build_covariance, quantile_qn, sample_bn, GaussianDesign};
pub use pipeline::{calibrate_threshold, cluster_panel, ClusterOutcome};
pub use simulate::{
    classification_errors, draw_sample, run_study, GroupStructure, SimulationDesign, StudyConfig,
    StudyReport,
};
