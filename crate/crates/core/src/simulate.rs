//! Monte-Carlo study with five bump-shaped group curves and AR(1) errors.

use std::collections::BTreeMap;

use itertools::Itertools;
use pathfinding::prelude::{kuhn_munkres, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{partition_with_k, Partition};
use crate::error::{Error, Result};
use crate::kernel::KernelProfile;
use crate::multiscale::{DistanceMatrix, DistanceOptions, LocationScaleGrid};
use crate::panel::{prepare, PanelData};
use crate::pipeline::{calibrate_threshold, cluster_panel};

/// `b(x, x₀, h) = 1(|x − x₀| ≤ h) (1 − ((x − x₀)/h)²)²`.
pub fn bump(x: f64, x0: f64, h: f64) -> f64 {
    let u = (x - x0) / h;
    if u.abs() <= 1.0 {
        let v = 1.0 - u * u;
        v * v
    } else {
        0.0
    }
}

/// Group curve `g_k`, `k = 1..=5`.
pub fn group_function(k: usize, x: f64) -> Result<f64> {
    Ok(match k {
        1 => 0.0,
        2 => 0.35 * bump(x, 0.25, 0.25),
        3 => 0.35 * bump(x, 0.75, 0.25),
        4 => 2.0 * bump(x, 0.25, 1.0 / 40.0),
        5 => 2.0 * bump(x, 0.75, 1.0 / 40.0),
        _ => return Err(Error::BadGroup { k }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub n: usize,
    pub t: usize,
    #[serde(default = "default_k0")]
    pub k0: usize,
    pub ar_coeff: f64,
    /// Multiplies every error term; `0` gives noiseless data.
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    pub seed: u64,
}

fn default_k0() -> usize {
    5
}

fn default_noise_scale() -> f64 {
    1.0
}

impl SimulationDesign {
    pub fn new(n: usize, t: usize, ar_coeff: f64, seed: u64) -> Self {
        Self {
            n,
            t,
            k0: 5,
            ar_coeff,
            noise_scale: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ar_coeff.abs() < 1.0) {
            return Err(Error::BadDesign(format!("AR coefficient {} must lie in (−1, 1)", self.ar_coeff)));
        }
        if !(1..=5).contains(&self.k0) {
            return Err(Error::BadDesign(format!("k0 = {} but only five group curves exist", self.k0)));
        }
        if self.n < 2 || self.n % self.k0 != 0 {
            return Err(Error::BadDesign(format!("n = {} is not a positive multiple of k0 = {}", self.n, self.k0)));
        }
        if self.t < 2 {
            return Err(Error::BadDesign(format!("T = {} is too short", self.t)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::BadDesign(format!("noise scale {} is invalid", self.noise_scale)));
        }
        Ok(())
    }

    /// Innovation variance `ν² = 1 − a²`, so the errors have unit variance.
    pub fn innovation_var(&self) -> f64 {
        1.0 - self.ar_coeff * self.ar_coeff
    }

    /// The equal-size layout `G_k = {(k−1)n/k0, …, kn/k0 − 1}` (0-based).
    pub fn groups(&self) -> GroupStructure {
        let size = self.n / self.k0;
        GroupStructure::from_labels((0..self.n).map(|i| i / size).collect())
    }
}

/// True group membership; `labels[i]` is the 0-based group of series `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupStructure {
    pub k0: usize,
    pub groups: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl GroupStructure {
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let k0 = labels.iter().max().map_or(0, |m| m + 1);
        let mut groups = vec![Vec::new(); k0];
        for (i, &l) in labels.iter().enumerate() {
            groups[l].push(i);
        }
        Self { k0, groups, labels }
    }

    pub fn partition(&self) -> Partition {
        Partition::from_clusters(self.groups.clone())
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for one purpose (`tag`) of a master seed.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    splitmix64(master ^ splitmix64(tag))
}

const DATA_TAG: u64 = 1;
const QUANTILE_TAG: u64 = 2;

/// Panel for replication `rep`. Each replication reads its own ChaCha8
/// stream, so draws do not depend on which other replications run. Series
/// are generated in order; within a series the `T` regressors come first,
/// then the initial error and the `T` innovations.
pub fn draw_sample(design: &SimulationDesign, rep: u64) -> Result<(PanelData, GroupStructure)> {
    design.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(design.seed, DATA_TAG));
    rng.set_stream(rep);
    let groups = design.groups();
    let a = design.ar_coeff;
    let innov = Normal::new(0.0, design.innovation_var().sqrt()).expect("positive variance");
    let (n, t) = (design.n, design.t);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let x: Vec<f64> = (0..t).map(|_| rng.random::<f64>()).collect();
        let mut eps: f64 = StandardNormal.sample(&mut rng);
        let mut y = Vec::with_capacity(t);
        for &xt in &x {
            eps = a * eps + innov.sample(&mut rng);
            y.push(group_function(groups.labels[i] + 1, xt)? + design.noise_scale * eps);
        }
        xs.push(x);
        ys.push(y);
    }
    let ids = (0..n).map(|i| format!("s{:0w$}", i + 1, w = n.to_string().len())).collect();
    let times = (1..=t as u64).collect();
    Ok((PanelData::new(ids, times, xs, ys)?, groups))
}

/// Minimum number of misclassified series over all matchings of estimated
/// clusters to true groups.
pub fn classification_errors(truth: &GroupStructure, est: &Partition, k0: usize) -> Result<usize> {
    if truth.k0 != k0 {
        return Err(Error::ClusterCountMismatch { expected: k0, found: truth.k0 });
    }
    if est.k() != k0 {
        return Err(Error::ClusterCountMismatch { expected: k0, found: est.k() });
    }
    if est.n() != truth.labels.len() {
        return Err(Error::Format(format!(
            "partition covers {} series, truth {}",
            est.n(),
            truth.labels.len()
        )));
    }
    let mut confusion = vec![vec![0usize; k0]; k0];
    for (b, cluster) in est.clusters().iter().enumerate() {
        for &i in cluster {
            confusion[truth.labels[i]][b] += 1;
        }
    }
    let matched = if k0 <= 8 {
        (0..k0)
            .permutations(k0)
            .map(|perm| perm.iter().enumerate().map(|(a, &b)| confusion[a][b]).sum::<usize>())
            .max()
            .unwrap_or(0)
    } else {
        let weights = Matrix::from_rows(
            confusion.iter().map(|row| row.iter().map(|&c| c as i64).collect::<Vec<_>>()),
        )
        .expect("square confusion matrix");
        kuhn_munkres(&weights).0 as usize
    };
    Ok(truth.labels.len() - matched)
}

/// `min between-group d̂ − max within-group d̂`; positive when the groups are
/// perfectly separated.
pub fn separation_margin(dm: &DistanceMatrix, groups: &GroupStructure) -> f64 {
    let mut within = f64::NEG_INFINITY;
    let mut between = f64::INFINITY;
    for (i, j, d) in dm.pairs() {
        if groups.labels[i] == groups.labels[j] {
            within = within.max(d);
        } else {
            between = between.min(d);
        }
    }
    between - within
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub design: SimulationDesign,
    pub replications: usize,
    pub alpha: f64,
    pub mc_reps: usize,
    pub kernel: String,
    pub distance: DistanceOptions,
    /// Single-bandwidth comparison methods, evaluated at the same locations.
    pub baseline_bandwidths: Vec<f64>,
    /// Apply the within-transformation before estimation. The simulated
    /// panels carry no fixed effects, so switching it off is also valid.
    #[serde(default = "default_within")]
    pub within_transform: bool,
}

fn default_within() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub k_hat: Option<usize>,
    #[serde(rename = "errors_F")]
    pub errors_f: Option<usize>,
    pub threshold: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub bandwidths: Vec<f64>,
    pub grid_points: usize,
    pub threshold: f64,
    pub records: Vec<ReplicationRecord>,
    pub k_hat_histogram: BTreeMap<usize, usize>,
    pub errors_histogram: BTreeMap<usize, usize>,
    pub failed: usize,
    /// Share of successful replications with `K̂₀ = K₀`.
    pub k_hat_correct: f64,
    pub mean_errors: f64,
    pub median_errors: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub methods: Vec<MethodReport>,
}

impl StudyReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.name == name)
    }
}

struct Method {
    name: String,
    grid: LocationScaleGrid,
    threshold: f64,
}

fn median(sorted: &[usize]) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        m if m % 2 == 1 => sorted[m / 2] as f64,
        m => 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) as f64,
    }
}

fn summarize(method: &Method, records: Vec<ReplicationRecord>, k0: usize) -> MethodReport {
    let mut k_hat_histogram = BTreeMap::new();
    let mut errors_histogram = BTreeMap::new();
    let mut errors = Vec::new();
    let mut correct = 0;
    let mut ok = 0;
    for r in &records {
        if let (Some(k), Some(e)) = (r.k_hat, r.errors_f) {
            *k_hat_histogram.entry(k).or_insert(0) += 1;
            *errors_histogram.entry(e).or_insert(0) += 1;
            errors.push(e);
            ok += 1;
            correct += usize::from(k == k0);
        }
    }
    errors.sort_unstable();
    let denom = ok.max(1) as f64;
    MethodReport {
        name: method.name.clone(),
        bandwidths: method.grid.bandwidths(),
        grid_points: method.grid.len(),
        threshold: method.threshold,
        failed: records.len() - ok,
        k_hat_correct: correct as f64 / denom,
        mean_errors: if ok == 0 { f64::NAN } else { errors.iter().sum::<usize>() as f64 / denom },
        median_errors: median(&errors),
        records,
        k_hat_histogram,
        errors_histogram,
    }
}

/// Runs `config.replications` replications of the full estimation pipeline on
/// `grid` and on each single-bandwidth baseline. All methods see the same
/// samples; each threshold is calibrated once per grid.
pub fn run_study(config: &StudyConfig, grid: &LocationScaleGrid) -> Result<StudyReport> {
    let design = &config.design;
    design.validate()?;
    if config.replications == 0 {
        return Err(Error::BadReps);
    }
    let kern = KernelProfile::from_name(&config.kernel)?;
    let q_seed = derive_seed(design.seed, QUANTILE_TAG);

    let mut grids = vec![("multiscale".to_string(), grid.clone())];
    for &h in &config.baseline_bandwidths {
        grids.push((format!("single_h={h}"), grid.with_single_bandwidth(h)?));
    }
    let methods = grids
        .into_iter()
        .map(|(name, g)| {
            let (_, threshold) =
                calibrate_threshold(&g, &kern, design.n, config.alpha, config.mc_reps, q_seed)?;
            Ok(Method { name, grid: g, threshold })
        })
        .collect::<Result<Vec<_>>>()?;

    let run_one = |rep: usize| -> Vec<ReplicationRecord> {
        let sample = draw_sample(design, rep as u64).and_then(|(panel, truth)| {
            Ok((prepare(&panel, config.within_transform)?, truth))
        });
        methods
            .iter()
            .map(|m| {
                let outcome = sample.as_ref().map_err(Clone::clone).and_then(|(tp, truth)| {
                    let out = cluster_panel(tp, &m.grid, &kern, &config.distance, |used| {
                        if used.len() == m.grid.len() {
                            Ok(m.threshold)
                        } else {
                            calibrate_threshold(used, &kern, design.n, config.alpha, config.mc_reps, q_seed)
                                .map(|(_, q)| q)
                        }
                    })?;
                    let k0_part = partition_with_k(&out.dendrogram, design.k0)?;
                    let errors = classification_errors(truth, &k0_part, design.k0)?;
                    Ok((out.clustering.k_hat, errors, out.clustering.threshold))
                });
                match outcome {
                    Ok((k, e, q)) => ReplicationRecord {
                        rep,
                        k_hat: Some(k),
                        errors_f: Some(e),
                        threshold: q,
                        error: None,
                    },
                    Err(err) => ReplicationRecord {
                        rep,
                        k_hat: None,
                        errors_f: None,
                        threshold: m.threshold,
                        error: Some(err.to_string()),
                    },
                }
            })
            .collect()
    };
    let per_rep: Vec<Vec<ReplicationRecord>> = if config.distance.parallel {
        (0..config.replications).into_par_iter().map(run_one).collect()
    } else {
        (0..config.replications).map(run_one).collect()
    };

    let reports = methods
        .iter()
        .enumerate()
        .map(|(k, m)| summarize(m, per_rep.iter().map(|r| r[k].clone()).collect(), design.k0))
        .collect();
    Ok(StudyReport {
        config: config.clone(),
        methods: reports,
    })
}
