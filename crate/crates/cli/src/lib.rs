//! Command implementations behind the `mscluster` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mscluster::io;
use mscluster::multiscale::{DistanceOptions, VarianceMode, WindowPolicy};
use mscluster::simulate::{run_study, SimulationDesign, StudyConfig, StudyReport};
use mscluster::threshold::{build_covariance, quantile_qn, GaussianDesign, DEFAULT_ALPHA, DEFAULT_REPS};
use mscluster::{
    cluster_panel, prepare, ErrorCategory, GridSpec, KernelProfile, LocationScaleGrid,
};
use serde::{Deserialize, Serialize};

/// Every knob of a run. Serialized in full into each report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub kernel: String,
    pub variance_mode: VarianceMode,
    pub policy: WindowPolicy,
    /// Remove series and time fixed effects before smoothing.
    pub within_transform: bool,
    pub alpha: f64,
    pub mc_reps: usize,
    pub seed: u64,
    /// Worker threads; `0` uses every core.
    pub threads: usize,
    pub cache_dir: PathBuf,
    pub no_cache: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            kernel: "epanechnikov".into(),
            variance_mode: VarianceMode::Homoskedastic,
            policy: WindowPolicy::Strict,
            within_transform: true,
            alpha: DEFAULT_ALPHA,
            mc_reps: DEFAULT_REPS,
            seed: 1,
            threads: 0,
            cache_dir: PathBuf::from(".mscluster-cache"),
            no_cache: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(mscluster::Error::BadLevel { alpha: self.alpha }.into());
        }
        if self.mc_reps == 0 {
            return Err(mscluster::Error::BadReps.into());
        }
        KernelProfile::from_name(&self.kernel)?;
        Ok(())
    }

    pub fn kernel(&self) -> Result<KernelProfile> {
        Ok(KernelProfile::from_name(&self.kernel)?)
    }

    pub fn distance_options(&self) -> DistanceOptions {
        DistanceOptions {
            variance_mode: self.variance_mode,
            policy: self.policy,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VarianceArg {
    Homoskedastic,
    Conditional,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Strict,
    Lenient,
}

/// Flags that override fields of the JSON configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON configuration file; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// epanechnikov, biweight or triweight.
    #[arg(long)]
    pub kernel: Option<String>,
    /// Error-variance estimate used to standardize the statistics.
    #[arg(long, value_enum)]
    pub variance_mode: Option<VarianceArg>,
    /// Fail on degenerate windows (strict) or drop those grid points (lenient).
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    /// Smooth the raw responses; only for panels without fixed effects.
    #[arg(long)]
    pub no_within_transform: bool,
    /// Quantile level of the threshold [default: 0.95].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Monte-Carlo draws for the threshold [default: 1000].
    #[arg(long)]
    pub mc_reps: Option<usize>,
    /// Master seed [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Covariance cache directory [default: .mscluster-cache].
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Recompute the covariance even when a cached copy exists.
    #[arg(long)]
    pub no_cache: bool,
    /// Explicit locations, comma separated (requires --bandwidths).
    #[arg(long, value_delimiter = ',')]
    pub locations: Option<Vec<f64>>,
    /// Explicit bandwidths, comma separated (requires --locations).
    #[arg(long, value_delimiter = ',')]
    pub bandwidths: Option<Vec<f64>>,
    /// Regular grid: smallest location [default: 0.05].
    #[arg(long)]
    pub x_min: Option<f64>,
    /// Regular grid: largest location [default: 0.95].
    #[arg(long)]
    pub x_max: Option<f64>,
    /// Regular grid: location spacing [default: 0.01].
    #[arg(long)]
    pub x_step: Option<f64>,
    /// Smallest bandwidth [default: 0.025].
    #[arg(long)]
    pub h_min: Option<f64>,
    /// Largest bandwidth [default: 0.25].
    #[arg(long)]
    pub h_max: Option<f64>,
    /// Bandwidth spacing [default: 0.025].
    #[arg(long)]
    pub h_step: Option<f64>,
    /// Bandwidths h_max·2^-k down to h_min.
    #[arg(long)]
    pub dyadic: bool,
    /// Bandwidth window derived from the series length.
    #[arg(long)]
    pub auto_grid: bool,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(k) = &self.kernel {
            cfg.kernel = k.clone();
        }
        if let Some(v) = self.variance_mode {
            cfg.variance_mode = match v {
                VarianceArg::Homoskedastic => VarianceMode::Homoskedastic,
                VarianceArg::Conditional => VarianceMode::Conditional,
            };
        }
        if let Some(p) = self.policy {
            cfg.policy = match p {
                PolicyArg::Strict => WindowPolicy::Strict,
                PolicyArg::Lenient => WindowPolicy::Lenient,
            };
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(r) = self.mc_reps {
            cfg.mc_reps = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(d) = &self.cache_dir {
            cfg.cache_dir = d.clone();
        }
        cfg.no_cache |= self.no_cache;
        if self.no_within_transform {
            cfg.within_transform = false;
        }
        cfg.grid = self.grid_override(cfg.grid)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn grid_override(&self, base: GridSpec) -> Result<GridSpec> {
        let (dx_min, dx_max, dx_step, dh_min, dh_max, dh_step) = match base {
            GridSpec::Regular { x_min, x_max, x_step, h_min, h_max, h_step } => {
                (x_min, x_max, x_step, h_min, h_max, h_step)
            }
            _ => (0.05, 0.95, 0.01, 0.025, 0.25, 0.025),
        };
        let x_min = self.x_min.unwrap_or(dx_min);
        let x_max = self.x_max.unwrap_or(dx_max);
        let x_step = self.x_step.unwrap_or(dx_step);
        let h_min = self.h_min.unwrap_or(dh_min);
        let h_max = self.h_max.unwrap_or(dh_max);
        let h_step = self.h_step.unwrap_or(dh_step);
        let modes = [self.locations.is_some() || self.bandwidths.is_some(), self.dyadic, self.auto_grid];
        if modes.iter().filter(|&&m| m).count() > 1 {
            bail!(mscluster::Error::Format(
                "choose at most one of explicit, --dyadic and --auto-grid".into()
            ));
        }
        let regular_flags = [self.x_min, self.x_max, self.x_step, self.h_min, self.h_max, self.h_step];
        Ok(match (&self.locations, &self.bandwidths) {
            (Some(l), Some(b)) => GridSpec::Explicit { locations: l.clone(), bandwidths: b.clone() },
            (Some(_), None) | (None, Some(_)) => bail!(mscluster::Error::Format(
                "--locations and --bandwidths must be given together".into()
            )),
            (None, None) if self.dyadic => GridSpec::Dyadic { h_min, h_max },
            (None, None) if self.auto_grid => GridSpec::Auto { x_min, x_max, x_step, h_step },
            (None, None) if regular_flags.iter().any(Option::is_some) => {
                GridSpec::Regular { x_min, x_max, x_step, h_min, h_max, h_step }
            }
            (None, None) => base,
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "mscluster", version, about = "Multiscale clustering of nonparametric regression curves")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the groups and their number from a panel CSV.
    Cluster {
        /// Input CSV with columns series_id,t,x,y.
        #[arg(long)]
        panel: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compute and export the pairwise multiscale distances only.
    Distances {
        #[arg(long)]
        panel: PathBuf,
        /// Output CSV; a JSON sidecar is written next to it.
        #[arg(long, default_value = "distances.csv")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the calibrated threshold q_n(alpha) for n series.
    Quantile {
        #[arg(long)]
        n: usize,
        /// Series length, only needed with --auto-grid.
        #[arg(long)]
        t: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the Monte-Carlo study.
    Simulate {
        #[command(flatten)]
        design: SimulateArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Draw a dendrogram with the threshold line as SVG.
    Render {
        #[arg(long)]
        dendrogram: PathBuf,
        #[arg(long)]
        threshold: f64,
        #[arg(long, default_value = "dendrogram.svg")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 500)]
    pub t: usize,
    #[arg(long, default_value_t = -0.25, allow_hyphen_values = true)]
    pub ar: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
    /// Number of replications S.
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Single-bandwidth comparison methods, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub baselines: Vec<f64>,
}

/// Maps an error to the process exit code: 2 input, 3 numerical, 4 internal.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<mscluster::Error>()) {
        Some(e) => match e.category() {
            ErrorCategory::Input => 2,
            ErrorCategory::Numerical => 3,
            ErrorCategory::Internal => 4,
        },
        None if err.chain().any(|e| e.is::<serde_json::Error>() || e.is::<std::io::Error>()) => 2,
        None => 4,
    }
}

fn install_threads(threads: usize) {
    if threads > 0 {
        // A pool can only be installed once per process; later calls keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Cluster { panel, out, cfg } => {
            let cfg = cfg.resolve()?;
            install_threads(cfg.threads);
            let report = cmd_cluster(&panel, &out, &cfg)?;
            println!("K = {} (threshold {:.6})", report.k_hat, report.threshold);
        }
        Command::Distances { panel, out, cfg } => {
            let cfg = cfg.resolve()?;
            install_threads(cfg.threads);
            let n = cmd_distances(&panel, &out, &cfg)?;
            println!("wrote {} pairs to {}", n * (n - 1) / 2, out.display());
        }
        Command::Quantile { n, t, cfg } => {
            let cfg = cfg.resolve()?;
            install_threads(cfg.threads);
            let q = cmd_quantile(&cfg, n, t)?;
            println!("{:?}", q.quantile);
        }
        Command::Simulate { design, out, cfg } => {
            let cfg = cfg.resolve()?;
            install_threads(cfg.threads);
            let report = cmd_simulate(&design, &cfg, &out)?;
            for m in &report.methods {
                println!(
                    "{}: K correct {:.3}, mean #F {:.3}, median #F {}, failed {}",
                    m.name, m.k_hat_correct, m.mean_errors, m.median_errors, m.failed
                );
            }
        }
        Command::Render { dendrogram, threshold, out } => {
            let k = cmd_render(&dendrogram, threshold, &out)?;
            println!("K = {k}; wrote {}", out.display());
        }
    }
    Ok(())
}

/// Wall time of one stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// Parts of a report that legitimately differ between identical runs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunInfo {
    pub timings: Vec<StageTime>,
    pub covariance_cache: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        Self {
            name: "mscluster".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridInfo {
    pub points: usize,
    pub dropped_points: usize,
    pub h_min: f64,
    pub h_max: f64,
    pub bandwidths: Vec<f64>,
    pub fingerprint: String,
    pub covariance_fingerprint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub tool: ToolInfo,
    pub config: RunConfig,
    pub panel: String,
    pub n: usize,
    pub t: usize,
    pub grid: GridInfo,
    pub threshold: f64,
    pub k_hat: usize,
    pub criterion_values: Vec<f64>,
    pub clusters: Vec<Vec<String>>,
    pub covariance_min_eigenvalue: f64,
    pub covariance_clipped_eigenvalues: usize,
    pub run_info: RunInfo,
}

struct Timer(Vec<StageTime>);

impl Timer {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.push(StageTime {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

fn load_panel(path: &Path) -> Result<mscluster::PanelData> {
    io::read_panel_csv(path)
        .map_err(|e| match e {
            mscluster::Error::Io(msg) => mscluster::Error::Format(msg),
            other => other,
        })
        .with_context(|| format!("ingestion of {}", path.display()))
}

/// Loads the covariance for `grid` from the cache or builds (and stores) it.
/// Returns the design and `"hit"`, `"miss"` or `"disabled"`.
pub fn covariance_for(
    grid: &LocationScaleGrid,
    kern: &KernelProfile,
    cfg: &RunConfig,
) -> Result<(GaussianDesign, &'static str)> {
    let fp = grid.fingerprint(kern, &["covariance"]);
    if cfg.no_cache {
        return Ok((build_covariance(grid, kern)?, "disabled"));
    }
    let path = io::covariance_cache_path(&cfg.cache_dir, &fp);
    match io::read_covariance_cache(&path, &fp, grid) {
        Ok(Some(design)) => return Ok((design, "hit")),
        Ok(None) => {}
        // A corrupt or foreign cache file is rebuilt rather than trusted.
        Err(_) => {}
    }
    let design = build_covariance(grid, kern)?;
    io::write_covariance_cache(&path, &fp, &design)
        .with_context(|| format!("writing covariance cache {}", path.display()))?;
    Ok((design, "miss"))
}

pub fn cmd_cluster(panel_path: &Path, out: &Path, cfg: &RunConfig) -> Result<ClusterReport> {
    cfg.validate()?;
    let kern = cfg.kernel()?;
    let mut timer = Timer(Vec::new());
    let panel = timer.time("ingest", || load_panel(panel_path))?;
    let grid = cfg.grid.resolve(Some(panel.t_len())).context("grid")?;
    let tp = timer
        .time("transform", || prepare(&panel, cfg.within_transform))
        .context("within-transformation")?;

    let mut design_info = None;
    let mut cache_status = "disabled";
    let n = panel.n();
    let outcome = {
        let start = Instant::now();
        let mut quantile_secs = 0.0;
        let mut cov_secs = 0.0;
        let res = cluster_panel(&tp, &grid, &kern, &cfg.distance_options(), |used| {
            let t0 = Instant::now();
            let (design, status) = covariance_for(used, &kern, cfg)
                .map_err(|e| match e.downcast::<mscluster::Error>() {
                    Ok(me) => me,
                    Err(other) => mscluster::Error::Io(other.to_string()),
                })?;
            cov_secs = t0.elapsed().as_secs_f64();
            cache_status = status;
            let t1 = Instant::now();
            let q = quantile_qn(&design, n, cfg.alpha, cfg.mc_reps, cfg.seed)?;
            quantile_secs = t1.elapsed().as_secs_f64();
            design_info = Some((design.repair(), used.fingerprint(&kern, &["covariance"])));
            Ok(q)
        });
        let total = start.elapsed().as_secs_f64();
        timer.0.push(StageTime { stage: "covariance".into(), seconds: cov_secs });
        timer.0.push(StageTime { stage: "quantile".into(), seconds: quantile_secs });
        timer.0.push(StageTime {
            stage: "distances_and_clustering".into(),
            seconds: total - cov_secs - quantile_secs,
        });
        res.context("distance, threshold and clustering stage")?
    };
    let (repair, cov_fp) = design_info.expect("threshold was calibrated");

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ids = panel.series_ids();
    timer.time("write", || -> Result<()> {
        io::write_partition_csv(&out.join("assignments.csv"), ids, &outcome.clustering.partition)?;
        io::write_dendrogram(&out.join("dendrogram.json"), &outcome.dendrogram)?;
        io::write_distances(&out.join("distances.csv"), &outcome.distances, ids)?;
        Ok(())
    })?;

    let meta = outcome.distances.meta().expect("computed matrix carries metadata");
    let report = ClusterReport {
        tool: ToolInfo::default(),
        config: cfg.clone(),
        panel: panel_path.display().to_string(),
        n,
        t: panel.t_len(),
        grid: GridInfo {
            points: meta.grid_points,
            dropped_points: meta.dropped_points,
            h_min: meta.h_min,
            h_max: meta.h_max,
            bandwidths: grid.bandwidths(),
            fingerprint: meta.fingerprint.clone(),
            covariance_fingerprint: cov_fp,
        },
        threshold: outcome.clustering.threshold,
        k_hat: outcome.clustering.k_hat,
        criterion_values: outcome.clustering.criterion_values.clone(),
        clusters: outcome
            .clustering
            .partition
            .clusters()
            .iter()
            .map(|c| c.iter().map(|&i| ids[i].clone()).collect())
            .collect(),
        covariance_min_eigenvalue: repair.min_eigenvalue,
        covariance_clipped_eigenvalues: repair.clipped,
        run_info: RunInfo {
            timings: timer.0,
            covariance_cache: cache_status.into(),
        },
    };
    io::write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Writes the distance CSV and sidecar; returns the number of series.
pub fn cmd_distances(panel_path: &Path, out: &Path, cfg: &RunConfig) -> Result<usize> {
    cfg.validate()?;
    let kern = cfg.kernel()?;
    let panel = load_panel(panel_path)?;
    let grid = cfg.grid.resolve(Some(panel.t_len())).context("grid")?;
    let tp = prepare(&panel, cfg.within_transform)?;
    let dm = mscluster::distance_matrix(&tp, &grid, &kern, &cfg.distance_options())
        .context("distance stage")?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    io::write_distances(out, &dm, panel.series_ids())?;
    Ok(panel.n())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileReport {
    pub quantile: f64,
    pub n: usize,
    pub grid_points: usize,
    pub covariance_cache: String,
}

pub fn cmd_quantile(cfg: &RunConfig, n: usize, t: Option<usize>) -> Result<QuantileReport> {
    cfg.validate()?;
    let kern = cfg.kernel()?;
    let grid = cfg.grid.resolve(t).context("grid")?;
    let (design, status) = covariance_for(&grid, &kern, cfg)?;
    let q = quantile_qn(&design, n, cfg.alpha, cfg.mc_reps, cfg.seed)?;
    Ok(QuantileReport {
        quantile: q,
        n,
        grid_points: grid.len(),
        covariance_cache: status.into(),
    })
}

#[derive(Debug, Clone, Serialize)]
struct SimulationOutput<'a> {
    tool: ToolInfo,
    config: &'a RunConfig,
    design: &'a SimulateArgs,
    study: &'a StudyReport,
    run_info: RunInfo,
}

/// Runs the study and writes `study.json` and `study.csv` into `out`.
pub fn cmd_simulate(args: &SimulateArgs, cfg: &RunConfig, out: &Path) -> Result<StudyReport> {
    cfg.validate()?;
    let design = SimulationDesign {
        n: args.n,
        t: args.t,
        k0: 5,
        ar_coeff: args.ar,
        noise_scale: args.noise_scale,
        seed: cfg.seed,
    };
    let grid = cfg.grid.resolve(Some(args.t)).context("grid")?;
    let study = StudyConfig {
        design,
        replications: args.reps,
        alpha: cfg.alpha,
        mc_reps: cfg.mc_reps,
        kernel: cfg.kernel.clone(),
        distance: cfg.distance_options(),
        baseline_bandwidths: args.baselines.clone(),
        within_transform: cfg.within_transform,
    };
    let mut timer = Timer(Vec::new());
    let report = timer.time("study", || run_study(&study, &grid))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::write_json(
        &out.join("study.json"),
        &SimulationOutput {
            tool: ToolInfo::default(),
            config: cfg,
            design: args,
            study: &report,
            run_info: RunInfo {
                timings: timer.0,
                covariance_cache: "unused".into(),
            },
        },
    )?;
    io::write_study_csv(&out.join("study.csv"), &report)?;
    Ok(report)
}

/// Renders the SVG; returns the implied number of groups.
pub fn cmd_render(dendrogram: &Path, threshold: f64, out: &Path) -> Result<usize> {
    let dend = io::read_dendrogram(dendrogram)
        .with_context(|| format!("reading {}", dendrogram.display()))?;
    let svg = mscluster::render::render_svg(&dend, threshold)?;
    std::fs::write(out, svg).with_context(|| format!("writing {}", out.display()))?;
    Ok(mscluster::cut_dendrogram(&dend, threshold).k())
}
