use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "jointscale", version, about = "Joint metric MDS of two unpaired datasets")]
pub struct Cli {
    /// Worker threads for parallel restarts. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: u32,

    /// Minimum level for the JSON-lines log on stderr.
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    pub log_level: LogLevel,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LogLevel {
    Off,
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl From<LogLevel> for log::LevelFilter {
    fn from(level: LogLevel) -> Self {
        match level {
            LogLevel::Off => Self::Off,
            LogLevel::Error => Self::Error,
            LogLevel::Warn => Self::Warn,
            LogLevel::Info => Self::Info,
            LogLevel::Debug => Self::Debug,
            LogLevel::Trace => Self::Trace,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed one dataset with SMACOF.
    Embed(EmbedArgs),
    /// Jointly embed two datasets and learn a coupling between them.
    Joint(JointArgs),
    /// Match the nodes of two graphs given as edge lists.
    Match(MatchArgs),
    /// Compute alignment and transfer metrics from saved outputs.
    Eval(EvalArgs),
    /// Write a synthetic dataset pair.
    Gen(GenArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Rows are samples, columns are features.
    Features,
    /// Square dissimilarity matrix.
    Distances,
    /// Edge list `i j [w]`.
    Edgelist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// Every edge has length 1.
    Hop,
    /// Edge length is the reciprocal of the normalized adjacency entry.
    Inv,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct FormatArgs {
    /// How input files are interpreted.
    #[arg(long, value_enum, default_value_t = InputKind::Features)]
    pub kind: InputKind,
    /// Field delimiter of CSV inputs.
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    /// CSV inputs start with a header row.
    #[arg(long)]
    pub header: bool,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct PrepArgs {
    /// Z-score feature columns before computing distances.
    #[arg(long)]
    pub standardize: bool,
    /// Replace distances by shortest paths on the K-nearest-neighbour graph.
    #[arg(long, value_name = "K", value_parser = clap::value_parser!(u32).range(1..))]
    pub geodesic: Option<u32>,
    /// Join disconnected neighbour-graph components by their closest pairs
    /// instead of failing.
    #[arg(long, requires = "geodesic")]
    pub bridge: bool,
    /// Edge length for edge-list inputs.
    #[arg(long, value_enum, default_value_t = GraphMode::Hop)]
    pub graph: GraphMode,
    /// Divide each dissimilarity matrix by its off-diagonal mean.
    #[arg(long)]
    pub rescale_mean: bool,
    /// Use weights d_ij^(-e) instead of uniform 1/n^2.
    #[arg(long, value_name = "E")]
    pub weight_exponent: Option<f64>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct SolverArgs {
    /// Embedding dimension.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub dim: Option<u32>,
    /// Matching penalty.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Initial entropic regularisation.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Decay of the entropic regularisation per outer iteration.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Outer iterations.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub iters: Option<u32>,
    /// SMACOF iterations per outer iteration.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub inner_smacof: Option<u32>,
    /// Wasserstein Procrustes rounds per outer iteration.
    #[arg(long)]
    pub inner_wp: Option<u32>,
    /// Independent restarts; the lowest final objective wins.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub restarts: Option<u32>,
    /// Base seed (falls back to JOINTSCALE_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initialise the coupling with entropic Gromov-Wasserstein.
    #[arg(long)]
    pub gw_init: bool,
    /// Ramp the matching penalty up over the first half of the iterations.
    #[arg(long)]
    pub lambda_anneal: bool,
    /// JSON file with solver settings; flags take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct EmbedArgs {
    pub input: PathBuf,
    #[command(flatten)]
    pub format: FormatArgs,
    #[command(flatten)]
    pub prep: PrepArgs,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
    pub dim: u32,
    /// Maximum SMACOF iterations.
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u32).range(1..))]
    pub iters: u32,
    /// Stop once an iteration lowers the stress by less than this.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// Restart 0 starts from classical scaling, the others from seeded
    /// random coordinates.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub restarts: u32,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct MetricArgs {
    /// Class labels of the first dataset, one per line.
    #[arg(long)]
    pub labels1: Option<PathBuf>,
    /// Class labels of the second dataset.
    #[arg(long)]
    pub labels2: Option<PathBuf>,
    /// True correspondences as `i,j` lines.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Neighbours for label transfer.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
    pub knn: u32,
    /// Cut-off for top-k matching accuracy.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    pub topk: u32,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct JointArgs {
    pub input1: PathBuf,
    pub input2: PathBuf,
    #[command(flatten)]
    pub format: FormatArgs,
    #[command(flatten)]
    pub prep: PrepArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub metrics: MetricArgs,
    /// Write the coupling as `i,j,p` triplets.
    #[arg(long)]
    pub sparse_coupling: bool,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct MatchArgs {
    pub edges1: PathBuf,
    pub edges2: PathBuf,
    #[arg(long, value_enum, default_value_t = GraphMode::Hop)]
    pub graph: GraphMode,
    #[arg(long, default_value_t = 4.0, value_name = "E")]
    pub weight_exponent: f64,
    #[arg(long)]
    pub rescale_mean: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// True node correspondences as `i,j` lines.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    pub topk: u32,
    #[arg(long)]
    pub sparse_coupling: bool,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Embedding of the first dataset.
    #[arg(long)]
    pub z1: Option<PathBuf>,
    /// Embedding of the second dataset.
    #[arg(long)]
    pub z2: Option<PathBuf>,
    /// Coupling in dense or sparse layout.
    #[arg(long)]
    pub coupling: Option<PathBuf>,
    /// Dissimilarities of the first dataset (CSV), for RMSD-D.
    #[arg(long)]
    pub d1: Option<PathBuf>,
    /// Dissimilarities of the second dataset (CSV), for RMSD-D.
    #[arg(long)]
    pub d2: Option<PathBuf>,
    #[command(flatten)]
    pub metrics: MetricArgs,
    /// Also write metrics.json into this directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Bifurcation,
    SwissRoll,
    CircularFrustum,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value_t = DatasetKind::SwissRoll)]
    pub kind: DatasetKind,
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u32).range(1..))]
    pub n: u32,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u32).range(3..))]
    pub p1: u32,
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u32).range(3..))]
    pub p2: u32,
    /// Noise standard deviation relative to the projected features.
    #[arg(long, default_value_t = jointscale::synthdata::DEFAULT_NOISE_SIGMA)]
    pub noise: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}
