mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use knnfuse::config::KvConfig;

/// Catalog memories, retrieval indexes and KNN-fusion encoder experiments.
#[derive(Debug, Parser)]
#[command(name = "knnfuse", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// `key = value` config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for relative output paths.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Default for every component seed not set explicitly.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build or inspect key/value memories.
    #[command(subcommand)]
    Catalog(CatalogCmd),
    /// Build, query and benchmark approximate indexes.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Generate a synthetic rare-token dataset.
    Data(DataArgs),
    /// Train an encoder on a dataset.
    Train(TrainArgs),
    /// Evaluate a trained encoder against one memory.
    Eval(EvalArgs),
    /// Evaluate across test-catalog overlap levels.
    Sweep(SweepArgs),
    /// Train and evaluate one encoder per fusion-site set.
    Ablate(AblateArgs),
    /// Evaluate a fixed checkpoint against a stale and a replacement memory.
    Swap(SwapArgs),
    /// Finite-difference check of the fusion layer gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Subcommand)]
pub enum CatalogCmd {
    /// Embed a text catalog into a memory file.
    Build(CatalogBuildArgs),
    /// Pair precomputed key and value vectors into a memory file.
    Ingest(CatalogIngestArgs),
    /// Concatenate two memories, renumbering colliding ids.
    Merge(CatalogMergeArgs),
    /// Print record count, widths and key-norm statistics.
    Stats(CatalogStatsArgs),
}

#[derive(Debug, Args)]
pub struct CatalogBuildArgs {
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub d_key: Option<usize>,
    #[arg(long)]
    pub voices: Option<usize>,
    /// Defaults to every voice.
    #[arg(long)]
    pub voices_per_entry: Option<usize>,
    #[arg(long)]
    pub frames_per_char: Option<usize>,
    /// `onehot`, `pretrained` or `imported`.
    #[arg(long)]
    pub values: Option<String>,
    #[arg(long)]
    pub table_size: Option<usize>,
    #[arg(long)]
    pub d_value: Option<usize>,
    /// Token vectors (`pretrained`) or per-entry vectors (`imported`).
    #[arg(long)]
    pub vectors: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CatalogIngestArgs {
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub keys: PathBuf,
    #[arg(long)]
    pub values: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CatalogMergeArgs {
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CatalogStatsArgs {
    #[arg(long)]
    pub memory: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum IndexCmd {
    Build(IndexBuildArgs),
    /// Top-m neighbours per query as TSV.
    Query(IndexQueryArgs),
    /// Latency, distance computations and optionally recall.
    Bench(IndexBenchArgs),
}

#[derive(Debug, Args)]
pub struct IndexBuildArgs {
    #[arg(long)]
    pub memory: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_subspaces: Option<usize>,
    /// HNSW max degree.
    #[arg(long)]
    pub hnsw_m: Option<usize>,
    #[arg(long)]
    pub ef_construction: Option<usize>,
    #[arg(long)]
    pub centroids: Option<usize>,
    #[arg(long)]
    pub opq_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IndexQueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// `id<TAB>v1,v2,...` lines.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub ef: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IndexBenchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// CSV report.
    #[arg(long)]
    pub out: PathBuf,
    /// Memory the index was built over; needed for `--with-oracle`.
    #[arg(long)]
    pub memory: Option<PathBuf>,
    /// Add recall@m against the exact search and the exact-scan baseline.
    #[arg(long)]
    pub with_oracle: bool,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub ef: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub train_utts: Option<usize>,
    #[arg(long)]
    pub test_utts: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV loss trace; defaults to `<out>.csv`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Training memory; defaults to one built from the training catalog.
    #[arg(long)]
    pub memory: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Comma-separated 1-based block indices; empty for none.
    #[arg(long)]
    pub sites: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// CSV report.
    #[arg(long)]
    pub out: PathBuf,
    /// Memory file; without it a test catalog is built at `--overlap`.
    #[arg(long, conflicts_with = "overlap")]
    pub memory: Option<PathBuf>,
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Retrieve with the exact search instead of the approximate index.
    #[arg(long)]
    pub exact: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated overlap values; defaults to 0.0, 0.1, ..., 1.0.
    #[arg(long)]
    pub grid: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `;`-separated site sets, e.g. `none;1;3;2,5;all`.
    #[arg(long)]
    pub site_sets: Option<String>,
    /// Overlap of the evaluation catalog.
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SwapArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stale memory file; defaults to a test catalog at `--stale-overlap`.
    #[arg(long)]
    pub stale: Option<PathBuf>,
    /// Replacement memory file; defaults to a test catalog at `--new-overlap`.
    #[arg(long)]
    pub new: Option<PathBuf>,
    #[arg(long)]
    pub stale_overlap: Option<f64>,
    #[arg(long)]
    pub new_overlap: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub n_ctx: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_key: Option<usize>,
    #[arg(long)]
    pub d_value: Option<usize>,
    /// Draw a random small shape from the seed instead.
    #[arg(long)]
    pub random_shape: bool,
    /// Optional CSV report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Perturb one analytic gradient group (negative control).
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

/// Flags that were given, as config entries.
pub(crate) struct Flags(pub KvConfig);

impl Flags {
    pub fn new(global: &Global) -> Self {
        let mut f = Flags(KvConfig::new());
        f.set("seed", global.seed);
        f
    }

    pub fn set<T: std::fmt::Display>(&mut self, key: &str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.set(key, v);
        }
        self
    }
}

const EXIT_INPUT: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_INCOMPATIBLE: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    use knnfuse::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Format(_) | E::Corruption(_)) => EXIT_FORMAT,
        Some(E::Shape(_)) => EXIT_INCOMPATIBLE,
        Some(E::Training { .. }) => 1,
        _ => EXIT_INPUT,
    }
}

/// The error chain joined by `: `, skipping causes whose text the previous
/// message already ends with.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("KNNFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| knnfuse::Error::InvalidArgument(format!("KNNFUSE_THREADS must be a count, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| commands::dispatch(&cli.global, cli.cmd));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
