mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use voxgraph::encoder::{Profile, Task};
use voxgraph::KnnRule;

#[derive(Parser, Debug)]
#[command(name = "voxgraph", version, about = "Supervoxel graph pipeline: phantoms, preprocessing, training, evaluation")]
struct Cli {
    /// Worker threads for per-volume parallel work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic multi-modal phantom volumes (.mmv).
    Phantom(PhantomArgs),
    /// Convert .mmv volumes into supervoxel graphs (.svg2).
    Preprocess(PreprocessArgs),
    /// Train a model on a directory of graphs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a directory of graphs.
    Eval(EvalArgs),
    /// Print parameter counts per component.
    ParamsReport(ParamsArgs),
    /// Dump patch-level and graph-level attention weights for one graph.
    ExportAttention(AttentionArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Grid size as `N` or `NXxNYxNZ`.
    #[arg(long, default_value = "48", value_parser = parse_dims)]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Lesions per volume.
    #[arg(long, default_value_t = 2)]
    pub lesions: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Volume `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value = "phantoms")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// .mmv files or directories containing them.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "graphs")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n_sv: usize,
    #[arg(long, default_value_t = 0.1)]
    pub compactness: f64,
    #[arg(long = "knn", default_value_t = 8)]
    pub k_nn: usize,
    #[arg(long, value_enum, default_value_t = RuleArg::Mutual)]
    pub rule: RuleArg,
    #[arg(long, default_value_t = 8)]
    pub k_pe: usize,
    #[arg(long, default_value_t = 16)]
    pub n_patch: usize,
    #[arg(long, default_value_t = 24)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 0.15)]
    pub tau_cls: f64,
    #[arg(long, default_value = "T1")]
    pub reference_modality: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// JSON file whose keys override the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of .svg2 graphs.
    #[arg(long, default_value = "graphs")]
    pub graphs: PathBuf,
    /// JSON `{"train": [...], "test": [...]}` of graph names; without it
    /// every graph in the directory is used for training.
    #[arg(long)]
    pub split_manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TaskArg::Reg)]
    pub task: TaskArg,
    #[arg(long, value_enum, default_value_t = ProfileArg::Toy)]
    pub profile: ProfileArg,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Defaults to the profile's epoch budget.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub accum_steps: Option<usize>,
    /// Evaluate the test split every this many epochs (0 = never).
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    /// JSON file whose keys override the training flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON file whose keys override the model profile.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
    /// Line-delimited JSON metric log.
    #[arg(long, default_value = "train_log.jsonl")]
    pub log: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, default_value = "model.ckpt")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "graphs")]
    pub graphs: PathBuf,
    /// Evaluate the manifest's `test` list instead of the whole directory.
    #[arg(long)]
    pub split_manifest: Option<PathBuf>,
    /// Also compute voxel-level Dice; needs the source volumes.
    #[arg(long)]
    pub with_dice: bool,
    #[arg(long, default_value_t = 0.04)]
    pub tau_dice: f64,
    /// Directory with the source .mmv volumes (for --with-dice).
    #[arg(long, default_value = "phantoms")]
    pub volumes: PathBuf,
    /// Report destination; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-node predictions as line-delimited JSON.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long, value_enum, default_value_t = ProfileArg::Toy)]
    pub profile: ProfileArg,
    #[arg(long, value_enum, default_value_t = TaskArg::Reg)]
    pub task: TaskArg,
    #[arg(long, default_value_t = 4)]
    pub n_modalities: usize,
    #[arg(long, default_value_t = 24)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 8)]
    pub k_pe: usize,
    /// JSON file whose keys override the profile.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttentionArgs {
    #[arg(long, default_value = "model.ckpt")]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value = "attention.json")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Reg,
    Cls,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Reg => Task::Regression,
            TaskArg::Cls => Task::Classification,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProfileArg {
    Toy,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Toy => Profile::Toy,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RuleArg {
    Mutual,
    Union,
}

impl From<RuleArg> for KnnRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Mutual => KnnRule::Mutual,
            RuleArg::Union => KnnRule::Union,
        }
    }
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X', ',']).collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad dimension {p:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    match nums[..] {
        [n] => Ok([n; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err(format!("expected N or NXxNYxNZ, got {s:?}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match &cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::ParamsReport(a) => commands::params_report(a),
        Command::ExportAttention(a) => commands::export_attention(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
