use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use snows::pipeline::data::Encoding;
use snows::pipeline::{MaskSpec, Method};

#[derive(Debug, Parser)]
#[command(name = "snows", version = crate::VERSION, about = "One-shot pruning with K-step reconstruction and Hessian-free Newton")]
pub struct Cli {
    /// Worker threads (default: all cores); 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print the resolved configuration as JSON and exit without running.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prune every prunable layer of a network.
    Prune(PruneArgs),
    /// Accuracy and per-layer reconstruction losses of a checkpoint.
    Eval(EvalArgs),
    /// Run one ablation study and write its CSVs.
    Ablate(AblateArgs),
    /// Run oracle suites and print a pass/fail table.
    Oracle(OracleArgs),
    /// Write a seeded synthetic classification dataset as binary records.
    GenData(GenDataArgs),
    /// Build, initialize and optionally train a model from the zoo.
    InitModel(InitModelArgs),
}

#[derive(Debug, Args)]
pub struct DataFlags {
    /// Binary record file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub data_encoding: Option<EncodingArg>,
    /// 1, or 2 when a coarse label precedes the class byte.
    #[arg(long)]
    pub label_bytes: Option<usize>,
    /// Number of classes (default: the network's output width).
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncodingArg {
    U8,
    F32,
}

impl From<EncodingArg> for Encoding {
    fn from(e: EncodingArg) -> Self {
        match e {
            EncodingArg::U8 => Encoding::U8,
            EncodingArg::F32 => Encoding::F32,
        }
    }
}

#[derive(Debug, Args)]
pub struct SolverFlags {
    /// Levenberg-Marquardt damping.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub cg_tol: Option<f64>,
    #[arg(long)]
    pub cg_max_iters: Option<usize>,
    /// Finite-difference HVP step; 0 selects exact products.
    #[arg(long)]
    pub eps_fd: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Damping escalations (x10 each) before a batch is skipped.
    #[arg(long)]
    pub lambda_retries: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Dense checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long)]
    pub k: Option<usize>,
    /// unstructured:S | nm:N:M | import:PATH
    #[arg(long)]
    pub mask: Option<MaskSpec>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[command(flatten)]
    pub solver: SolverFlags,
    #[arg(long)]
    pub calib_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Partial checkpoint from a failed run; its masked layers are kept.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Snows,
    Magnitude,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Snows => Method::Snows,
            MethodArg::Magnitude => Method::Magnitude,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dense checkpoint for reconstruction losses and the accuracy delta.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long)]
    pub k: Option<usize>,
    /// Samples used for reconstruction losses.
    #[arg(long)]
    pub calib_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StudyArg {
    KSweep,
    CgIters,
    SgdVsNewton,
    FisherVsNewton,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub study: Option<StudyArg>,
    /// Without a manifest the toy CNN bench is trained and used.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataFlags,
    /// Layer for single-layer studies (default: the first).
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated K values for k-sweep.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Comma-separated CG caps for cg-iters.
    #[arg(long, value_delimiter = ',')]
    pub cg_iters: Option<Vec<usize>>,
    /// Comma-separated SGD learning rates.
    #[arg(long, value_delimiter = ',')]
    pub lrs: Option<Vec<f64>>,
    #[arg(long)]
    pub sgd_steps: Option<usize>,
    #[arg(long)]
    pub sgd_batch_size: Option<usize>,
    #[arg(long)]
    pub mask: Option<MaskSpec>,
    #[command(flatten)]
    pub solver: SolverFlags,
    #[arg(long)]
    pub calib_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Hvp,
    Cg,
    K0,
    ToyQuadratic,
    Gradients,
    Invariants,
    All,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: SuiteArg,
    /// Also write the checks as JSON into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Comma-separated feature shape, e.g. 4,8,8.
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub data_encoding: Option<EncodingArg>,
    /// Output record file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Samples held out from the same draw into --test-out.
    #[arg(long)]
    pub test_samples: Option<usize>,
    #[arg(long)]
    pub test_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Mlp,
    Cnn,
    Resnet,
}

#[derive(Debug, Args)]
pub struct InitModelArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub arch: Option<ArchArg>,
    /// Comma-separated input shape: (c,h,w) for conv nets, (d) for the MLP.
    #[arg(long, value_delimiter = ',')]
    pub input: Option<Vec<usize>>,
    /// Channels of the first conv layer.
    #[arg(long)]
    pub width: Option<usize>,
    /// Comma-separated hidden widths of the MLP.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on this record file after initialization.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub data_encoding: Option<EncodingArg>,
    #[arg(long)]
    pub label_bytes: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
