mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::ConfigError;

#[derive(Parser)]
#[command(name = "hrm", version, about = "Train, decode and analyze hierarchical recurrent language models")]
struct Cli {
    /// Root for run directories [default: $HRM_OUTPUT_ROOT, else ./runs]
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Run directory name [default: command plus a digest of its inputs]
    #[arg(long, global = true)]
    run_name: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level BPE tokenizer on plain-text files (one document per line)
    TokenizerTrain(TokenizerTrainArgs),
    /// Strip reasoning spans and build a capped, upsampled training mixture
    MixtureBuild(MixtureBuildArgs),
    /// Train a model and write metrics, checkpoints and an evaluation summary
    Train(TrainArgs),
    /// Greedy decoding from a checkpoint, optionally with auto-guidance
    Decode(DecodeArgs),
    /// Block-diff norms, cosines, logit-lens KL and attention entropy
    AnalyzeDepth(AnalyzeDepthArgs),
    /// Gradient magnitude statistics and Jacobian growth
    AnalyzeGrads(AnalyzeGradsArgs),
    /// Training FLOPs estimate (prints only)
    Flops(FlopsArgs),
    /// n-gram contamination of an evaluation set and the four-subset test
    Contamination(ContaminationArgs),
}

#[derive(Args)]
pub struct TokenizerTrainArgs {
    /// Plain-text files, one document per line
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Target vocabulary size, special tokens and bytes included
    #[arg(long)]
    pub vocab_size: usize,
}

#[derive(Args)]
pub struct MixtureBuildArgs {
    /// TOML run configuration; only the mixture section is used
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSONL document files
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML run configuration [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`; also seeds initialization and synthetic data
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.total_steps`
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Weights {
    Ema,
    Raw,
}

#[derive(Args)]
pub struct CheckpointArgs {
    /// Checkpoint file written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Which parameter set of the checkpoint to use
    #[arg(long, value_enum, default_value_t = Weights::Ema)]
    pub weights: Weights,
}

#[derive(Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    /// TOML run configuration [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prompt as whitespace-separated token ids
    #[arg(long, conflicts_with = "prompt")]
    pub tokens: Option<String>,
    /// Prompt text, encoded with --tokenizer after the condition tag
    #[arg(long, requires = "tokenizer")]
    pub prompt: Option<String>,
    /// Tokenizer file written by `tokenizer-train`
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Condition tag for --prompt: direct, cot, synth or noisy
    #[arg(long, default_value = "direct")]
    pub condition: String,
    /// Overrides `decode.guidance_scale`
    #[arg(long, allow_hyphen_values = true)]
    pub guidance: Option<f64>,
    /// Overrides `decode.max_new_tokens`
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Sites {
    AllSteps,
    HExits,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Direction {
    ProbeToFinal,
    FinalToProbe,
}

#[derive(Args)]
pub struct AnalyzeDepthArgs {
    /// One or more checkpoints; each gets its own report
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    /// Which parameter set of each checkpoint to use
    #[arg(long, value_enum, default_value_t = Weights::Ema)]
    pub weights: Weights,
    /// Run configuration whose data section supplies the probe samples
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Held-out sequences averaged per report
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Probe every module step or only the H-module exits
    #[arg(long, value_enum, default_value_t = Sites::AllSteps)]
    pub sites: Sites,
    /// KL(probe || final) or KL(final || probe)
    #[arg(long, value_enum, default_value_t = Direction::ProbeToFinal)]
    pub kl_direction: Direction,
    /// Standard models: consecutive blocks merged into one probe site
    #[arg(long, default_value_t = 1)]
    pub blocks_per_probe: usize,
    /// Evaluate with a causal mask instead of the prefix mask
    #[arg(long)]
    pub causal: bool,
    /// Keep only these metrics (block_diff_norm, block_cosine, logit_lens_kl, attention_entropy)
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
}

#[derive(Args)]
pub struct AnalyzeGradsArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    /// TOML run configuration [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Held-out sequences in the gradient batch
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    /// Gradient horizon K [default: train.k_end]
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Upper quantile for the tail-to-median ratio
    #[arg(long, default_value_t = hrm_core::diagnostics::DEFAULT_TAIL_QUANTILE)]
    pub tail_quantile: f64,
    /// Magnitude floor added before taking logs
    #[arg(long, default_value_t = hrm_core::diagnostics::DEFAULT_EPS_G)]
    pub eps: f64,
    /// Composed module applications for the Jacobian growth probe (0 skips it)
    #[arg(long, default_value_t = 0)]
    pub jacobian_depth: usize,
}

#[derive(Args)]
pub struct FlopsArgs {
    /// Parameter count N (core parameters for recurrent models)
    #[arg(long)]
    pub params: Option<f64>,
    /// Training tokens D
    #[arg(long)]
    pub tokens: f64,
    /// Dense estimate 6·N·D
    #[arg(long)]
    pub dense: bool,
    /// Forward step equivalents
    #[arg(long, requires = "bwd")]
    pub fwd: Option<f64>,
    /// Backward step equivalents
    #[arg(long, requires = "fwd")]
    pub bwd: Option<f64>,
    /// Take N and the step equivalents from a model config
    #[arg(long, conflicts_with_all = ["fwd", "dense"])]
    pub config: Option<PathBuf>,
    /// Gradient horizon for --config [default: train.k_end]
    #[arg(long, requires = "config")]
    pub horizon: Option<usize>,
}

#[derive(Args)]
pub struct ContaminationArgs {
    /// Training corpus, one document per line
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Evaluation samples, `score<TAB>text` per line
    #[arg(long)]
    pub eval: PathBuf,
    /// n-gram length
    #[arg(long, default_value_t = 13)]
    pub n: usize,
    /// BPE tokenizer; whitespace words are used without one
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let ctx = commands::Context {
        out_dir: cli.out_dir,
        run_name: cli.run_name,
    };
    let result = match cli.command {
        Command::TokenizerTrain(a) => commands::tokenizer_train(&ctx, a),
        Command::MixtureBuild(a) => commands::mixture_build(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Decode(a) => commands::decode(&ctx, a),
        Command::AnalyzeDepth(a) => commands::analyze_depth(&ctx, a),
        Command::AnalyzeGrads(a) => commands::analyze_grads(&ctx, a),
        Command::Flops(a) => commands::flops(a),
        Command::Contamination(a) => commands::contamination(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
