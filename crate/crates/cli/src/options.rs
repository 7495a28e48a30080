use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tag_core::calibrate::EntropySign;
use tag_core::config::{read_key_values, TrainConfig};
use tag_core::eval::PipelineConfig;
use tag_core::prompt::PlgOptions;
use tag_core::Error;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    Usage(String),
    /// Anything that went wrong while doing the work; exit code 1.
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        match err {
            Error::Config(message) => CliError::Usage(message),
            other => CliError::Runtime(other),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "tag",
    version,
    about = "Zero- and few-shot node classification on text-attributed graphs",
    after_help = FORMATS
)]
pub struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

const FORMATS: &str = "\
File formats:
  texts        JSON Lines, one {\"id\": <int>, \"text\": <string>} per node, ids 0..N-1
  labels       one label text per line; line k is class k
  label tokens JSON Lines {\"label\": <text>, \"tokens\": [..]} overriding whitespace tokenization
  edges        one \"src dst\" pair per line, 0-based; '#' comments allowed
  prior        header \"N<TAB>L\", then N rows of L space-separated log-scores
  predictions  one class index per line (ground truth uses the same format)
  config       key=value lines; command-line flags override the file";

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic planted-partition dataset.
    Synth(SynthArgs),
    /// Assemble the raw label-score matrix and write it as a prior file.
    Score(ScoreArgs),
    /// Predict with propagated, normalized prior logits.
    ZeroShot(ZeroShotArgs),
    /// Calibrate prior logits with K labeled nodes per class.
    FewShot(FewShotArgs),
    /// Score a predictions file against ground truth.
    Eval(EvalArgs),
    /// One-sided Mann-Whitney U test that sample A exceeds sample B.
    Significance(SignificanceArgs),
    /// Re-run the pipeline over a list of values for one parameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
#[command(after_help = FORMATS)]
pub struct SynthArgs {
    /// Directory receiving texts.jsonl, labels.txt, edges.txt and gt.txt.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub nodes_per_class: usize,
    #[arg(long, default_value_t = 0.3)]
    pub p_in: f64,
    #[arg(long, default_value_t = 0.02)]
    pub p_out: f64,
    /// Noise words added to every node text.
    #[arg(long, default_value_t = 12)]
    pub noise_words: usize,
    /// Non-keyword words in the shared noise pool.
    #[arg(long, default_value_t = 12)]
    pub filler_words: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(after_help = FORMATS)]
pub struct ScoreArgs {
    /// Node texts (JSON Lines).
    #[arg(long)]
    pub texts: PathBuf,
    /// Label texts, one per line.
    #[arg(long)]
    pub labels: PathBuf,
    /// Optional label tokenization (JSON Lines).
    #[arg(long)]
    pub label_tokens: Option<PathBuf>,
    /// mock, file:<path> or http:<url>.
    #[arg(long, default_value = "mock")]
    pub backend: String,
    /// Instruction placed before the mask tokens; empty for none.
    #[arg(long, default_value = "")]
    pub instruction: String,
    #[arg(long, default_value = "<mask>")]
    pub mask_token: String,
    /// Output prior file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Prior-logit stage flags shared by zero-shot, few-shot and sweep.
#[derive(Debug, Args)]
pub struct PlgArgs {
    /// Prior score file produced by `score`.
    #[arg(long)]
    pub prior: PathBuf,
    /// Edge list; required unless propagation is off.
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// Graph propagation steps [default: 10].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Skip graph propagation.
    #[arg(long)]
    pub no_prop: bool,
    /// Skip column normalization.
    #[arg(long)]
    pub no_norm: bool,
    /// key=value file; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled nodes per class [default: 3].
    #[arg(long)]
    pub k: Option<usize>,
    /// Repeats with seeds seed, seed+1, ... [default: 5].
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Base seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// MLP layers [default: 3].
    #[arg(long)]
    pub layers: Option<usize>,
    /// Hidden width [default: 16].
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Entropy term weight [default: 0.3].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Shrinkage coefficient [default: 0.9].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Ensemble size [default: 5].
    #[arg(long = "n-e")]
    pub n_e: Option<usize>,
    /// Adam learning rate [default: 0.01].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training epochs [default: 50].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Orientation of the entropy term [default: minimize].
    #[arg(long, value_enum)]
    pub entropy_sign: Option<SignArg>,
    /// Batch-norm epsilon [default: 1e-5].
    #[arg(long)]
    pub bn_eps: Option<f64>,
    /// Drop the identity connection to the prior logits.
    #[arg(long)]
    pub no_id: bool,
    /// Single model with no shrinkage instead of the ensemble.
    #[arg(long)]
    pub no_ens: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SignArg {
    Verbatim,
    Minimize,
}

impl From<SignArg> for EntropySign {
    fn from(s: SignArg) -> Self {
        match s {
            SignArg::Verbatim => EntropySign::Verbatim,
            SignArg::Minimize => EntropySign::Minimize,
        }
    }
}

#[derive(Debug, Args)]
#[command(after_help = FORMATS)]
pub struct ZeroShotArgs {
    #[command(flatten)]
    pub plg: PlgArgs,
    /// Ground truth; enables the metric report.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Predictions output file.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the metric report here.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(after_help = FORMATS)]
pub struct FewShotArgs {
    #[command(flatten)]
    pub plg: PlgArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Ground truth classes.
    #[arg(long)]
    pub gt: PathBuf,
    /// Predictions of the first repeat.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(after_help = FORMATS)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Node ids to evaluate, one per line (default: all).
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// Class count (default: largest class index seen + 1).
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Args)]
pub struct SignificanceArgs {
    /// Sample A, one number per line.
    #[arg(long)]
    pub a: PathBuf,
    /// Sample B, one number per line.
    #[arg(long)]
    pub b: PathBuf,
    /// auto is exact up to 12 pooled values, normal beyond.
    #[arg(long, value_enum, default_value_t = MethodArg::Auto)]
    pub method: MethodArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Steps,
    #[value(name = "n_e", alias = "n-e")]
    NE,
    Alpha,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TableFormat {
    Tsv,
    Json,
}

#[derive(Debug, Args)]
#[command(after_help = FORMATS)]
pub struct SweepArgs {
    #[command(flatten)]
    pub plg: PlgArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub gt: PathBuf,
    /// Parameter to vary.
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values, e.g. 0,1,5,10,20.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long, value_enum, default_value_t = TableFormat::Tsv)]
    pub format: TableFormat,
    /// Table output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Experiment settings after merging the config file and flags.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub pipeline: PipelineConfig,
    pub shots: usize,
    pub repeats: usize,
}

fn usage<E: std::fmt::Display>(key: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Usage(format!("invalid value for {key}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    value.parse().map_err(usage(key))
}

/// Merges `--config`, then flags, over the built-in defaults.
pub fn resolve(plg: &PlgArgs, train: Option<&TrainArgs>) -> CliResult<Resolved> {
    let mut opts = PlgOptions::default();
    let mut cfg = TrainConfig::default();
    let mut ensemble = true;
    let mut shots = 3;
    let mut repeats = 5;
    if let Some(path) = &plg.config {
        for entry in read_key_values(path)? {
            let (key, value) = (entry.key.as_str(), entry.value.as_str());
            match key {
                "steps" => opts.steps = value.parse().map_err(usage(key))?,
                "propagate" => opts.propagate = parse_bool(key, value)?,
                "normalize" => opts.normalize = parse_bool(key, value)?,
                "ensemble" => ensemble = parse_bool(key, value)?,
                "k" => shots = value.parse().map_err(usage(key))?,
                "repeats" => repeats = value.parse().map_err(usage(key))?,
                _ => {
                    if !cfg.apply(key, value)? {
                        return Err(CliError::Usage(format!(
                            "{}:{}: unknown config key {key:?}",
                            path.display(),
                            entry.line
                        )));
                    }
                }
            }
        }
    }
    if let Some(steps) = plg.steps {
        opts.steps = steps;
    }
    opts.propagate &= !plg.no_prop;
    opts.normalize &= !plg.no_norm;
    if let Some(t) = train {
        shots = t.k.unwrap_or(shots);
        repeats = t.repeats.unwrap_or(repeats);
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = t.$field { cfg.$field = v; } )* };
        }
        set!(seed, layers, hidden, lambda, alpha, n_e, lr, epochs, bn_eps);
        if let Some(sign) = t.entropy_sign {
            cfg.entropy_sign = sign.into();
        }
        cfg.identity &= !t.no_id;
        ensemble &= !t.no_ens;
    }
    cfg.validate()?;
    if repeats == 0 {
        return Err(CliError::Usage("repeats must be at least 1".into()));
    }
    Ok(Resolved {
        pipeline: PipelineConfig {
            plg: opts,
            train: cfg,
            ensemble,
        },
        shots,
        repeats,
    })
}
