use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lmrc::prompting::PromptMode;

mod commands;
mod config;
mod manifest;

use config::{BackendKind, EmbedderSpec, PipelineConfig};

/// Relation extraction with a candidate-pair proposer and an LLM
/// relation classifier.
#[derive(Parser, Debug)]
#[command(name = "lmrc", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override the matching config-file fields.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML pipeline config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    train: Option<PathBuf>,
    #[arg(long, global = true)]
    dev: Option<PathBuf>,
    #[arg(long, global = true)]
    test: Option<PathBuf>,
    /// Relation inventory (rel_info.json).
    #[arg(long, global = true)]
    relations: Option<PathBuf>,
    /// Proposal threshold used while training; `propose` takes `--tau`.
    #[arg(long, global = true)]
    na_threshold: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    max_steps: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr_encoder: Option<f64>,
    #[arg(long, global = true)]
    lr_head: Option<f64>,
    /// Entity pairs per prompt.
    #[arg(short, long, global = true)]
    k: Option<usize>,
    /// `baseline` or `rc`.
    #[arg(long, global = true)]
    mode: Option<PromptMode>,
    #[arg(long, global = true)]
    n_shots: Option<usize>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long, global = true)]
    api_base: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Maximum requests started per second.
    #[arg(long, global = true)]
    rate: Option<f64>,
    #[arg(long, global = true)]
    max_tokens: Option<u32>,
    #[arg(long, global = true)]
    drop_rate: Option<f64>,
    #[arg(long, global = true)]
    corrupt_rate: Option<f64>,
    #[arg(long, global = true)]
    fuzzy_threshold: Option<f64>,
    /// Cosine threshold for aligning out-of-domain relations.
    #[arg(long, global = true)]
    theta: Option<f64>,
    /// Use precomputed relation embeddings from this JSONL table.
    #[arg(long, global = true)]
    embedding_table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the candidate proposal model.
    TrainRcp,
    /// Score candidate pairs and write the proposals file.
    Propose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dev")]
        split: Split,
        /// Proposal threshold in [0, 1]; defaults to the checkpoint's.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Prompt the backend for relations of proposed pairs.
    RunRc {
        #[arg(long, value_enum, default_value = "dev")]
        split: Split,
        #[arg(long, conflicts_with = "gold_pairs")]
        proposals: Option<PathBuf>,
        /// Use the gold relation-bearing pairs instead of proposals.
        #[arg(long)]
        gold_pairs: bool,
        /// Discard the response ledger instead of resuming from it.
        #[arg(long)]
        fresh: bool,
    },
    /// Align responses to the document and score them against gold.
    Score {
        #[arg(long, value_enum, default_value = "dev")]
        split: Split,
        #[arg(long)]
        responses: Option<PathBuf>,
    },
    /// Write prompt/completion pairs for fine-tuning.
    ExportFt {
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        /// Restrict relation-classification records to these pairs.
        #[arg(long)]
        proposals: Option<PathBuf>,
    },
    /// Score the responses at each out-of-domain alignment threshold.
    SweepTheta {
        #[arg(long, value_enum, default_value = "dev")]
        split: Split,
        #[arg(long)]
        responses: Option<PathBuf>,
        /// Comma-separated ascending thresholds; defaults to 0, 0.05, ..., 1.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Candidate-space statistics for every configured split.
    Stats,
    /// Write a small synthetic corpus and a matching config.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 40)]
        train_docs: usize,
        #[arg(long, default_value_t = 20)]
        eval_docs: usize,
    },
}

impl Overrides {
    fn apply(&self, c: &mut PipelineConfig) {
        macro_rules! set {
            ($flag:ident => $field:expr) => {
                if let Some(v) = &self.$flag {
                    $field = v.clone();
                }
            };
            ($flag:ident => some $field:expr) => {
                if let Some(v) = &self.$flag {
                    $field = Some(v.clone());
                }
            };
        }
        set!(seed => c.seed);
        set!(output_dir => c.output_dir);
        set!(train => some c.corpus.train);
        set!(dev => some c.corpus.dev);
        set!(test => some c.corpus.test);
        set!(relations => some c.corpus.relations);
        set!(na_threshold => c.rcp.na_threshold);
        set!(epochs => c.rcp.epochs);
        set!(max_steps => some c.rcp.max_steps);
        set!(batch_size => c.rcp.batch_size);
        set!(lr_encoder => c.rcp.lr_encoder);
        set!(lr_head => c.rcp.lr_head);
        set!(k => c.prompt.k);
        set!(mode => c.prompt.mode);
        set!(n_shots => c.prompt.n_shots);
        set!(backend => c.backend.kind);
        set!(api_base => c.backend.http.api_base);
        set!(model => c.backend.http.model);
        set!(parallelism => c.backend.parallelism);
        set!(rate => some c.backend.rate_per_second);
        set!(max_tokens => c.backend.max_tokens);
        set!(drop_rate => c.backend.mock.drop_rate);
        set!(corrupt_rate => c.backend.mock.corrupt_rate);
        set!(fuzzy_threshold => c.alignment.fuzzy_threshold);
        set!(theta => some c.alignment.theta);
        if let Some(p) = &self.embedding_table {
            c.embedder = EmbedderSpec::Table { path: p.clone() };
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
