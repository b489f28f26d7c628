mod commands;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hsenet::error::Result;
use hsenet::Config;

use commands::Ctx;

/// Hybrid spatial encoding pipeline for 3D volumes and paired reports.
///
/// Configuration comes from `--config` (a `key = value` file) or a named
/// `--preset`, then `HSENET_<KEY>` environment variables override single
/// keys. Every run writes into `<run-root>/<config hash>-<UTC timestamp>`.
#[derive(Debug, Parser)]
#[command(name = "hsenet", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Configuration file in `key = value` form.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset: `desk` or `paper`.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    run_root: PathBuf,
    /// Validate the configuration and inputs, then stop.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Load checkpoints written under a different configuration.
    #[arg(long, global = true)]
    allow_config_mismatch: bool,
}

#[derive(Debug, Args)]
struct CorpusArg {
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    /// Checkpoint from the preceding stage.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom corpus.
    GenData {
        /// Output directory (default: `corpus` inside the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of samples (default: `corpus_size`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Contrastive pretraining of the 3D ViT and text encoder.
    PretrainStage1(CorpusArg),
    /// 2E3 pretraining against a frozen stage-1 checkpoint.
    PretrainStage2(TrainArgs),
    /// Report-generation tuning from a stage-2 checkpoint.
    FinetuneReport(TrainArgs),
    /// Location-question tuning from a stage-2 or report checkpoint.
    FinetuneVqa(TrainArgs),
    /// Volume-to-report retrieval; without a checkpoint scores an untrained encoder.
    EvalRetrieval(TrainArgs),
    /// BLEU, ROUGE and METEOR of a report checkpoint on the held-out split.
    EvalGeneration(TrainArgs),
    /// Major and minor region accuracy of a VQA checkpoint.
    EvalVqa(TrainArgs),
    /// Token counts for a list of packer strides.
    StrideSweep {
        /// Patch grid (default: 8,16,16 for the default strides, else the configured grid).
        #[arg(long, value_parser = commands::parse_triple)]
        grid: Option<[usize; 3]>,
        /// Stride triples such as `8,4,4`; repeatable (default: 8,2,2 4,4,4 8,4,4 4,8,8).
        #[arg(long = "strides", value_parser = commands::parse_triple)]
        strides: Vec<[usize; 3]>,
    },
    /// Per-patch 2E3 scores for one sample.
    DumpScores {
        #[command(flatten)]
        args: TrainArgs,
        /// Sample id.
        #[arg(long)]
        id: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::PretrainStage1(_) => "pretrain-stage1",
            Command::PretrainStage2(_) => "pretrain-stage2",
            Command::FinetuneReport(_) => "finetune-report",
            Command::FinetuneVqa(_) => "finetune-vqa",
            Command::EvalRetrieval(_) => "eval-retrieval",
            Command::EvalGeneration(_) => "eval-generation",
            Command::EvalVqa(_) => "eval-vqa",
            Command::StrideSweep { .. } => "stride-sweep",
            Command::DumpScores { .. } => "dump-scores",
        }
    }
}

fn resolve_config(g: &Global) -> Result<Config> {
    let mut cfg = match (&g.config, &g.preset) {
        (Some(path), _) => Config::load(path)?,
        (None, Some(name)) => Config::preset(name)?,
        (None, None) => Config::desk(),
    };
    cfg.apply_env(std::env::vars())?;
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<Option<PathBuf>> {
    let cfg = resolve_config(&cli.global)?;
    if cfg.deterministic && std::env::var_os("RAYON_NUM_THREADS").is_none() {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let ctx = Ctx {
        cfg,
        command: cli.command.name().to_string(),
        argv: std::env::args().skip(1).collect(),
        run_root: cli.global.run_root.clone(),
        dry_run: cli.global.dry_run,
        allow_mismatch: cli.global.allow_config_mismatch,
    };
    let ck = |a: &TrainArgs| a.checkpoint.clone();
    match &cli.command {
        Command::GenData { out, n } => commands::gen_data(&ctx, out.as_deref(), *n),
        Command::PretrainStage1(c) => commands::pretrain_stage1(&ctx, &c.corpus),
        Command::PretrainStage2(a) => commands::pretrain_stage2(&ctx, &a.corpus.corpus, ck(a).as_deref()),
        Command::FinetuneReport(a) => commands::finetune_report(&ctx, &a.corpus.corpus, ck(a).as_deref()),
        Command::FinetuneVqa(a) => commands::finetune_vqa(&ctx, &a.corpus.corpus, ck(a).as_deref()),
        Command::EvalRetrieval(a) => commands::eval_retrieval(&ctx, &a.corpus.corpus, ck(a).as_deref()),
        Command::EvalGeneration(a) => commands::eval_generation(&ctx, &a.corpus.corpus, ck(a).as_deref()),
        Command::EvalVqa(a) => commands::eval_vqa(&ctx, &a.corpus.corpus, ck(a).as_deref()),
        Command::StrideSweep { grid, strides } => commands::stride_sweep_cmd(&ctx, *grid, strides),
        Command::DumpScores { args, id } => {
            commands::dump_scores_cmd(&ctx, &args.corpus.corpus, args.checkpoint.as_deref().map(Path::new), id)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
