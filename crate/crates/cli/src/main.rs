//! `pine`: generation, mode comparison, invariance suites, bias scans and
//! overhead benchmarks over seeded or saved models.
//!
//! Exit codes: 0 success, 1 usage error, 2 model or prompt I/O error,
//! 3 an invariance or flatness assertion failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use pine_core::harness::{
    cmd_bench, cmd_bias_scan, cmd_compare, cmd_invariance, cmd_run, harness_tokenizer, BiasScanConfig,
    InvarianceOptions, ModelSource, RunReport,
};
use pine_core::model::{init_random, save_weights, Model, ModelConfig};
use pine_core::modes::{build_mask, Aggregation, AttentionMode, Variant};
use pine_core::prompt::{parse_prompt_file, SegmentedPrompt};
use pine_core::Error;

/// Environment variable capping the number of worker threads.
const THREADS_ENV: &str = "PINE_NUM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "pine", version, about = "Position-invariant inference over interchangeable documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Weight container. Without it, weights are drawn from --seed.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Model config (TOML). Defaults to the built-in tiny config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for random weights when --model is absent.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Reduce attention keys in assigned-position order.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    canonical_reduction: bool,
    /// Write a JSON report here.
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModeArgs {
    /// Comma-separated: vanilla, nia, pcw, sp, pine, pine_noreassign, pine_reverse.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<Variant>,
    /// Document-importance pooling for PINE modes: mean, sum or max.
    #[arg(long, default_value = "mean")]
    aggregation: Aggregation,
}

impl ModeArgs {
    fn modes(&self, default: &[Variant]) -> Vec<AttentionMode> {
        let chosen = if self.mode.is_empty() { default } else { &self.mode };
        chosen
            .iter()
            .map(|&v| AttentionMode::new(v).with_aggregation(self.aggregation))
            .collect()
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded random model and its config to disk.
    Init {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        out_config: PathBuf,
    },
    /// Greedy generation in one mode.
    Run {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        modes: ModeArgs,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long, default_value_t = 32)]
        max_new_tokens: usize,
        /// Write per-layer, per-head document importance (TSV).
        #[arg(long)]
        importance_out: Option<PathBuf>,
        /// Write the prompt's visibility mask as a 0/1 matrix.
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// The same prompt under several modes.
    Compare {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        modes: ModeArgs,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long, default_value_t = 16)]
        max_new_tokens: usize,
    },
    /// Generate under every document order and check for drift.
    Invariance {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        modes: ModeArgs,
        #[arg(long)]
        prompt: PathBuf,
        /// Most document orders to run; larger k is sampled.
        #[arg(long, default_value_t = 24)]
        limit: usize,
        #[arg(long, default_value_t = 16)]
        max_new_tokens: usize,
        /// Seed for sampling document orders.
        #[arg(long, default_value_t = 0)]
        order_seed: u64,
    },
    /// Sweep a needle document through every slot.
    BiasScan {
        #[command(flatten)]
        model: ModelArgs,
        /// Overrides the scan file's mode list.
        #[command(flatten)]
        modes: ModeArgs,
        /// Scan definition (JSON).
        #[arg(long)]
        scan: PathBuf,
    },
    /// Wall time per mode and comparator counts per k.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        modes: ModeArgs,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 8)]
        max_new_tokens: usize,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Io(String),
    Assertion(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Io(_) => 2,
            Failure::Assertion(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Permutation(_) | Error::Pattern(_) => Failure::Usage(e.to_string()),
            other => Failure::Io(other.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn source(args: &ModelArgs) -> Result<ModelSource, Failure> {
    match (&args.model, &args.config) {
        (Some(model), Some(config)) => Ok(ModelSource::Files { model: model.clone(), config: config.clone() }),
        (Some(_), None) => Err(Failure::Usage("--model needs --config".into())),
        (None, config) => {
            let config = match config {
                Some(path) => ModelConfig::load(path)?,
                None => ModelConfig::tiny(),
            };
            Ok(ModelSource::Random { config, seed: args.seed })
        }
    }
}

fn load(args: &ModelArgs) -> Result<Model, Failure> {
    Ok(source(args)?.load(args.canonical_reduction)?)
}

fn read_prompt(path: &Path) -> Result<SegmentedPrompt, Failure> {
    parse_prompt_file(path).map_err(|e| match Failure::from(e) {
        Failure::Io(m) => Failure::Io(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn finish(args: &ModelArgs, report: &RunReport) -> CliResult {
    match &args.report_out {
        Some(path) => report.write(path).map_err(Failure::from),
        None => Ok(()),
    }
}

fn single_mode(modes: &ModeArgs) -> Result<AttentionMode, Failure> {
    match modes.modes(&[Variant::Pine]).as_slice() {
        [one] => Ok(*one),
        _ => Err(Failure::Usage("run takes exactly one --mode".into())),
    }
}

fn execute(cli: Cli) -> CliResult {
    match cli.command {
        Command::Init { model, out_model, out_config } => {
            if model.model.is_some() {
                return Err(Failure::Usage("init writes a model; drop --model".into()));
            }
            let config = match &model.config {
                Some(path) => ModelConfig::load(path)?,
                None => ModelConfig::tiny(),
            };
            let weights = init_random(&config, model.seed)?;
            save_weights(&out_model, &weights)?;
            config.save(&out_config)?;
            println!("{}", weights.fingerprint());
            Ok(())
        }
        Command::Run { model: margs, modes, prompt, max_new_tokens, importance_out, mask_out } => {
            let mode = single_mode(&modes)?;
            let model = load(&margs)?;
            let prompt = read_prompt(&prompt)?;
            let out = cmd_run(&model, &prompt, mode, max_new_tokens)?;
            println!("{}", out.text);
            if importance_out.is_some() || mask_out.is_some() {
                let (tokens, layout) = harness_tokenizer().tokenize(&prompt);
                if let Some(path) = importance_out {
                    let (_, _, table) = model.prefill_with_trace(&tokens, &layout, mode)?;
                    write_text(&path, &table.to_tsv())?;
                }
                if let Some(path) = mask_out {
                    write_text(&path, &build_mask(mode, &layout).to_text())?;
                }
            }
            finish(&margs, &out.report)
        }
        Command::Compare { model: margs, modes, prompt, max_new_tokens } => {
            let model = load(&margs)?;
            let prompt = read_prompt(&prompt)?;
            let (rows, report) = cmd_compare(&model, &prompt, &modes.modes(&Variant::ALL), max_new_tokens)?;
            println!("mode\tmax_abs_logit_diff_vs_vanilla\ttext");
            for r in &rows {
                println!("{}\t{:.6e}\t{:?}", r.mode, r.max_abs_logit_diff_vs_vanilla, r.text);
            }
            finish(&margs, &report)
        }
        Command::Invariance { model: margs, modes, prompt, limit, max_new_tokens, order_seed } => {
            let src = source(&margs)?;
            let prompt = read_prompt(&prompt)?;
            let opts = InvarianceOptions {
                modes: modes.modes(&Variant::ALL),
                limit,
                new_tokens: max_new_tokens,
                seed: order_seed,
                canonical_reduction: margs.canonical_reduction,
            };
            let out = cmd_invariance(&src, &prompt, &opts)?;
            for v in &out.verdicts {
                let verdict = match (v.passed, v.expected_invariant) {
                    (true, true) => "invariant",
                    (true, false) => "witness found",
                    (false, true) => "NOT invariant",
                    (false, false) => "no witness",
                };
                println!("{}\t{verdict}\t{}", if v.passed { "ok" } else { "FAIL" }, v.report.summary());
            }
            finish(&margs, &out.report)?;
            if out.passed() {
                Ok(())
            } else {
                Err(Failure::Assertion("invariance expectations not met".into()))
            }
        }
        Command::BiasScan { model: margs, modes, scan } => {
            let model = load(&margs)?;
            let text = std::fs::read_to_string(&scan).map_err(|e| Failure::Io(format!("{}: {e}", scan.display())))?;
            let mut scan = BiasScanConfig::from_json(&text)?;
            if !modes.mode.is_empty() {
                scan.modes = modes.modes(&[]);
            }
            let out = cmd_bias_scan(&model, &scan)?;
            print!("{}", out.table);
            finish(&margs, &out.report)?;
            match out.flatness_violations.first() {
                None => Ok(()),
                Some((mode, spread)) => Err(Failure::Assertion(format!(
                    "{mode} varies by {spread:.3e} across gold positions"
                ))),
            }
        }
        Command::Bench { model: margs, modes, prompt, repeats, max_new_tokens } => {
            let model = load(&margs)?;
            let prompt = read_prompt(&prompt)?;
            let modes = modes.modes(&[Variant::Vanilla, Variant::Pine]);
            let out = cmd_bench(&model, &prompt, &modes, repeats, max_new_tokens)?;
            println!("mode\tmedian_seconds\tratio_vs_vanilla");
            for r in &out.rows {
                println!("{}\t{:.6}\t{:.3}", r.mode, r.median_seconds, r.ratio_vs_vanilla);
            }
            println!("k\tdoc_len\tcomparisons_per_token\tper_head_k_log2_k");
            for r in &out.comparators {
                println!("{}\t{}\t{}\t{:.4}", r.k, r.doc_len, r.comparisons_per_token, r.normalized);
            }
            finish(&margs, &out.report)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|()| execute(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Usage(m) | Failure::Io(m) | Failure::Assertion(m) => m,
            };
            eprintln!("pine: {msg}");
            ExitCode::from(f.code())
        }
    }
}
