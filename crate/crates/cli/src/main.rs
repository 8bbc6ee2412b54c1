use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lmn_cli::{cmd_bench, cmd_eval, cmd_generate, cmd_train, cmd_verify, exit, load_settings, CliResult, Overrides};

#[global_allocator]
static ALLOC: lmn_tensor::alloc::CountingAlloc = lmn_tensor::alloc::CountingAlloc;

#[derive(Parser)]
#[command(name = "lmn", version, about = "Logarithmic memory network language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a character-level model on a corpus.
    Train(Common),
    /// Re-evaluate a checkpoint on its corpus.
    Eval(Common),
    /// Sample text from a checkpoint in sequential mode.
    Generate(Common),
    /// Time forward passes across sequence lengths and write a CSV.
    Bench(Common),
    /// Run the invariant suite on random weights.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// Flat key=value file (model.embed=32, train.max_iters=100, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// logmem, tiny-logmem, expsum or baseline-attn.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    embed: Option<usize>,
    #[arg(long)]
    banks: Option<usize>,
    #[arg(long)]
    expansion: Option<usize>,
    /// parallel or sequential.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Comma-separated sequence lengths for bench.
    #[arg(long)]
    lengths: Option<String>,
    #[arg(long)]
    quick: bool,
    /// literal or swapped.
    #[arg(long)]
    score_orientation: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    n_new: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    greedy: bool,
    /// Any key, e.g. --set train.block_size=256. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Fault injection: concatenate in the wrong order in the sequential
    /// carry chain. Verification is expected to fail.
    #[arg(long, hide = true, value_name = "FAULT")]
    inject_fault: Option<String>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            variant: self.variant.clone(),
            embed: self.embed,
            banks: self.banks,
            expansion: self.expansion,
            mode: self.mode.clone(),
            corpus: self.corpus.clone(),
            max_iters: self.max_iters,
            lengths: self.lengths.clone(),
            quick: self.quick,
            score_orientation: self.score_orientation.clone(),
            checkpoint: self.checkpoint.clone(),
            prompt: self.prompt.clone(),
            n_new: self.n_new,
            temperature: self.temperature,
            greedy: self.greedy,
            set: self.set.clone(),
        }
    }

    fn settings(&self) -> CliResult<lmn_cli::Settings> {
        load_settings(self.config.as_deref(), &self.overrides())
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(c) => cmd_train(c.settings()?),
        Command::Eval(c) => cmd_eval(c.settings()?).map(|_| ()),
        Command::Generate(c) => cmd_generate(c.settings()?, &mut std::io::stdout().lock()),
        Command::Bench(c) => cmd_bench(c.settings()?).map(|_| ()),
        Command::Verify(v) => {
            let flip = match v.inject_fault.as_deref() {
                None => false,
                Some("flip-concat") => true,
                Some(other) => return Err(lmn_cli::CliError::input(format!("unknown fault `{other}` (known: flip-concat)"))),
            };
            cmd_verify(v.common.settings()?, flip)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::INPUT } else { exit::OK };
            e.print().ok();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
