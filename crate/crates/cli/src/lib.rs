//! Settings, config-file parsing and the subcommands behind the `lmn`
//! binary.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use lmn_core::bench::{self, BenchConfig};
use lmn_core::verify::{self, VerifyOptions};
use lmn_core::{checkpoint, evaluate_in, train, Artifacts, Dataset, LmnError, Mode, Model, ModelConfig, Sampling, TrainConfig, Variant, Vocab};
use lmn_tensor::{Rng, TensorError};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VERIFY: i32 = 1;
    pub const INPUT: i32 = 2;
    pub const MISMATCH: i32 = 3;
    pub const CAPACITY: i32 = 4;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        CliError::new(exit::INPUT, message)
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        CliError::new(exit::MISMATCH, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<LmnError> for CliError {
    fn from(e: LmnError) -> Self {
        let code = match &e {
            LmnError::Capacity { .. } | LmnError::TooLong { .. } => exit::CAPACITY,
            LmnError::Tensor(TensorError::OutOfMemory { .. }) => exit::CAPACITY,
            LmnError::Checkpoint(_) | LmnError::InvalidToken { .. } => exit::MISMATCH,
            LmnError::Config(_) | LmnError::Data(_) | LmnError::Io { .. } => exit::INPUT,
            LmnError::NonFiniteLoss { .. } | LmnError::Tensor(_) => exit::VERIFY,
        };
        CliError::new(code, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Paths and generation options that are not part of a model, training or
/// benchmark config.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub out: PathBuf,
    /// Memory construction for `eval`.
    pub mode: Mode,
    /// Defaults to `<out>/final.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `vocab.txt` next to the checkpoint.
    pub vocab: Option<PathBuf>,
    pub prompt: String,
    pub n_new: usize,
    pub temperature: f64,
    pub greedy: bool,
    pub quick: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: PathBuf::from("data/shakespeare.txt"),
            out: PathBuf::from("runs/default"),
            mode: Mode::Parallel,
            checkpoint: None,
            vocab: None,
            prompt: "\n".into(),
            n_new: 200,
            temperature: 1.0,
            greedy: false,
            quick: false,
        }
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

/// Escapes backslashes and newlines so a prompt fits on one line.
fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

impl RunConfig {
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("corpus", self.corpus.display().to_string()),
            ("out", self.out.display().to_string()),
            ("mode", self.mode.to_string()),
            ("checkpoint", opt_path(&self.checkpoint)),
            ("vocab", opt_path(&self.vocab)),
            ("prompt", escape(&self.prompt)),
            ("n_new", self.n_new.to_string()),
            ("temperature", self.temperature.to_string()),
            ("greedy", self.greedy.to_string()),
            ("quick", self.quick.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let bad = || CliError::input(format!("`run.{key}`: cannot parse `{value}`"));
        let path = |v: &str| match v {
            "none" => None,
            p => Some(PathBuf::from(p)),
        };
        match key {
            "corpus" => self.corpus = value.into(),
            "out" => self.out = value.into(),
            "mode" => self.mode = value.parse()?,
            "checkpoint" => self.checkpoint = path(value),
            "vocab" => self.vocab = path(value),
            "prompt" => self.prompt = unescape(value),
            "n_new" => self.n_new = value.parse().map_err(|_| bad())?,
            "temperature" => self.temperature = value.parse().map_err(|_| bad())?,
            "greedy" => self.greedy = value.parse().map_err(|_| bad())?,
            "quick" => self.quick = value.parse().map_err(|_| bad())?,
            _ => return Err(CliError::input(format!("unknown key `run.{key}`"))),
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("final.ckpt"))
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| {
            let ckpt = self.checkpoint_path();
            ckpt.parent().unwrap_or(Path::new(".")).join("vocab.txt")
        })
    }
}

/// Everything a subcommand needs. Keys are `section.name` with sections
/// `model`, `train`, `bench` and `run`.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub run: RunConfig,
    /// Keys given explicitly, in file or flags.
    pub explicit: BTreeSet<String>,
}

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped.
pub fn parse_config_text(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::input(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Settings {
    /// Applies `entries` in order over the defaults. The model defaults
    /// follow the last `model.variant` given, so a variant's implied fields
    /// only apply where no explicit value overrides them.
    pub fn resolve(entries: &[(String, String)]) -> CliResult<Self> {
        let variant: Variant = match entries.iter().rev().find(|(k, _)| k == "model.variant") {
            Some((_, v)) => v.parse()?,
            None => Variant::LogMem,
        };
        let mut s = Settings {
            model: ModelConfig::new(variant),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            run: RunConfig::default(),
            explicit: BTreeSet::new(),
        };
        for (k, v) in entries {
            s.set(k, v)?;
        }
        s.model.validate()?;
        s.train.validate()?;
        s.bench.validate()?;
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let (section, name) = key
            .split_once('.')
            .ok_or_else(|| CliError::input(format!("key `{key}` needs a section prefix (model., train., bench. or run.)")))?;
        match section {
            "model" => self.model.set(name, value)?,
            "train" => self.train.set(name, value)?,
            "bench" => self.bench.set(name, value)?,
            "run" => self.run.set(name, value)?,
            _ => return Err(CliError::input(format!("unknown key `{key}`"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Every key with its effective value, one `key=value` per line; feeding
    /// it back through `--config` reproduces these settings.
    pub fn to_text(&self) -> String {
        let sections: [(&str, Vec<(&'static str, String)>); 4] = [
            ("model", self.model.to_kv()),
            ("train", self.train.to_kv()),
            ("bench", self.bench.to_kv()),
            ("run", self.run.to_kv()),
        ];
        let mut out = String::new();
        for (section, kv) in sections {
            for (k, v) in kv {
                out.push_str(&format!("{section}.{k}={v}\n"));
            }
        }
        out
    }
}

/// Flag values common to the subcommands, before they are mapped to keys.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub embed: Option<usize>,
    pub banks: Option<usize>,
    pub expansion: Option<usize>,
    pub mode: Option<String>,
    pub corpus: Option<PathBuf>,
    pub max_iters: Option<usize>,
    pub lengths: Option<String>,
    pub quick: bool,
    pub score_orientation: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub prompt: Option<String>,
    pub n_new: Option<usize>,
    pub temperature: Option<f64>,
    pub greedy: bool,
    /// Raw `key=value` pairs.
    pub set: Vec<String>,
}

impl Overrides {
    /// Keys the flags stand for. Shared flags (seed, embed, banks,
    /// expansion, variant, mode) set both the model or run key and the
    /// matching bench key.
    pub fn to_entries(&self) -> CliResult<Vec<(String, String)>> {
        let mut e: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| e.push((k.to_string(), v));
        if let Some(v) = &self.out {
            push("run.out", v.display().to_string());
        }
        if let Some(v) = self.seed {
            push("model.seed", v.to_string());
            push("train.seed", v.to_string());
            push("bench.seed", v.to_string());
        }
        if let Some(v) = &self.variant {
            push("model.variant", v.clone());
            push("bench.variants", v.clone());
        }
        if let Some(v) = self.embed {
            push("model.embed", v.to_string());
            push("bench.embed", v.to_string());
        }
        if let Some(v) = self.banks {
            push("model.banks", v.to_string());
            push("bench.banks", v.to_string());
        }
        if let Some(v) = self.expansion {
            push("model.expansion", v.to_string());
            push("bench.expansion", v.to_string());
        }
        if let Some(v) = &self.mode {
            push("run.mode", v.clone());
            push("bench.modes", v.clone());
        }
        if let Some(v) = &self.corpus {
            push("run.corpus", v.display().to_string());
        }
        if let Some(v) = self.max_iters {
            push("train.max_iters", v.to_string());
        }
        if let Some(v) = &self.lengths {
            push("bench.lengths", v.clone());
        }
        if self.quick {
            push("run.quick", "true".into());
        }
        if let Some(v) = &self.score_orientation {
            push("model.score_orientation", v.clone());
        }
        if let Some(v) = &self.checkpoint {
            push("run.checkpoint", v.display().to_string());
        }
        if let Some(v) = &self.prompt {
            push("run.prompt", escape(v));
        }
        if let Some(v) = self.n_new {
            push("run.n_new", v.to_string());
        }
        if let Some(v) = self.temperature {
            push("run.temperature", v.to_string());
        }
        if self.greedy {
            push("run.greedy", "true".into());
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::input(format!("--set expects key=value, got `{kv}`")))?;
            push(k.trim(), v.trim().to_string());
        }
        Ok(e)
    }
}

/// Defaults, then the config file, then the flags.
pub fn load_settings(config: Option<&Path>, flags: &Overrides) -> CliResult<Settings> {
    let mut entries = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
            parse_config_text(&text)?
        }
        None => Vec::new(),
    };
    entries.extend(flags.to_entries()?);
    Settings::resolve(&entries)
}

fn echo(s: &Settings) {
    eprint!("# effective config\n{}", s.to_text());
}

fn load_corpus(path: &Path) -> CliResult<Dataset> {
    if !path.is_file() {
        return Err(CliError::input(format!("corpus not found: {}", path.display())));
    }
    Ok(Dataset::load(path)?)
}

/// Trains on the corpus and writes `report.csv`, `best.ckpt`,
/// `final.ckpt`, `vocab.txt` and `config.txt` into the output directory.
pub fn cmd_train(mut s: Settings) -> CliResult<()> {
    let ds = load_corpus(&s.run.corpus)?;
    if !s.is_explicit("model.vocab_size") {
        s.model.vocab_size = ds.vocab.len();
    } else if s.model.vocab_size != ds.vocab.len() {
        return Err(CliError::input(format!(
            "model.vocab_size = {} but the corpus has {} distinct characters",
            s.model.vocab_size,
            ds.vocab.len()
        )));
    }
    if s.train.block_size > s.model.max_seq_len {
        return Err(CliError::input(format!(
            "train.block_size {} exceeds model.max_seq_len {}",
            s.train.block_size, s.model.max_seq_len
        )));
    }
    echo(&s);
    let artifacts = Artifacts::new(&s.run.out)?;
    std::fs::write(artifacts.dir.join("config.txt"), s.to_text()).map_err(|e| CliError::from(LmnError::io(&artifacts.dir, e)))?;
    let mut model = Model::<f32>::new(s.model.clone())?;
    eprintln!(
        "{} params, {} train / {} val tokens",
        model.num_params(),
        ds.part(lmn_core::Split::Train).len(),
        ds.part(lmn_core::Split::Val).len()
    );
    let report = train(&mut model, &ds, &s.train, Some(&artifacts), |p| {
        println!("step {:>6}  train {:.4}  val {:.4}", p.step, p.train_loss, p.val_loss);
    })?;
    println!(
        "best val {:.4} at step {}; final val {:.4}; {:.0}s",
        report.best.val_loss, report.best.step, report.final_point.val_loss, report.seconds
    );
    Ok(())
}

/// Loads a checkpoint and its vocabulary sidecar, checking that they agree.
pub fn load_trained(s: &Settings) -> CliResult<(Model<f32>, Vocab)> {
    let ckpt = s.run.checkpoint_path();
    let vocab_path = s.run.vocab_path();
    for p in [&ckpt, &vocab_path] {
        if !p.is_file() {
            return Err(CliError::input(format!("not found: {}", p.display())));
        }
    }
    let model = checkpoint::load(&ckpt)?;
    let vocab = Vocab::load(&vocab_path).map_err(|e| CliError::mismatch(e.to_string()))?;
    if vocab.len() != model.config.vocab_size {
        return Err(CliError::mismatch(format!(
            "vocabulary {} has {} symbols but checkpoint {} expects {}",
            vocab_path.display(),
            vocab.len(),
            ckpt.display(),
            model.config.vocab_size
        )));
    }
    Ok((model, vocab))
}

/// Re-evaluates a checkpoint on the corpus with the training config's
/// batch, block and eval_iters. Prints `train_loss` and `val_loss`.
pub fn cmd_eval(s: Settings) -> CliResult<(f64, f64)> {
    echo(&s);
    let (model, vocab) = load_trained(&s)?;
    let ds = load_corpus(&s.run.corpus)?;
    if ds.vocab != vocab {
        return Err(CliError::mismatch(format!(
            "corpus {} does not have the checkpoint's vocabulary",
            s.run.corpus.display()
        )));
    }
    if s.train.block_size > model.config.max_seq_len {
        return Err(CliError::new(
            exit::CAPACITY,
            format!("train.block_size {} exceeds the checkpoint's max_seq_len {}", s.train.block_size, model.config.max_seq_len),
        ));
    }
    let mut rng = Rng::new(s.train.seed).fork(2);
    let (tl, vl) = evaluate_in(&model, &ds, &s.train, s.run.mode, &mut rng)?;
    println!("train_loss={tl:.6}");
    println!("val_loss={vl:.6}");
    Ok((tl, vl))
}

/// Streams the prompt through the model in sequential mode and writes the
/// sampled characters to `out` as they are drawn.
pub fn cmd_generate(s: Settings, out: &mut impl Write) -> CliResult<()> {
    echo(&s);
    let (model, vocab) = load_trained(&s)?;
    let mut prompt = Vec::new();
    for c in s.run.prompt.chars() {
        let id = vocab
            .id(c)
            .ok_or_else(|| CliError::mismatch(format!("prompt character {c:?} is not in the vocabulary")))?;
        prompt.push(id);
    }
    if prompt.is_empty() {
        return Err(CliError::input("prompt is empty"));
    }
    let positions = prompt.len() + s.run.n_new - 1;
    if positions > model.capacity() {
        return Err(CliError::new(
            exit::CAPACITY,
            format!(
                "prompt of {} plus {} new tokens needs {positions} positions, the model holds {}",
                prompt.len(),
                s.run.n_new,
                model.capacity()
            ),
        ));
    }
    let sampling = Sampling {
        temperature: s.run.temperature,
        greedy: s.run.greedy,
    };
    let mut rng = Rng::new(s.model.seed).fork(3);
    let mut io_err = None;
    model.generate_with(&prompt, s.run.n_new, sampling, &mut rng, |t| {
        if io_err.is_none() {
            let c = vocab.chars()[t];
            let mut buf = [0u8; 4];
            io_err = out.write_all(c.encode_utf8(&mut buf).as_bytes()).and_then(|_| out.flush()).err();
        }
    })?;
    if let Some(e) = io_err {
        return Err(CliError::input(format!("writing output: {e}")));
    }
    writeln!(out).ok();
    Ok(())
}

/// Runs the benchmark sweep into `<out>/bench.csv`.
pub fn cmd_bench(mut s: Settings) -> CliResult<PathBuf> {
    if s.run.quick && !s.is_explicit("bench.lengths") {
        s.bench.lengths = vec![64, 256, 1024];
    }
    echo(&s);
    std::fs::create_dir_all(&s.run.out).map_err(|e| CliError::from(LmnError::io(&s.run.out, e)))?;
    let path = s.run.out.join("bench.csv");
    let records = bench::sweep(&s.bench, &path, |r| {
        println!(
            "{:<14} {:<10} L={:<6} {:>10.5}s {:>12} B  {}",
            r.variant, r.mode, r.len, r.median_seconds, r.peak_bytes, r.status
        );
    })?;
    print!("{}", bench::slope_footer(&records));
    println!("wrote {}", path.display());
    Ok(path)
}

/// Runs the invariant suite, printing one line per check.
pub fn cmd_verify(s: Settings, flip_concat: bool) -> CliResult<()> {
    echo(&s);
    let opts = VerifyOptions {
        quick: s.run.quick,
        flip_concat,
        seed: s.model.seed,
    };
    let results = verify::run(&opts, |r| println!("{}", verify::format_row(r)));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(CliError::new(exit::VERIFY, format!("failed: {}", failed.join(", "))))
    }
}
