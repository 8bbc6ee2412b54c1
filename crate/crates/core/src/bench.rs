//! Scaling measurements: wall time, peak heap bytes and counted operations
//! per forward pass, for every variant and both modes.
//!
//! Parallel rows time `Model::forward`. Sequential rows stream the sequence
//! one token at a time through `Model::step`, so their peak bytes are the
//! largest per-token footprint including the recurrent state (slots or KV
//! cache). Peak bytes need the counting allocator from `lmn_tensor::alloc`
//! to be installed; they read 0 otherwise.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use lmn_tensor::{alloc, no_grad, Rng};

use crate::config::{levels_for, ModelConfig, Variant};
use crate::counters::{self, OpCounts};
use crate::error::{LmnError, Result};
use crate::model::{Mode, Model};

pub const CSV_HEADER: &str = "variant,mode,L,reps,median_seconds,peak_bytes,score_macs,summarizer_ops,status";

/// `n² / log₂ n`: how many times fewer score operations a logarithmic
/// memory needs than full attention at length `n`.
pub fn compression_factor(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(LmnError::Config(format!("compression factor needs n ≥ 2, got {n}")));
    }
    let n = n as f64;
    Ok(n * n / n.log2())
}

/// `E · nb · Σ_{t<L} (popcount(t) + 1)`
pub fn lmn_score_macs(embed: usize, banks: usize, len: usize) -> u64 {
    let entries: u64 = (0..len as u64).map(|t| t.count_ones() as u64 + 1).sum();
    (embed * banks) as u64 * entries
}

/// `E · L (L + 1) / 2`
pub fn baseline_score_macs(embed: usize, len: usize) -> u64 {
    let l = len as u64;
    embed as u64 * l * (l + 1) / 2
}

/// `E · L · (1 + S + k·S(S−1)/2)`, the all-bits-set count at every position.
pub fn expsum_score_mac_bound(embed: usize, len: usize, k: usize) -> u64 {
    let s = levels_for(len) as u64;
    (embed * len) as u64 * (1 + s + k as u64 * s * (s.saturating_sub(1)) / 2)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Status {
    Ok,
    Failed(String),
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Status::Ok => f.write_str("ok"),
            Status::Failed(why) => write!(f, "failed: {}", why.replace([',', '\n'], ";")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub variant: Variant,
    pub mode: Mode,
    pub len: usize,
    pub reps: usize,
    pub median_seconds: f64,
    pub peak_bytes: usize,
    pub score_macs: u64,
    pub summarizer_ops: u64,
    pub status: Status,
}

impl BenchRecord {
    fn failed(variant: Variant, mode: Mode, len: usize, reps: usize, why: String) -> Self {
        BenchRecord {
            variant,
            mode,
            len,
            reps,
            median_seconds: f64::NAN,
            peak_bytes: 0,
            score_macs: 0,
            summarizer_ops: 0,
            status: Status::Failed(why),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6e},{},{},{},{}",
            self.variant,
            self.mode,
            self.len,
            self.reps,
            self.median_seconds,
            self.peak_bytes,
            self.score_macs,
            self.summarizer_ops,
            self.status
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || LmnError::Data(format!("bad bench row `{line}`"));
        if f.len() != 9 {
            return Err(bad());
        }
        let status = match f[8] {
            "ok" => Status::Ok,
            s => Status::Failed(s.strip_prefix("failed: ").ok_or_else(bad)?.to_string()),
        };
        Ok(BenchRecord {
            variant: f[0].parse()?,
            mode: f[1].parse()?,
            len: f[2].parse().map_err(|_| bad())?,
            reps: f[3].parse().map_err(|_| bad())?,
            median_seconds: f[4].parse().map_err(|_| bad())?,
            peak_bytes: f[5].parse().map_err(|_| bad())?,
            score_macs: f[6].parse().map_err(|_| bad())?,
            summarizer_ops: f[7].parse().map_err(|_| bad())?,
            status,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub variants: Vec<Variant>,
    pub modes: Vec<Mode>,
    pub reps: usize,
    pub embed: usize,
    /// Banks for logmem and tiny-logmem.
    pub banks: usize,
    pub expansion: usize,
    pub n_blocks: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Cap on live heap during a row, in MiB; a row that would exceed it
    /// is recorded as failed.
    pub memory_budget_mb: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![256, 1024, 4096, 16384],
            variants: Variant::ALL.to_vec(),
            modes: vec![Mode::Parallel, Mode::Sequential],
            reps: 3,
            embed: 32,
            banks: 2,
            expansion: 1,
            n_blocks: 1,
            vocab_size: 65,
            seed: 1337,
            memory_budget_mb: Some(3072),
        }
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| LmnError::Config(format!("`bench.{key}`: cannot parse `{s}`")))
        })
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.variants.is_empty() || self.modes.is_empty() {
            return Err(LmnError::Config("bench lengths, variants and modes must be non-empty".into()));
        }
        if let Some(&l) = self.lengths.iter().find(|&&l| l == 0) {
            return Err(LmnError::Config(format!("bench length {l} must be positive")));
        }
        if self.reps < 3 {
            return Err(LmnError::Config(format!("bench.reps must be at least 3, got {}", self.reps)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lengths", join(&self.lengths)),
            ("variants", join(&self.variants)),
            ("modes", join(&self.modes)),
            ("reps", self.reps.to_string()),
            ("embed", self.embed.to_string()),
            ("banks", self.banks.to_string()),
            ("expansion", self.expansion.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("seed", self.seed.to_string()),
            ("memory_budget_mb", self.memory_budget_mb.map_or("none".into(), |m| m.to_string())),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| LmnError::Config(format!("`bench.{key}`: cannot parse `{v}`")))
        };
        match key {
            "lengths" => self.lengths = list(key, value)?,
            "variants" => self.variants = list(key, value)?,
            "modes" => self.modes = list(key, value)?,
            "reps" => self.reps = num(value)?,
            "embed" => self.embed = num(value)?,
            "banks" => self.banks = num(value)?,
            "expansion" => self.expansion = num(value)?,
            "n_blocks" => self.n_blocks = num(value)?,
            "vocab_size" => self.vocab_size = num(value)?,
            "seed" => self.seed = num(value)? as u64,
            "memory_budget_mb" => {
                self.memory_budget_mb = match value.trim() {
                    "none" => None,
                    v => Some(num(v)?),
                }
            }
            _ => return Err(LmnError::Config(format!("unknown bench key `{key}`"))),
        }
        Ok(())
    }

    /// Random-weight model able to run length `len`.
    pub fn model_config(&self, variant: Variant, len: usize) -> ModelConfig {
        let mut c = ModelConfig::new(variant);
        c.embed = self.embed;
        c.vocab_size = self.vocab_size;
        c.max_seq_len = len;
        c.n_blocks = self.n_blocks;
        c.seed = self.seed;
        match variant {
            Variant::LogMem | Variant::TinyLogMem => c.banks = self.banks,
            Variant::ExpSum => c.expansion = self.expansion,
            Variant::Baseline => {}
        }
        c.apply_variant_rules();
        c
    }
}

fn run_once(model: &Model<f32>, tokens: &[usize], mode: Mode) -> Result<()> {
    no_grad(|| match mode {
        Mode::Parallel => model.forward(tokens, 1, Mode::Parallel).map(drop),
        Mode::Sequential => {
            let mut state = model.start_stream(1);
            for &t in tokens {
                model.step(&mut state, &[t])?;
            }
            Ok(())
        }
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One warm-up run, then `reps` timed runs on random tokens (B=1). Any
/// failure becomes a failed record rather than an error.
pub fn time_forward(model: &Model<f32>, len: usize, mode: Mode, reps: usize, rng: &mut Rng) -> BenchRecord {
    let variant = model.config.variant;
    let tokens: Vec<usize> = (0..len).map(|_| rng.below(model.config.vocab_size)).collect();
    let fail = |e: LmnError| {
        let why = if e.is_out_of_memory() { format!("out of memory ({e})") } else { e.to_string() };
        BenchRecord::failed(variant, mode, len, reps, why)
    };
    if let Err(e) = run_once(model, &tokens, mode) {
        return fail(e);
    }
    let mut times = Vec::with_capacity(reps);
    let mut peak = 0;
    let mut counts = OpCounts::default();
    for _ in 0..reps {
        let ((res, c), bytes) = alloc::measure_peak(|| {
            counters::measure(|| {
                let start = Instant::now();
                let r = run_once(model, &tokens, mode);
                r.map(|()| start.elapsed().as_secs_f64())
            })
        });
        match res {
            Ok(t) => times.push(t),
            Err(e) => return fail(e),
        }
        peak = peak.max(bytes);
        counts = c;
    }
    BenchRecord {
        variant,
        mode,
        len,
        reps,
        median_seconds: median(times),
        peak_bytes: peak,
        score_macs: counts.score_macs,
        summarizer_ops: counts.summarizer_ops + counts.expander_ops,
        status: Status::Ok,
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Time slope per (variant, mode) over the successful rows.
pub fn time_slopes(records: &[BenchRecord]) -> Vec<(Variant, Mode, f64)> {
    let mut keys: Vec<(Variant, Mode)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.variant, r.mode)) {
            keys.push((r.variant, r.mode));
        }
    }
    keys.into_iter()
        .filter_map(|(v, m)| {
            let pts: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| r.variant == v && r.mode == m && r.is_ok())
                .map(|r| (r.len as f64, r.median_seconds))
                .collect();
            log_log_slope(&pts).map(|s| (v, m, s))
        })
        .collect()
}

pub fn slope_footer(records: &[BenchRecord]) -> String {
    let mut s = String::new();
    for (v, m, slope) in time_slopes(records) {
        let _ = writeln!(s, "# time_slope,{v},{m},{slope:.4}");
    }
    s
}

/// Rows and footer slopes of a sweep CSV.
pub fn parse_csv(text: &str) -> Result<(Vec<BenchRecord>, Vec<(Variant, Mode, f64)>)> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(LmnError::Data("bench CSV header mismatch".into()));
    }
    let (mut rows, mut slopes) = (Vec::new(), Vec::new());
    for line in lines.filter(|l| !l.is_empty()) {
        if let Some(rest) = line.strip_prefix("# time_slope,") {
            let f: Vec<&str> = rest.split(',').collect();
            let bad = || LmnError::Data(format!("bad footer `{line}`"));
            if f.len() != 3 {
                return Err(bad());
            }
            slopes.push((f[0].parse()?, f[1].parse()?, f[2].parse().map_err(|_| bad())?));
        } else {
            rows.push(BenchRecord::from_csv_row(line)?);
        }
    }
    Ok((rows, slopes))
}

/// Runs every (variant, length, mode) combination, appending each row to
/// `out` as soon as it is measured, then the slope footer.
pub fn sweep(cfg: &BenchConfig, out: &Path, mut on_row: impl FnMut(&BenchRecord)) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let mut file = std::fs::File::create(out).map_err(|e| LmnError::io(out, e))?;
    writeln!(file, "{CSV_HEADER}").map_err(|e| LmnError::io(out, e))?;
    let previous = alloc::budget();
    alloc::set_budget(cfg.memory_budget_mb.map(|mb| alloc::current() + mb * 1024 * 1024));
    let mut records = Vec::new();
    let mut rng = Rng::new(cfg.seed).fork(7);
    let result = (|| {
        for &variant in &cfg.variants {
            for &len in &cfg.lengths {
                let model = Model::<f32>::new(cfg.model_config(variant, len));
                for &mode in &cfg.modes {
                    let rec = match &model {
                        Ok(m) => time_forward(m, len, mode, cfg.reps, &mut rng),
                        Err(e) => BenchRecord::failed(variant, mode, len, cfg.reps, e.to_string()),
                    };
                    writeln!(file, "{}", rec.to_csv_row()).map_err(|e| LmnError::io(out, e))?;
                    file.flush().map_err(|e| LmnError::io(out, e))?;
                    on_row(&rec);
                    records.push(rec);
                }
            }
        }
        write!(file, "{}", slope_footer(&records)).map_err(|e| LmnError::io(out, e))
    })();
    alloc::set_budget(previous);
    result.map(|()| records)
}
