use std::fmt;
use std::str::FromStr;

use crate::error::{LmnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    LogMem,
    TinyLogMem,
    ExpSum,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::LogMem, Variant::TinyLogMem, Variant::ExpSum, Variant::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::LogMem => "logmem",
            Variant::TinyLogMem => "tiny-logmem",
            Variant::ExpSum => "expsum",
            Variant::Baseline => "baseline-attn",
        }
    }

    pub fn is_lmn(self) -> bool {
        self != Variant::Baseline
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = LmnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logmem" => Ok(Variant::LogMem),
            "tiny-logmem" | "tiny" => Ok(Variant::TinyLogMem),
            "expsum" => Ok(Variant::ExpSum),
            "baseline-attn" | "baseline" => Ok(Variant::Baseline),
            _ => Err(LmnError::Config(format!(
                "unknown variant `{s}` (expected logmem, tiny-logmem, expsum or baseline-attn)"
            ))),
        }
    }
}

/// Which pair-merging layer the plain LMN banks use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SummarizerKind {
    #[default]
    Linear,
    DsConv,
}

impl fmt::Display for SummarizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SummarizerKind::Linear => "linear",
            SummarizerKind::DsConv => "dsconv",
        })
    }
}

impl FromStr for SummarizerKind {
    type Err = LmnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SummarizerKind::Linear),
            "dsconv" => Ok(SummarizerKind::DsConv),
            _ => Err(LmnError::Config(format!("unknown summarizer `{s}` (expected linear or dsconv)"))),
        }
    }
}

/// Orientation of single-vector scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScoreOrientation {
    /// Each memory entry's query against the current token's key.
    #[default]
    Literal,
    /// The current token's query against each memory entry's key.
    Swapped,
}

impl fmt::Display for ScoreOrientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreOrientation::Literal => "literal",
            ScoreOrientation::Swapped => "swapped",
        })
    }
}

impl FromStr for ScoreOrientation {
    type Err = LmnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(ScoreOrientation::Literal),
            "swapped" => Ok(ScoreOrientation::Swapped),
            _ => Err(LmnError::Config(format!("unknown score orientation `{s}` (expected literal or swapped)"))),
        }
    }
}

/// Number of slot levels needed so that every position below
/// `max_seq_len` can be decomposed: `max(1, ceil(log2(max_seq_len)))`.
pub fn levels_for(max_seq_len: usize) -> usize {
    let mut s = 0;
    while (1usize << s) < max_seq_len {
        s += 1;
    }
    s.max(1)
}

/// Width of a level-`ℓ` block under expansion factor `k`: `1 + ℓ·k`.
pub fn slot_widths(levels: usize, k: usize) -> Vec<usize> {
    (0..levels).map(|l| 1 + l * k).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub embed: usize,
    pub max_seq_len: usize,
    pub banks: usize,
    pub expansion: usize,
    pub ffn_mult: usize,
    pub n_blocks: usize,
    pub tie_embeddings: bool,
    pub summarizer: SummarizerKind,
    pub orientation: ScoreOrientation,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults for a variant; variant-implied fields are already set.
    pub fn new(variant: Variant) -> Self {
        let mut c = ModelConfig {
            variant,
            vocab_size: 65,
            embed: 32,
            max_seq_len: 512,
            banks: 1,
            expansion: 0,
            ffn_mult: 4,
            n_blocks: 1,
            tie_embeddings: false,
            summarizer: SummarizerKind::Linear,
            orientation: ScoreOrientation::Literal,
            seed: 1337,
        };
        c.apply_variant_rules();
        c
    }

    /// The configurations compared in the parameter-count table: E=32,
    /// vocab 65, four blocks, two banks for the plain LMN variants.
    pub fn table_preset(variant: Variant) -> Self {
        let mut c = ModelConfig::new(variant);
        c.n_blocks = 4;
        if matches!(variant, Variant::LogMem | Variant::TinyLogMem) {
            c.banks = 2;
        }
        c
    }

    /// Forces the fields a variant fixes: tiny uses a width-1 feed-forward,
    /// expsum uses one bank and a non-zero expansion.
    pub fn apply_variant_rules(&mut self) {
        match self.variant {
            Variant::TinyLogMem => self.ffn_mult = 1,
            Variant::ExpSum => {
                self.banks = 1;
                if self.expansion == 0 {
                    self.expansion = 1;
                }
            }
            Variant::LogMem => self.expansion = 0,
            Variant::Baseline => {
                self.expansion = 0;
                self.banks = 1;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LmnError::Config(m));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed", self.embed),
            ("max_seq_len", self.max_seq_len),
            ("banks", self.banks),
            ("n_blocks", self.n_blocks),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !matches!(self.ffn_mult, 1 | 4) {
            return bad(format!("ffn_mult must be 1 or 4, got {}", self.ffn_mult));
        }
        match self.variant {
            Variant::TinyLogMem if self.ffn_mult != 1 => bad("tiny-logmem requires ffn_mult = 1".into()),
            Variant::ExpSum if self.banks != 1 => bad("expsum uses exactly one bank".into()),
            Variant::ExpSum if self.expansion == 0 => bad("expsum requires expansion >= 1".into()),
            Variant::LogMem | Variant::TinyLogMem if self.expansion != 0 => {
                bad(format!("{} does not use an expander (expansion must be 0)", self.variant))
            }
            _ => Ok(()),
        }
    }

    /// Slot levels `S`.
    pub fn levels(&self) -> usize {
        levels_for(self.max_seq_len)
    }

    pub fn slot_widths(&self) -> Vec<usize> {
        slot_widths(self.levels(), self.expansion)
    }

    /// Memory entries per bank: the current token plus every slot entry.
    pub fn bank_depth(&self) -> usize {
        1 + self.slot_widths().iter().sum::<usize>()
    }

    /// Memory entries across all banks.
    pub fn memory_depth(&self) -> usize {
        self.banks * self.bank_depth()
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.embed
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("embed", self.embed.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("banks", self.banks.to_string()),
            ("expansion", self.expansion.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
            ("summarizer", self.summarizer.to_string()),
            ("score_orientation", self.orientation.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from its key-value form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| LmnError::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "variant" => self.variant = value.parse()?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "embed" => self.embed = num(key, value)?,
            "max_seq_len" => self.max_seq_len = num(key, value)?,
            "banks" => self.banks = num(key, value)?,
            "expansion" => self.expansion = num(key, value)?,
            "ffn_mult" => self.ffn_mult = num(key, value)?,
            "n_blocks" => self.n_blocks = num(key, value)?,
            "tie_embeddings" => self.tie_embeddings = num(key, value)?,
            "summarizer" => self.summarizer = value.parse()?,
            "score_orientation" => self.orientation = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(LmnError::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ModelConfig::new(Variant::LogMem);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LmnError::Config(format!("expected key=value, got `{line}`")))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }
}
