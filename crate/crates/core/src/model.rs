//! Full networks: token embedding, a stack of blocks, final norm and
//! unembedding.
//!
//! Block layout (pre-norm):
//! `h += proj(mix(LN1(h)))`, then `h += FFN(LN2(h))`. For the LMN variants
//! `mix` builds one memory per bank from `LN1(h)` and runs single-vector
//! attention over the combined entries; for the baseline it is causal
//! self-attention. Only the baseline has a positional embedding.

use lmn_tensor::{Float, Rng, Tensor};

use crate::attention::Attention;
use crate::causal::causal_attention;
use crate::config::{ModelConfig, ScoreOrientation, SummarizerKind, Variant};
use crate::error::{LmnError, Result};
use crate::memory::{parallel_memory, sequential_memory, Layout, MemoryTensor, SlotState};
use crate::summarizer::Summarizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Parallel,
    Sequential,
}

impl std::str::FromStr for Mode {
    type Err = LmnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Mode::Parallel),
            "sequential" => Ok(Mode::Sequential),
            _ => Err(LmnError::Config(format!("unknown mode `{s}` (expected parallel or sequential)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Parallel => "parallel",
            Mode::Sequential => "sequential",
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T: Float = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Float> LayerNorm<T> {
    fn new(embed: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: Tensor::param(vec![T::one(); embed], &[embed])?,
            beta: Tensor::param(vec![T::zero(); embed], &[embed])?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.layer_norm(&self.gamma, &self.beta, 1e-5)?)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward<T: Float = f32> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Float> FeedForward<T> {
    fn new(embed: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let b1 = 1.0 / (embed as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        Ok(FeedForward {
            w1: rng.uniform_param(&[embed, hidden], b1)?,
            b1: rng.uniform_param(&[hidden], b1)?,
            w2: rng.uniform_param(&[hidden, embed], b2)?,
            b2: rng.uniform_param(&[embed], b2)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.linear(&self.w1, Some(&self.b1))?.gelu()?.linear(&self.w2, Some(&self.b2))?)
    }
}

#[derive(Clone, Debug)]
pub enum Mixer<T: Float = f32> {
    Memory {
        banks: Vec<Summarizer<T>>,
        attn: Attention<T>,
    },
    Causal {
        /// `[E, 3E]`, no bias.
        qkv_weight: Tensor<T>,
        proj_weight: Tensor<T>,
        proj_bias: Tensor<T>,
    },
}

#[derive(Clone, Debug)]
pub struct Block<T: Float = f32> {
    pub ln1: LayerNorm<T>,
    pub mixer: Mixer<T>,
    pub ln2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

/// Recurrent state of one block during streaming.
#[derive(Clone, Debug)]
enum BlockState<T: Float> {
    Memory {
        banks: Vec<SlotState<T>>,
        /// Normalized input of the previous position, pushed lazily so that
        /// the last addressable position never overflows the counter.
        pending: Option<Tensor<T>>,
    },
    Causal {
        keys: Option<Tensor<T>>,
        values: Option<Tensor<T>>,
    },
}

/// Streaming state: one entry per block plus the next position.
#[derive(Clone, Debug)]
pub struct StreamState<T: Float = f32> {
    blocks: Vec<BlockState<T>>,
    position: usize,
    batch: usize,
}

impl<T: Float> StreamState<T> {
    pub fn position(&self) -> usize {
        self.position
    }

    /// Floats held as recurrent state (memory slots or KV cache).
    pub fn live_floats(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                BlockState::Memory { banks, pending } => {
                    banks.iter().map(SlotState::live_floats).sum::<usize>() + pending.as_ref().map_or(0, |p| p.numel())
                }
                BlockState::Causal { keys, values } => {
                    keys.as_ref().map_or(0, |k| k.numel()) + values.as_ref().map_or(0, |v| v.numel())
                }
            })
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampling {
    pub temperature: f64,
    /// Always pick the most likely token (the zero-temperature limit).
    pub greedy: bool,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            temperature: 1.0,
            greedy: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Prompt followed by the sampled tokens.
    pub tokens: Vec<usize>,
    /// Logits produced at every position, prompt included.
    pub logits: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Float = f32> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Option<Tensor<T>>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
    /// `None` when tied to the token embedding.
    pub head_weight: Option<Tensor<T>>,
    pub head_bias: Tensor<T>,
    layout: Layout,
}

/// Exact learnable-scalar count implied by a configuration.
pub fn param_count(c: &ModelConfig) -> usize {
    let (v, e, h) = (c.vocab_size, c.embed, c.ffn_hidden());
    let mut n = v * e + 2 * e + v;
    if !c.tie_embeddings {
        n += e * v;
    }
    if c.variant == Variant::Baseline {
        n += c.max_seq_len * e;
    }
    let block_mix = match c.variant {
        Variant::Baseline => 3 * e * e + e * e + e,
        _ => {
            let bank = match (c.variant, c.summarizer) {
                (Variant::ExpSum, _) => (2 * e * e + e) + ((c.expansion + 1) * e * e + e),
                (_, SummarizerKind::Linear) => 2 * e * e + e,
                (_, SummarizerKind::DsConv) => 2 * e + e * e + e,
            };
            (3 * e * e + 3 * e) + (e * e + e) + c.banks * bank
        }
    };
    let block = 4 * e + (e * h + h + h * e + e) + block_mix;
    n + c.n_blocks * block
}

impl<T: Float> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let e = config.embed;
        let tok_emb = rng.normal_param(&[config.vocab_size, e], 0.02)?;
        let pos_emb = match config.variant {
            Variant::Baseline => Some(rng.normal_param(&[config.max_seq_len, e], 0.02)?),
            _ => None,
        };
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            let ln1 = LayerNorm::new(e)?;
            let mixer = match config.variant {
                Variant::Baseline => {
                    let bound = 1.0 / (e as f64).sqrt();
                    Mixer::Causal {
                        qkv_weight: rng.uniform_param(&[e, 3 * e], bound)?,
                        proj_weight: rng.uniform_param(&[e, e], bound)?,
                        proj_bias: rng.uniform_param(&[e], bound)?,
                    }
                }
                _ => {
                    let banks = (0..config.banks)
                        .map(|_| match (config.variant, config.summarizer) {
                            (Variant::ExpSum, _) => Summarizer::expander(e, config.expansion, &mut rng),
                            (_, SummarizerKind::Linear) => Summarizer::linear(e, &mut rng),
                            (_, SummarizerKind::DsConv) => Summarizer::dsconv(e, &mut rng),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Mixer::Memory {
                        banks,
                        attn: Attention::new(e, &mut rng)?,
                    }
                }
            };
            let ln2 = LayerNorm::new(e)?;
            let ffn = FeedForward::new(e, config.ffn_hidden(), &mut rng)?;
            blocks.push(Block { ln1, mixer, ln2, ffn });
        }
        let bound = 1.0 / (e as f64).sqrt();
        let head_weight = if config.tie_embeddings {
            None
        } else {
            Some(rng.uniform_param(&[e, config.vocab_size], bound)?)
        };
        let head_bias = rng.uniform_param(&[config.vocab_size], bound)?;
        let layout = Layout::new(config.levels(), config.expansion);
        Ok(Model {
            ln_f: LayerNorm::new(e)?,
            config,
            tok_emb,
            pos_emb,
            blocks,
            head_weight,
            head_bias,
            layout,
        })
    }

    /// Layout of one bank's memory row.
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Positions a stream can process: the slot capacity for the memory
    /// variants, `max_seq_len` for the baseline.
    pub fn capacity(&self) -> usize {
        match self.config.variant {
            Variant::Baseline => self.config.max_seq_len,
            _ => self.layout.capacity(),
        }
    }

    pub fn orientation(&self) -> ScoreOrientation {
        self.config.orientation
    }

    pub fn set_orientation(&mut self, o: ScoreOrientation) {
        self.config.orientation = o;
    }

    /// Parameters in a fixed order with dotted names.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), self.tok_emb.clone())];
        if let Some(p) = &self.pos_emb {
            out.push(("pos_emb".into(), p.clone()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let pre = format!("blocks.{i}");
            out.push((format!("{pre}.ln1.gamma"), b.ln1.gamma.clone()));
            out.push((format!("{pre}.ln1.beta"), b.ln1.beta.clone()));
            match &b.mixer {
                Mixer::Memory { banks, attn } => {
                    for (j, s) in banks.iter().enumerate() {
                        for (n, t) in s.named_params() {
                            out.push((format!("{pre}.bank{j}.{n}"), t.clone()));
                        }
                    }
                    for (n, t) in attn.named_params() {
                        out.push((format!("{pre}.attn.{n}"), t.clone()));
                    }
                }
                Mixer::Causal {
                    qkv_weight,
                    proj_weight,
                    proj_bias,
                } => {
                    out.push((format!("{pre}.attn.qkv.weight"), qkv_weight.clone()));
                    out.push((format!("{pre}.attn.proj.weight"), proj_weight.clone()));
                    out.push((format!("{pre}.attn.proj.bias"), proj_bias.clone()));
                }
            }
            out.push((format!("{pre}.ln2.gamma"), b.ln2.gamma.clone()));
            out.push((format!("{pre}.ln2.beta"), b.ln2.beta.clone()));
            out.push((format!("{pre}.ffn.w1"), b.ffn.w1.clone()));
            out.push((format!("{pre}.ffn.b1"), b.ffn.b1.clone()));
            out.push((format!("{pre}.ffn.w2"), b.ffn.w2.clone()));
            out.push((format!("{pre}.ffn.b2"), b.ffn.b2.clone()));
        }
        out.push(("ln_f.gamma".into(), self.ln_f.gamma.clone()));
        out.push(("ln_f.beta".into(), self.ln_f.beta.clone()));
        if let Some(w) = &self.head_weight {
            out.push(("head.weight".into(), w.clone()));
        }
        out.push(("head.bias".into(), self.head_bias.clone()));
        out
    }

    /// Mutable parameters, same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb];
        if let Some(p) = &mut self.pos_emb {
            out.push(p);
        }
        for b in &mut self.blocks {
            out.push(&mut b.ln1.gamma);
            out.push(&mut b.ln1.beta);
            match &mut b.mixer {
                Mixer::Memory { banks, attn } => {
                    for s in banks {
                        out.extend(s.params_mut());
                    }
                    out.extend(attn.params_mut());
                }
                Mixer::Causal {
                    qkv_weight,
                    proj_weight,
                    proj_bias,
                } => {
                    out.push(qkv_weight);
                    out.push(proj_weight);
                    out.push(proj_bias);
                }
            }
            out.push(&mut b.ln2.gamma);
            out.push(&mut b.ln2.beta);
            out.push(&mut b.ffn.w1);
            out.push(&mut b.ffn.b1);
            out.push(&mut b.ffn.w2);
            out.push(&mut b.ffn.b2);
        }
        out.push(&mut self.ln_f.gamma);
        out.push(&mut self.ln_f.beta);
        if let Some(w) = &mut self.head_weight {
            out.push(w);
        }
        out.push(&mut self.head_bias);
        out
    }

    /// Replaces every parameter, in [`Model::named_params`] order.
    pub fn set_params(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        let slots = self.params_mut();
        if slots.len() != tensors.len() {
            return Err(LmnError::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(LmnError::Checkpoint(format!(
                    "parameter shape {:?} does not match {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(&token) => Err(LmnError::InvalidToken {
                token,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn unembed(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.ln_f.forward(h)?;
        Ok(match &self.head_weight {
            Some(w) => x.linear(w, Some(&self.head_bias))?,
            None => x.matmul(&self.tok_emb.transpose(0, 1)?)?.add(&self.head_bias)?,
        })
    }

    /// Logits `[B, L, vocab]` for `tokens` laid out row-major as `[B, L]`.
    pub fn forward(&self, tokens: &[usize], batch: usize, mode: Mode) -> Result<Tensor<T>> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(LmnError::Config(format!("{} tokens do not form {batch} rows", tokens.len())));
        }
        let l = tokens.len() / batch;
        if l > self.config.max_seq_len {
            return Err(LmnError::TooLong {
                len: l,
                max_seq_len: self.config.max_seq_len,
            });
        }
        self.check_tokens(tokens)?;
        match mode {
            Mode::Parallel => self.forward_parallel(tokens, batch, l),
            Mode::Sequential if self.config.variant.is_lmn() => self.forward_memory_sequential(tokens, batch, l),
            Mode::Sequential => self.forward_streaming(tokens, batch, l),
        }
    }

    fn embed(&self, tokens: &[usize], batch: usize, l: usize) -> Result<Tensor<T>> {
        let e = self.config.embed;
        let h = Tensor::embedding(&self.tok_emb, tokens)?.reshape(&[batch, l, e])?;
        Ok(match &self.pos_emb {
            Some(p) => h.add(&p.narrow(0, 0, l)?)?,
            None => h,
        })
    }

    /// Logits from already-embedded inputs `[B, L, E]`, skipping the token
    /// (and positional) embedding.
    pub fn forward_hidden(&self, h: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if h.rank() != 3 || h.shape()[2] != self.config.embed {
            return Err(LmnError::Config(format!(
                "hidden input must be [B, L, {}], got {:?}",
                self.config.embed,
                h.shape()
            )));
        }
        if h.shape()[1] > self.config.max_seq_len {
            return Err(LmnError::TooLong {
                len: h.shape()[1],
                max_seq_len: self.config.max_seq_len,
            });
        }
        if mode == Mode::Sequential && !self.config.variant.is_lmn() {
            return Err(LmnError::Config("the baseline streams tokens, not hidden states".into()));
        }
        let mut h = h.clone();
        for block in &self.blocks {
            h = self.block_forward(block, &h, mode)?;
        }
        self.unembed(&h)
    }

    fn forward_parallel(&self, tokens: &[usize], batch: usize, l: usize) -> Result<Tensor<T>> {
        let mut h = self.embed(tokens, batch, l)?;
        for block in &self.blocks {
            h = self.block_forward(block, &h, Mode::Parallel)?;
        }
        self.unembed(&h)
    }

    /// Whole-sequence forward with memories built by the carry chain.
    fn forward_memory_sequential(&self, tokens: &[usize], batch: usize, l: usize) -> Result<Tensor<T>> {
        let mut h = self.embed(tokens, batch, l)?;
        for block in &self.blocks {
            h = self.block_forward(block, &h, Mode::Sequential)?;
        }
        self.unembed(&h)
    }

    /// Memory for one block input, `[B, L, E] → [B, L, D_total, E]`.
    pub fn block_memory(&self, banks: &[Summarizer<T>], a: &Tensor<T>, mode: Mode) -> Result<MemoryTensor<T>> {
        let mems = banks
            .iter()
            .map(|s| match mode {
                Mode::Parallel => parallel_memory(a, s, &self.layout),
                Mode::Sequential => sequential_memory(a, s, &self.layout),
            })
            .collect::<Result<Vec<_>>>()?;
        MemoryTensor::combine(&mems)
    }

    /// One pre-norm block, `[B, L, E]` to `[B, L, E]`.
    pub fn block_forward(&self, block: &Block<T>, h: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let a = block.ln1.forward(h)?;
        let mixed = match &block.mixer {
            Mixer::Memory { banks, attn } => {
                let mem = self.block_memory(banks, &a, mode)?;
                attn.forward(&mem, self.config.orientation)?
            }
            Mixer::Causal {
                qkv_weight,
                proj_weight,
                proj_bias,
            } => {
                let e = self.config.embed;
                let qkv = a.matmul(qkv_weight)?;
                let (q, k, v) = (qkv.narrow(2, 0, e)?, qkv.narrow(2, e, e)?, qkv.narrow(2, 2 * e, e)?);
                causal_attention(&q, &k, &v, 0)?.linear(proj_weight, Some(proj_bias))?
            }
        };
        let h = h.add(&mixed)?;
        let f = block.ffn.forward(&block.ln2.forward(&h)?)?;
        Ok(h.add(&f)?)
    }

    fn forward_streaming(&self, tokens: &[usize], batch: usize, l: usize) -> Result<Tensor<T>> {
        let mut state = self.start_stream(batch);
        let mut steps = Vec::with_capacity(l);
        for t in 0..l {
            let col: Vec<usize> = (0..batch).map(|b| tokens[b * l + t]).collect();
            let logits = self.step(&mut state, &col)?;
            steps.push(logits.reshape(&[batch, 1, self.config.vocab_size])?);
        }
        Ok(Tensor::concat(&steps, 1)?)
    }

    pub fn start_stream(&self, batch: usize) -> StreamState<T> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| match &b.mixer {
                Mixer::Memory { banks, .. } => BlockState::Memory {
                    banks: banks
                        .iter()
                        .map(|_| SlotState::new(self.layout.clone(), batch, self.config.embed))
                        .collect(),
                    pending: None,
                },
                Mixer::Causal { .. } => BlockState::Causal { keys: None, values: None },
            })
            .collect();
        StreamState {
            blocks,
            position: 0,
            batch,
        }
    }

    /// Consumes one token per batch row and returns logits `[B, vocab]`.
    /// Memory variants keep only their slot states; the baseline keeps a
    /// KV cache.
    pub fn step(&self, state: &mut StreamState<T>, tokens: &[usize]) -> Result<Tensor<T>> {
        let (b, e) = (state.batch, self.config.embed);
        if tokens.len() != b {
            return Err(LmnError::Config(format!("step expects {b} tokens, got {}", tokens.len())));
        }
        self.check_tokens(tokens)?;
        let t = state.position;
        let capacity = self.capacity();
        if t >= capacity {
            return Err(LmnError::Capacity {
                position: t,
                levels: self.layout.levels(),
                max_seq_len: capacity,
            });
        }
        let mut h = Tensor::embedding(&self.tok_emb, tokens)?.reshape(&[b, 1, e])?;
        if let Some(p) = &self.pos_emb {
            h = h.add(&p.narrow(0, t, 1)?)?;
        }
        for (block, bs) in self.blocks.iter().zip(state.blocks.iter_mut()) {
            let a = block.ln1.forward(&h)?;
            let mixed = match (&block.mixer, bs) {
                (Mixer::Memory { banks, attn }, BlockState::Memory { banks: slots, pending }) => {
                    if let Some(prev) = pending.take() {
                        for (s, st) in banks.iter().zip(slots.iter_mut()) {
                            st.push(&prev, s)?;
                        }
                    }
                    let mut rows = Vec::with_capacity(slots.len());
                    for st in slots.iter() {
                        let (row, valid) = st.snapshot(&a)?;
                        let d = row.shape()[1];
                        rows.push(MemoryTensor {
                            data: row.reshape(&[b, 1, d, e])?,
                            valid,
                        });
                    }
                    *pending = Some(a.clone());
                    attn.forward(&MemoryTensor::combine(&rows)?, self.config.orientation)?
                }
                (
                    Mixer::Causal {
                        qkv_weight,
                        proj_weight,
                        proj_bias,
                    },
                    BlockState::Causal { keys, values },
                ) => {
                    let qkv = a.matmul(qkv_weight)?;
                    let (q, k, v) = (qkv.narrow(2, 0, e)?, qkv.narrow(2, e, e)?, qkv.narrow(2, 2 * e, e)?);
                    let kc = match keys.take() {
                        Some(prev) => Tensor::concat(&[prev, k], 1)?,
                        None => k,
                    };
                    let vc = match values.take() {
                        Some(prev) => Tensor::concat(&[prev, v], 1)?,
                        None => v,
                    };
                    let out = causal_attention(&q, &kc, &vc, t)?;
                    *keys = Some(kc);
                    *values = Some(vc);
                    out.linear(proj_weight, Some(proj_bias))?
                }
                _ => unreachable!("stream state built for a different model"),
            };
            h = h.add(&mixed)?;
            let f = block.ffn.forward(&block.ln2.forward(&h)?)?;
            h = h.add(&f)?;
        }
        state.position += 1;
        Ok(self.unembed(&h)?.reshape(&[b, self.config.vocab_size])?)
    }

    /// Mean next-token cross-entropy of logits `[B, L, V]` against
    /// row-major targets.
    pub fn loss(&self, logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
        let v = self.config.vocab_size;
        if logits.numel() != targets.len() * v {
            return Err(LmnError::Config(format!(
                "logits {:?} do not match {} targets",
                logits.shape(),
                targets.len()
            )));
        }
        Ok(logits.reshape(&[targets.len(), v])?.cross_entropy(targets)?)
    }

    /// Streams the prompt, then samples `n_new` tokens. Sequential mode
    /// only: the slot states (or KV cache) are the only carried state.
    pub fn generate(&self, prompt: &[usize], n_new: usize, sampling: Sampling, rng: &mut Rng) -> Result<Generation> {
        self.generate_with(prompt, n_new, sampling, rng, |_| {})
    }

    /// [`Model::generate`] calling `on_token` with each sampled token as
    /// soon as it is drawn.
    pub fn generate_with(
        &self,
        prompt: &[usize],
        n_new: usize,
        sampling: Sampling,
        rng: &mut Rng,
        mut on_token: impl FnMut(usize),
    ) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(LmnError::Config("prompt must contain at least one token".into()));
        }
        if !sampling.greedy && !(sampling.temperature > 0.0) {
            return Err(LmnError::Config("temperature must be positive".into()));
        }
        lmn_tensor::no_grad(|| {
            let mut state = self.start_stream(1);
            let mut tokens = prompt.to_vec();
            let mut all_logits = Vec::with_capacity(prompt.len() + n_new);
            let mut last = None;
            for &tok in prompt {
                last = Some(self.step(&mut state, &[tok])?);
                all_logits.push(last.as_ref().unwrap().data().iter().map(|v| v.as_f64() as f32).collect());
            }
            for i in 0..n_new {
                let logits = last.take().expect("prompt is non-empty");
                let next = sample(logits.data(), sampling, rng);
                tokens.push(next);
                on_token(next);
                if i + 1 < n_new {
                    let l = self.step(&mut state, &[next])?;
                    all_logits.push(l.data().iter().map(|v| v.as_f64() as f32).collect());
                    last = Some(l);
                }
            }
            Ok(Generation {
                tokens,
                logits: all_logits,
            })
        })
    }
}

/// Draws one token from logits.
pub fn sample<T: Float>(logits: &[T], sampling: Sampling, rng: &mut Rng) -> usize {
    let argmax = || {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        best
    };
    if sampling.greedy {
        return argmax();
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let weights: Vec<f64> = logits.iter().map(|v| ((v.as_f64() - max) / sampling.temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.unit() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    argmax()
}
