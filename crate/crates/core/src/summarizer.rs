//! Pair-merging layers. Every summarizer maps a batch of concatenated
//! block pairs `[N, 2w, E]` (older block first) to merged blocks
//! `[N, w + k, E]`, where `k` is the expansion factor (0 unless the
//! expander is in use).

use lmn_tensor::{Float, Rng, Tensor};

use crate::counters;
use crate::error::{LmnError, Result};

#[derive(Clone, Debug)]
pub enum Summarizer<T: Float = f32> {
    /// `concat(a, b) · W + bias` with `W: [2E, E]`.
    Linear { weight: Tensor<T>, bias: Tensor<T> },
    /// Depthwise kernel-2 stride-2 convolution `[E, 2]` followed by a
    /// pointwise `[E, E]` map and bias.
    DsConv {
        depthwise: Tensor<T>,
        pointwise: Tensor<T>,
        bias: Tensor<T>,
    },
    /// Kernel-2 stride-2 convolution over the slot axis `[2w, E] → [w, E]`
    /// (weight `[2E, E]`, taps stacked), then a stride-1 transposed
    /// convolution with kernel `k + 1` (weight `[k+1, E, E]`) giving
    /// `[w + k, E]`.
    Expander {
        weight: Tensor<T>,
        bias: Tensor<T>,
        expander: Tensor<T>,
        expander_bias: Tensor<T>,
    },
}

impl<T: Float> Summarizer<T> {
    pub fn linear(embed: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / ((2 * embed) as f64).sqrt();
        Ok(Summarizer::Linear {
            weight: rng.uniform_param(&[2 * embed, embed], bound)?,
            bias: rng.uniform_param(&[embed], bound)?,
        })
    }

    pub fn dsconv(embed: usize, rng: &mut Rng) -> Result<Self> {
        let dw = 1.0 / 2f64.sqrt();
        let pw = 1.0 / (embed as f64).sqrt();
        Ok(Summarizer::DsConv {
            depthwise: rng.uniform_param(&[embed, 2], dw)?,
            pointwise: rng.uniform_param(&[embed, embed], pw)?,
            bias: rng.uniform_param(&[embed], pw)?,
        })
    }

    pub fn expander(embed: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        if k == 0 {
            return Err(LmnError::Config("expander requires k >= 1".into()));
        }
        let sb = 1.0 / ((2 * embed) as f64).sqrt();
        let eb = 1.0 / (((k + 1) * embed) as f64).sqrt();
        Ok(Summarizer::Expander {
            weight: rng.uniform_param(&[2 * embed, embed], sb)?,
            bias: rng.uniform_param(&[embed], sb)?,
            expander: rng.uniform_param(&[k + 1, embed, embed], eb)?,
            expander_bias: rng.uniform_param(&[embed], eb)?,
        })
    }

    pub fn embed(&self) -> usize {
        match self {
            Summarizer::Linear { bias, .. } | Summarizer::DsConv { bias, .. } | Summarizer::Expander { bias, .. } => {
                bias.shape()[0]
            }
        }
    }

    /// Slots added per merge.
    pub fn growth(&self) -> usize {
        match self {
            Summarizer::Expander { expander, .. } => expander.shape()[0] - 1,
            _ => 0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Summarizer::Linear { .. } => "linear",
            Summarizer::DsConv { .. } => "dsconv",
            Summarizer::Expander { .. } => "expander",
        }
    }

    /// `[N, 2w, E] → [N, w + k, E]`.
    pub fn merge(&self, pairs: &Tensor<T>) -> Result<Tensor<T>> {
        let e = self.embed();
        if pairs.rank() != 3 || pairs.shape()[2] != e || pairs.shape()[1] % 2 != 0 {
            return Err(LmnError::Config(format!(
                "{} summarizer expects [N, 2w, {e}], got {:?}",
                self.kind_name(),
                pairs.shape()
            )));
        }
        let (n, w) = (pairs.shape()[0], pairs.shape()[1] / 2);
        counters::add_summarizer_ops(n as u64);
        match self {
            Summarizer::Linear { weight, bias } => {
                if w != 1 {
                    return Err(LmnError::Config(format!("linear summarizer merges width-1 blocks, got width {w}")));
                }
                Ok(pairs.reshape(&[n, 2 * e])?.linear(weight, Some(bias))?.reshape(&[n, 1, e])?)
            }
            Summarizer::DsConv {
                depthwise,
                pointwise,
                bias,
            } => {
                if w != 1 {
                    return Err(LmnError::Config(format!("dsconv summarizer merges width-1 blocks, got width {w}")));
                }
                Ok(pairs.depthwise_conv_k2s2(depthwise)?.linear(pointwise, Some(bias))?)
            }
            Summarizer::Expander {
                weight,
                bias,
                expander,
                expander_bias,
            } => {
                counters::add_expander_ops(n as u64);
                let condensed = pairs.conv1d_k2s2(weight, Some(bias))?;
                Ok(condensed.conv_transpose1d(expander, Some(expander_bias))?)
            }
        }
    }

    /// Merges two blocks of equal width, `a` older than `b`.
    pub fn merge_pair(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(LmnError::Config(format!(
                "cannot merge blocks of shapes {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        self.merge(&Tensor::concat(&[a.clone(), b.clone()], 1)?)
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Summarizer::Linear { weight, bias } => vec![("weight", weight), ("bias", bias)],
            Summarizer::DsConv {
                depthwise,
                pointwise,
                bias,
            } => vec![("depthwise", depthwise), ("pointwise", pointwise), ("bias", bias)],
            Summarizer::Expander {
                weight,
                bias,
                expander,
                expander_bias,
            } => vec![
                ("weight", weight),
                ("bias", bias),
                ("expander.weight", expander),
                ("expander.bias", expander_bias),
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Summarizer::Linear { weight, bias } => vec![weight, bias],
            Summarizer::DsConv {
                depthwise,
                pointwise,
                bias,
            } => vec![depthwise, pointwise, bias],
            Summarizer::Expander {
                weight,
                bias,
                expander,
                expander_bias,
            } => vec![weight, bias, expander, expander_bias],
        }
    }
}

/// Total slot entries over `levels` levels with expansion `k`:
/// `S + k·S(S−1)/2`.
pub fn expanded_entry_total(levels: usize, k: usize) -> usize {
    levels + k * levels * (levels.saturating_sub(1)) / 2
}
