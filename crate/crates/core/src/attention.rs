//! Single-vector attention: every position attends over its own memory
//! entries only, scoring each entry against the current token.

use lmn_tensor::kernels::{axpy, dot};
use lmn_tensor::{Float, Rng, Tensor};

use crate::config::ScoreOrientation;
use crate::counters;
use crate::error::{LmnError, Result};
use crate::memory::MemoryTensor;

#[derive(Clone, Debug)]
pub struct AttentionOutput<T: Float = f32> {
    /// Weighted sum of values, `[B, L, E]`, before the output projection.
    pub values: Tensor<T>,
    /// Attention weights `[B, L, D]`.
    pub weights: Tensor<T>,
}

fn check_qkv<T: Float>(e: usize, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    if weight.shape() != [e, 3 * e] || bias.shape() != [3 * e] {
        return Err(LmnError::Config(format!(
            "qkv weight must be [{e}, {}] with a [{}] bias, got {:?} and {:?}",
            3 * e,
            3 * e,
            weight.shape(),
            bias.shape()
        )));
    }
    Ok(())
}

fn project_part<T: Float>(mem: &MemoryTensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, i: usize, rows: &[bool]) -> Result<Tensor<T>> {
    let e = mem.embed();
    let w = weight.narrow(1, i * e, e)?;
    let b = bias.narrow(0, i * e, e)?;
    Ok(mem.data.linear_rows(&w, Some(&b), rows)?)
}

/// Projects every memory entry to `(Q, K, V)`, each `[B, L, D, E]`.
/// Entries at invalid positions stay exactly zero.
pub fn qkv_project<T: Float>(
    mem: &MemoryTensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    check_qkv(mem.embed(), weight, bias)?;
    Ok((
        project_part(mem, weight, bias, 0, &mem.valid)?,
        project_part(mem, weight, bias, 1, &mem.valid)?,
        project_part(mem, weight, bias, 2, &mem.valid)?,
    ))
}

/// Like [`qkv_project`] but computes only the rows the scores read: every
/// valid entry for V, every valid entry for Q (literal) or K (swapped), and
/// entry 0 alone for the other one. The rows computed are bit-identical to
/// the full projection; the rest are zero.
pub fn qkv_project_scored<T: Float>(
    mem: &MemoryTensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    orientation: ScoreOrientation,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    check_qkv(mem.embed(), weight, bias)?;
    let d = mem.depth();
    let current: Vec<bool> = mem.valid.iter().enumerate().map(|(r, &v)| v && r % d == 0).collect();
    let (q_rows, k_rows) = match orientation {
        ScoreOrientation::Literal => (&mem.valid, &current),
        ScoreOrientation::Swapped => (&current, &mem.valid),
    };
    Ok((
        project_part(mem, weight, bias, 0, q_rows)?,
        project_part(mem, weight, bias, 1, k_rows)?,
        project_part(mem, weight, bias, 2, &mem.valid)?,
    ))
}

/// `scores[b,t,i] = Q[b,t,i]·K[b,t,0] / √E` (literal) or
/// `Q[b,t,0]·K[b,t,i] / √E` (swapped). Invalid entries are left at zero
/// and skipped; `Σ valid · E` multiply-accumulates are counted.
pub fn single_vector_scores<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    valid: &[bool],
    orientation: ScoreOrientation,
) -> Result<Tensor<T>> {
    if q.rank() != 4 || q.shape() != k.shape() {
        return Err(LmnError::Config(format!(
            "scores expect matching [B, L, D, E] tensors, got {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let (b, l, d, e) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    if valid.len() != l * d {
        return Err(LmnError::Config(format!("validity mask has {} entries, expected {}", valid.len(), l * d)));
    }
    let scale = T::from_f64(1.0 / (e as f64).sqrt());
    let mut out = lmn_tensor::alloc_zeroed(b * l * d)?;
    let (qd, kd) = (q.data(), k.data());
    let mut macs = 0u64;
    for bt in 0..b * l {
        let t = bt % l;
        let base = bt * d * e;
        for i in 0..d {
            if !valid[t * d + i] {
                continue;
            }
            let (qi, ki) = match orientation {
                ScoreOrientation::Literal => (base + i * e, base),
                ScoreOrientation::Swapped => (base, base + i * e),
            };
            out[bt * d + i] = dot(&qd[qi..qi + e], &kd[ki..ki + e]) * scale;
            macs += e as u64;
        }
    }
    counters::add_score_macs(macs);

    let valid = valid.to_vec();
    let (qt, kt) = (q.clone(), k.clone());
    Ok(Tensor::from_op("single_vector_scores", vec![b, l, d], out, vec![q.clone(), k.clone()], move |g, _| {
        let (qd, kd) = (qt.data(), kt.data());
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        for bt in 0..b * l {
            let t = bt % l;
            let base = bt * d * e;
            for i in 0..d {
                if !valid[t * d + i] {
                    continue;
                }
                let gs = g[bt * d + i] * scale;
                let (qi, ki) = match orientation {
                    ScoreOrientation::Literal => (base + i * e, base),
                    ScoreOrientation::Swapped => (base, base + i * e),
                };
                axpy(gs, &kd[ki..ki + e], &mut gq[qi..qi + e]);
                axpy(gs, &qd[qi..qi + e], &mut gk[ki..ki + e]);
            }
        }
        vec![Some(gq), Some(gk)]
    }))
}

/// Softmax over the entry axis with `-inf` at invalid entries.
pub fn mask_softmax<T: Float>(scores: &Tensor<T>, valid: &[bool]) -> Result<Tensor<T>> {
    Ok(scores.softmax_masked(valid)?)
}

/// `values[b,t] = Σ_i weights[b,t,i] · V[b,t,i]`.
pub fn weighted_sum<T: Float>(weights: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, l, d, e) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
    let w = weights.reshape(&[b * l, 1, d])?;
    Ok(w.bmm(&v.reshape(&[b * l, d, e])?)?.reshape(&[b, l, e])?)
}

/// QKV projection plus output projection of one attention layer.
#[derive(Clone, Debug)]
pub struct Attention<T: Float = f32> {
    pub qkv_weight: Tensor<T>,
    pub qkv_bias: Tensor<T>,
    pub proj_weight: Tensor<T>,
    pub proj_bias: Tensor<T>,
}

impl<T: Float> Attention<T> {
    pub fn new(embed: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (embed as f64).sqrt();
        Ok(Attention {
            qkv_weight: rng.uniform_param(&[embed, 3 * embed], bound)?,
            qkv_bias: rng.uniform_param(&[3 * embed], bound)?,
            proj_weight: rng.uniform_param(&[embed, embed], bound)?,
            proj_bias: rng.uniform_param(&[embed], bound)?,
        })
    }

    pub fn attend(&self, mem: &MemoryTensor<T>, orientation: ScoreOrientation) -> Result<AttentionOutput<T>> {
        let (q, k, v) = qkv_project_scored(mem, &self.qkv_weight, &self.qkv_bias, orientation)?;
        let scores = single_vector_scores(&q, &k, &mem.valid, orientation)?;
        let weights = mask_softmax(&scores, &mem.valid)?;
        let values = weighted_sum(&weights, &v)?;
        Ok(AttentionOutput { values, weights })
    }

    /// Attention followed by the output projection, `[B, L, E]`.
    pub fn forward(&self, mem: &MemoryTensor<T>, orientation: ScoreOrientation) -> Result<Tensor<T>> {
        let out = self.attend(mem, orientation)?;
        Ok(out.values.linear(&self.proj_weight, Some(&self.proj_bias))?)
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("qkv.weight", &self.qkv_weight),
            ("qkv.bias", &self.qkv_bias),
            ("proj.weight", &self.proj_weight),
            ("proj.bias", &self.proj_bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.qkv_weight, &mut self.qkv_bias, &mut self.proj_weight, &mut self.proj_bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_hand_example() {
        // E=4, one position, two entries
        let mut qd = vec![0.0f32; 8];
        let mut kd = vec![0.0f32; 8];
        qd[4] = 1.0; // Q[1] = e0
        kd[0] = 2.0; // K[0] = 2·e0
        let q = Tensor::from_vec(qd, &[1, 1, 2, 4]).unwrap();
        let k = Tensor::from_vec(kd, &[1, 1, 2, 4]).unwrap();
        let s = single_vector_scores(&q, &k, &[true, true], ScoreOrientation::Literal).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0]);
    }

    #[test]
    fn orthogonal_entries_score_zero() {
        let q = Tensor::from_vec(vec![0., 1., 0., 1.], &[1, 1, 2, 2]).unwrap();
        let k = Tensor::from_vec(vec![1., 0., 0., 0.], &[1, 1, 2, 2]).unwrap();
        let s = single_vector_scores(&q, &k, &[true, true], ScoreOrientation::Literal).unwrap();
        assert_eq!(s.data(), &[0.0f32, 0.0]);
    }

    #[test]
    fn equal_scores_split_weight() {
        let s = Tensor::<f32>::zeros(&[1, 1, 3]).unwrap();
        let w = mask_softmax(&s, &[true, false, true]).unwrap();
        assert_eq!(w.data(), &[0.5, 0.0, 0.5]);
        let w = mask_softmax(&s, &[true, false, false]).unwrap();
        assert_eq!(w.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn weighted_sum_means() {
        let w = Tensor::from_vec(vec![0.5f32, 0.5], &[1, 1, 2]).unwrap();
        let v = Tensor::from_vec(vec![1., 2., 3., 4.], &[1, 1, 2, 2]).unwrap();
        assert_eq!(weighted_sum(&w, &v).unwrap().data(), &[2., 3.]);
    }
}
