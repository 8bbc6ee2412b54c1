use crate::error::{Result, TensorError};
use crate::tensor::alloc_zeroed;
use crate::{Float, Tensor};

fn softmax_rows<T: Float>(x: &[T], n: usize, mask: Option<&[bool]>) -> Result<Vec<T>> {
    let mut out = alloc_zeroed(x.len())?;
    for (r, (row, orow)) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
        let valid = |j: usize| match mask {
            Some(m) => m[(r * n + j) % m.len()],
            None => true,
        };
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if valid(j) && v > max {
                max = v;
            }
        }
        let mut total = T::zero();
        for (j, (o, &v)) in orow.iter_mut().zip(row).enumerate() {
            // additive -inf masking: exp(-inf) is exactly zero
            let e = if valid(j) { (v - max).exp() } else { T::zero() };
            *o = e;
            total += e;
        }
        let inv = T::one() / total;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    Ok(out)
}

impl<T: Float> Tensor<T> {
    /// Softmax over the last axis. Entries that are `-inf` get weight 0.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        self.softmax_impl(None)
    }

    /// Softmax over the last axis after adding `-inf` wherever the mask is
    /// false. The mask is laid out over the trailing elements and repeated
    /// over leading axes; its length must divide the element count and be a
    /// multiple of the last extent.
    pub fn softmax_masked(&self, mask: &[bool]) -> Result<Tensor<T>> {
        self.softmax_impl(Some(mask))
    }

    fn softmax_impl(&self, mask: Option<&[bool]>) -> Result<Tensor<T>> {
        let n = *self.shape().last().ok_or(TensorError::InvalidShape {
            op: "softmax",
            shape: Vec::new(),
            reason: "scalar input".into(),
        })?;
        if let Some(m) = mask {
            if m.is_empty() || self.numel() % m.len() != 0 || m.len() % n != 0 {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_masked",
                    left: self.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let data = softmax_rows(self.data(), n, mask)?;
        Ok(Tensor::from_op("softmax", self.shape().to_vec(), data, vec![self.clone()], move |g, y| {
            let mut gx = vec![T::zero(); g.len()];
            for ((grow, yrow), xrow) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                let s: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for ((o, &gv), &yv) in xrow.iter_mut().zip(grow).zip(yrow) {
                    *o = yv * (gv - s);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let n = *self.shape().last().unwrap_or(&1);
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape().to_vec(),
                right: gamma.shape().to_vec(),
            });
        }
        let eps = T::from_f64(eps);
        let nf = T::from_usize(n);
        let rows = self.numel() / n;
        let mut xhat = alloc_zeroed(self.numel())?;
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = alloc_zeroed(self.numel())?;
        for (r, row) in self.data().chunks_exact(n).enumerate() {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gamma.data()[j] + beta.data()[j];
            }
        }
        let gm = gamma.clone();
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, _| {
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); n];
                let mut gb = vec![T::zero(); n];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..n {
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                        let dh = gr[j] * gm.data()[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    for j in 0..n {
                        let dh = gr[j] * gm.data()[j];
                        gx[r * n + j] = inv_std[r] * (dh - sum_dh / nf - hr[j] * sum_dh_h / nf);
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            },
        ))
    }

    /// Row lookup into a `[vocab, E]` table; output `[ids.len(), E]`.
    pub fn embedding(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        if table.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: table.shape().to_vec(),
                reason: "table must be rank 2".into(),
            });
        }
        let (v, e) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                extent: v,
            });
        }
        let idx: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        let out = table.index_select(0, &idx)?;
        debug_assert_eq!(out.shape(), [ids.len(), e]);
        Ok(out)
    }

    /// Mean cross-entropy of `[N, V]` logits against integer targets.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 || self.shape()[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: self.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let v = self.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                extent: v,
            });
        }
        let probs = softmax_rows(self.data(), v, None)?;
        let mut total = T::zero();
        for (r, row) in self.data().chunks_exact(v).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += lse - row[targets[r]];
        }
        let count = T::from_usize(targets.len());
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            "cross_entropy",
            Vec::new(),
            vec![total / count],
            vec![self.clone()],
            move |g, _| {
                let scale = g[0] / count;
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * v + t] -= scale;
                }
                vec![Some(gx)]
            },
        ))
    }
}
