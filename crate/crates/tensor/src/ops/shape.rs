use crate::error::{Result, TensorError};
use crate::tensor::{alloc_zeroed, numel_of};
use crate::{Float, Tensor};

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis < shape.len() {
        Ok(())
    } else {
        Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        })
    }
}

impl<T: Float> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// Generalized transpose: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: self.shape().to_vec(),
                reason: format!("bad permutation {perm:?}"),
            });
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        // source offset for each output element
        let n = self.numel();
        let mut index = Vec::with_capacity(n);
        let mut coord = vec![0usize; rank];
        for _ in 0..n {
            let off: usize = (0..rank).map(|i| coord[i] * in_strides[perm[i]]).sum();
            index.push(off);
            for ax in (0..rank).rev() {
                coord[ax] += 1;
                if coord[ax] < out_shape[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }
        let data = index.iter().map(|&i| self.data()[i]).collect();
        Ok(Tensor::from_op("permute", out_shape, data, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for (o, &src) in index.iter().enumerate() {
                gx[src] = g[o];
            }
            vec![Some(gx)]
        }))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        check_axis("transpose", self.shape(), a.max(b))?;
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            op: "concat",
            shape: Vec::new(),
            reason: "no inputs".into(),
        })?;
        check_axis("concat", first.shape(), axis)?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let mut data = alloc_zeroed(outer * total * inner)?;
        let mut offset = 0;
        for (p, &ext) in parts.iter().zip(&extents) {
            let block = ext * inner;
            for o in 0..outer {
                let dst = o * total * inner + offset * inner;
                data[dst..dst + block].copy_from_slice(&p.data()[o * block..(o + 1) * block]);
            }
            offset += ext;
        }
        Ok(Tensor::from_op("concat", out_shape, data, parts.to_vec(), move |g, _| {
            let mut grads = Vec::with_capacity(extents.len());
            let mut offset = 0;
            for &ext in &extents {
                let block = ext * inner;
                let mut gp = Vec::with_capacity(outer * block);
                for o in 0..outer {
                    let src = o * total * inner + offset * inner;
                    gp.extend_from_slice(&g[src..src + block]);
                }
                grads.push(Some(gp));
                offset += ext;
            }
            grads
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        check_axis("narrow", self.shape(), axis)?;
        let (outer, ext, inner) = split_axis(self.shape(), axis);
        if len == 0 || start + len > ext {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                extent: ext,
            });
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * ext + start) * inner;
            data.extend_from_slice(&self.data()[src..src + len * inner]);
        }
        Ok(Tensor::from_op("narrow", out_shape, data, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); outer * ext * inner];
            for o in 0..outer {
                let dst = (o * ext + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Selects entries along `axis`. `None` produces a zero slice, which is
    /// how absent memory levels are materialized.
    pub fn index_select(&self, axis: usize, index: &[Option<usize>]) -> Result<Tensor<T>> {
        check_axis("index_select", self.shape(), axis)?;
        let (outer, ext, inner) = split_axis(self.shape(), axis);
        if let Some(&bad) = index.iter().flatten().find(|&&i| i >= ext) {
            return Err(TensorError::IndexOutOfRange {
                op: "index_select",
                index: bad,
                extent: ext,
            });
        }
        if index.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "index_select",
                shape: self.shape().to_vec(),
                reason: "empty index".into(),
            });
        }
        let m = index.len();
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = m;
        let mut data = alloc_zeroed(outer * m * inner)?;
        for o in 0..outer {
            for (j, idx) in index.iter().enumerate() {
                if let Some(i) = *idx {
                    let src = (o * ext + i) * inner;
                    let dst = (o * m + j) * inner;
                    data[dst..dst + inner].copy_from_slice(&self.data()[src..src + inner]);
                }
            }
        }
        let index = index.to_vec();
        Ok(Tensor::from_op("index_select", out_shape, data, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); outer * ext * inner];
            for o in 0..outer {
                for (j, idx) in index.iter().enumerate() {
                    if let Some(i) = *idx {
                        let dst = (o * ext + i) * inner;
                        let src = (o * m + j) * inner;
                        for (a, &b) in gx[dst..dst + inner].iter_mut().zip(&g[src..src + inner]) {
                            *a += b;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}
