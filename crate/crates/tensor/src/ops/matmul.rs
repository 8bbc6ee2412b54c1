use crate::error::{Result, TensorError};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::alloc_zeroed;
use crate::{Float, Tensor};

fn mismatch<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Repeats the row mask `keep` over the row count. The mask length must
/// divide the number of rows.
fn row_kept(keep: &[bool], row: usize) -> bool {
    keep[row % keep.len()]
}

impl<T: Float> Tensor<T> {
    /// `[.., K] x [K, N] -> [.., N]`; leading axes of the left operand are
    /// flattened into rows.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.linear_impl("matmul", rhs, None, None)
    }

    /// `x · W + b` with `W: [in, out]` and `b: [out]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.linear_impl("linear", weight, bias, None)
    }

    /// Like [`Tensor::linear`] but only rows with `keep[row % keep.len()]`
    /// are computed; the others are exactly zero and pass no gradient.
    pub fn linear_rows(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        keep: &[bool],
    ) -> Result<Tensor<T>> {
        self.linear_impl("linear_rows", weight, bias, Some(keep))
    }

    fn linear_impl(
        &self,
        op: &'static str,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        keep: Option<&[bool]>,
    ) -> Result<Tensor<T>> {
        if self.rank() < 1 || weight.rank() != 2 || *self.shape().last().unwrap() != weight.shape()[0] {
            return Err(mismatch(op, self, weight));
        }
        let k = weight.shape()[0];
        let n = weight.shape()[1];
        let m = self.numel() / k;
        if let Some(b) = bias {
            if b.shape() != [n] {
                return Err(mismatch(op, weight, b));
            }
        }
        let keep: Option<Vec<bool>> = keep.map(<[bool]>::to_vec);
        if let Some(kp) = &keep {
            if kp.is_empty() || m % kp.len() != 0 {
                return Err(TensorError::InvalidShape {
                    op,
                    shape: self.shape().to_vec(),
                    reason: format!("row mask of length {} does not tile {m} rows", kp.len()),
                });
            }
        }
        let mut out = alloc_zeroed(m * n)?;
        let x = self.data();
        let w = weight.data();
        for i in 0..m {
            if let Some(kp) = &keep {
                if !row_kept(kp, i) {
                    continue;
                }
            }
            let row = &mut out[i * n..(i + 1) * n];
            if let Some(b) = bias {
                row.copy_from_slice(b.data());
            }
            gemm_nn(1, k, n, &x[i * k..(i + 1) * k], w, row);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;

        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let (xt, wt) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(op, shape, out, inputs, move |g, _| {
            // masked-out rows contribute nothing
            let kept = |i: usize| keep.as_ref().is_none_or(|kp| row_kept(kp, i));
            let (x, w) = (xt.data(), wt.data());
            let gx = xt.requires_grad().then(|| {
                let mut gx = vec![T::zero(); m * k];
                for i in (0..m).filter(|&i| kept(i)) {
                    gemm_nt(1, n, k, &g[i * n..(i + 1) * n], w, &mut gx[i * k..(i + 1) * k]);
                }
                gx
            });
            let gw = wt.requires_grad().then(|| {
                let mut gw = vec![T::zero(); k * n];
                for i in (0..m).filter(|&i| kept(i)) {
                    gemm_tn(1, k, n, &x[i * k..(i + 1) * k], &g[i * n..(i + 1) * n], &mut gw);
                }
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                let mut gb = vec![T::zero(); n];
                for i in (0..m).filter(|&i| kept(i)) {
                    for (a, &v) in gb.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                        *a += v;
                    }
                }
                grads.push(Some(gb));
            }
            grads
        }))
    }

    /// Batched matmul `[Bt, M, K] x [Bt, K, N] -> [Bt, M, N]`.
    pub fn bmm(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 3 || rhs.rank() != 3 || self.shape()[0] != rhs.shape()[0] || self.shape()[2] != rhs.shape()[1] {
            return Err(mismatch("bmm", self, rhs));
        }
        let (bt, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let n = rhs.shape()[2];
        let mut out = alloc_zeroed(bt * m * n)?;
        for b in 0..bt {
            gemm_nn(
                m,
                k,
                n,
                &self.data()[b * m * k..],
                &rhs.data()[b * k * n..],
                &mut out[b * m * n..(b + 1) * m * n],
            );
        }
        let (a, r) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op("bmm", vec![bt, m, n], out, vec![self.clone(), rhs.clone()], move |g, _| {
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![T::zero(); bt * m * k];
                for b in 0..bt {
                    gemm_nt(m, n, k, &g[b * m * n..], &r.data()[b * k * n..], &mut ga[b * m * k..(b + 1) * m * k]);
                }
                ga
            });
            let gr = r.requires_grad().then(|| {
                let mut gr = vec![T::zero(); bt * k * n];
                for b in 0..bt {
                    gemm_tn(m, k, n, &a.data()[b * m * k..], &g[b * m * n..], &mut gr[b * k * n..(b + 1) * k * n]);
                }
                gr
            });
            vec![ga, gr]
        }))
    }

    /// Batched `[Bt, M, K] x [Bt, N, K]ᵀ -> [Bt, M, N]`.
    pub fn bmm_nt(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 3 || rhs.rank() != 3 || self.shape()[0] != rhs.shape()[0] || self.shape()[2] != rhs.shape()[2] {
            return Err(mismatch("bmm_nt", self, rhs));
        }
        let (bt, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let n = rhs.shape()[1];
        let mut out = alloc_zeroed(bt * m * n)?;
        for b in 0..bt {
            gemm_nt(
                m,
                k,
                n,
                &self.data()[b * m * k..],
                &rhs.data()[b * n * k..],
                &mut out[b * m * n..(b + 1) * m * n],
            );
        }
        let (a, r) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op("bmm_nt", vec![bt, m, n], out, vec![self.clone(), rhs.clone()], move |g, _| {
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![T::zero(); bt * m * k];
                for b in 0..bt {
                    gemm_nn(m, n, k, &g[b * m * n..], &r.data()[b * n * k..], &mut ga[b * m * k..(b + 1) * m * k]);
                }
                ga
            });
            let gr = r.requires_grad().then(|| {
                // dR[n×k] = gᵀ[n×m] · A[m×k]
                let mut gr = vec![T::zero(); bt * n * k];
                for b in 0..bt {
                    gemm_tn(m, n, k, &g[b * m * n..], &a.data()[b * m * k..], &mut gr[b * n * k..(b + 1) * n * k]);
                }
                gr
            });
            vec![ga, gr]
        }))
    }
}
