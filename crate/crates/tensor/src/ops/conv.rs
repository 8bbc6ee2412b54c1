//! 1-D convolutions over the second-to-last axis of `[.., len, channels]`
//! tensors.

use crate::error::{Result, TensorError};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::alloc_zeroed;
use crate::{Float, Tensor};

impl<T: Float> Tensor<T> {
    /// Depthwise convolution with kernel 2 and stride 2:
    /// `[.., 2n, C]` with kernel `[C, 2]` gives `[.., n, C]` where
    /// `out[j, c] = k[c, 0]·x[2j, c] + k[c, 1]·x[2j+1, c]`.
    pub fn depthwise_conv_k2s2(&self, kernel: &Tensor<T>) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 || self.shape()[r - 2] % 2 != 0 || kernel.shape() != [self.shape()[r - 1], 2] {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv_k2s2",
                left: self.shape().to_vec(),
                right: kernel.shape().to_vec(),
            });
        }
        let c = self.shape()[r - 1];
        let pairs = self.numel() / (2 * c);
        let mut out_shape = self.shape().to_vec();
        out_shape[r - 2] /= 2;
        let mut out = alloc_zeroed(pairs * c)?;
        let (x, k) = (self.data(), kernel.data());
        for p in 0..pairs {
            let a = &x[(2 * p) * c..(2 * p + 1) * c];
            let b = &x[(2 * p + 1) * c..(2 * p + 2) * c];
            for ch in 0..c {
                out[p * c + ch] = k[2 * ch] * a[ch] + k[2 * ch + 1] * b[ch];
            }
        }
        let (xt, kt) = (self.clone(), kernel.clone());
        Ok(Tensor::from_op(
            "depthwise_conv_k2s2",
            out_shape,
            out,
            vec![self.clone(), kernel.clone()],
            move |g, _| {
                let (x, k) = (xt.data(), kt.data());
                let mut gx = vec![T::zero(); x.len()];
                let mut gk = vec![T::zero(); k.len()];
                for p in 0..pairs {
                    for ch in 0..c {
                        let gv = g[p * c + ch];
                        let ia = (2 * p) * c + ch;
                        let ib = (2 * p + 1) * c + ch;
                        gx[ia] = k[2 * ch] * gv;
                        gx[ib] = k[2 * ch + 1] * gv;
                        gk[2 * ch] += x[ia] * gv;
                        gk[2 * ch + 1] += x[ib] * gv;
                    }
                }
                vec![Some(gx), Some(gk)]
            },
        ))
    }

    /// Full convolution with kernel 2 and stride 2: `[.., 2n, Cin]` with
    /// weight `[2·Cin, Cout]` (taps stacked, first tap on top) gives
    /// `[.., n, Cout]`. Adjacent pairs are contiguous in row-major layout,
    /// so this is a reshape followed by a linear map.
    pub fn conv1d_k2s2(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 || self.shape()[r - 2] % 2 != 0 || weight.rank() != 2 || weight.shape()[0] != 2 * self.shape()[r - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_k2s2",
                left: self.shape().to_vec(),
                right: weight.shape().to_vec(),
            });
        }
        let mut paired = self.shape().to_vec();
        paired[r - 2] /= 2;
        paired[r - 1] *= 2;
        self.reshape(&paired)?.linear(weight, bias)
    }

    /// Transposed convolution with stride 1: `[N, w, Cin]` with weight
    /// `[K, Cin, Cout]` gives `[N, w + K - 1, Cout]` where
    /// `out[j] = Σ_m x[j - m] · W[m] (+ bias)`.
    pub fn conv_transpose1d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if self.rank() != 3 || weight.rank() != 3 || weight.shape()[1] != self.shape()[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose1d",
                left: self.shape().to_vec(),
                right: weight.shape().to_vec(),
            });
        }
        let (n, w, cin) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (kk, cout) = (weight.shape()[0], weight.shape()[2]);
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv_transpose1d",
                    left: weight.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
        }
        let wo = w + kk - 1;
        let mut out = alloc_zeroed(n * wo * cout)?;
        let (x, wd) = (self.data(), weight.data());
        for b in 0..n {
            let orows = &mut out[b * wo * cout..(b + 1) * wo * cout];
            if let Some(bias) = bias {
                for row in orows.chunks_exact_mut(cout) {
                    row.copy_from_slice(bias.data());
                }
            }
            for m in 0..kk {
                gemm_nn(
                    w,
                    cin,
                    cout,
                    &x[b * w * cin..(b + 1) * w * cin],
                    &wd[m * cin * cout..(m + 1) * cin * cout],
                    &mut orows[m * cout..(m + w) * cout],
                );
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let has_bias = bias.is_some();
        let (xt, wt) = (self.clone(), weight.clone());
        Ok(Tensor::from_op("conv_transpose1d", vec![n, wo, cout], out, inputs, move |g, _| {
            let (x, wd) = (xt.data(), wt.data());
            let gx = xt.requires_grad().then(|| {
                let mut gx = vec![T::zero(); n * w * cin];
                for b in 0..n {
                    for m in 0..kk {
                        gemm_nt(
                            w,
                            cout,
                            cin,
                            &g[(b * wo + m) * cout..(b * wo + m + w) * cout],
                            &wd[m * cin * cout..(m + 1) * cin * cout],
                            &mut gx[b * w * cin..(b + 1) * w * cin],
                        );
                    }
                }
                gx
            });
            let gw = wt.requires_grad().then(|| {
                let mut gw = vec![T::zero(); kk * cin * cout];
                for b in 0..n {
                    for m in 0..kk {
                        gemm_tn(
                            w,
                            cin,
                            cout,
                            &x[b * w * cin..(b + 1) * w * cin],
                            &g[(b * wo + m) * cout..(b * wo + m + w) * cout],
                            &mut gw[m * cin * cout..(m + 1) * cin * cout],
                        );
                    }
                }
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                let mut gb = vec![T::zero(); cout];
                for row in g.chunks_exact(cout) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                grads.push(Some(gb));
            }
            grads
        }))
    }
}
