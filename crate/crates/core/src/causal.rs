//! Causal scaled dot-product attention for the baseline decoder.

use lmn_tensor::kernels::{axpy, dot};
use lmn_tensor::{alloc_zeroed, Float, Tensor};

use crate::counters;
use crate::error::{LmnError, Result};

/// `q: [B, M, E]`, `k, v: [B, N, E]`; query `m` sits at absolute position
/// `offset + m` and attends keys `0..=offset + m`. Returns `[B, M, E]`.
///
/// The full `[B, M, N]` probability matrix is materialized, as in a
/// standard implementation. Score multiply-accumulates counted:
/// `E · Σ_m (offset + m + 1)`.
pub fn causal_attention<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, offset: usize) -> Result<Tensor<T>> {
    if q.rank() != 3 || k.rank() != 3 || k.shape() != v.shape() || q.shape()[0] != k.shape()[0] || q.shape()[2] != k.shape()[2] {
        return Err(LmnError::Config(format!(
            "causal attention shapes q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (b, m, e) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let n = k.shape()[1];
    if offset + m > n {
        return Err(LmnError::Config(format!("{m} queries at offset {offset} need {} keys, have {n}", offset + m)));
    }
    let scale = T::from_f64(1.0 / (e as f64).sqrt());
    let mut probs = alloc_zeroed::<T>(b * m * n)?;
    let mut out = alloc_zeroed::<T>(b * m * e)?;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut macs = 0u64;
    for bi in 0..b {
        for mi in 0..m {
            let span = offset + mi + 1;
            let qrow = &qd[(bi * m + mi) * e..(bi * m + mi + 1) * e];
            let prow = &mut probs[(bi * m + mi) * n..(bi * m + mi) * n + span];
            let mut max = T::neg_infinity();
            for (j, p) in prow.iter_mut().enumerate() {
                let s = dot(qrow, &kd[(bi * n + j) * e..(bi * n + j + 1) * e]) * scale;
                *p = s;
                if s > max {
                    max = s;
                }
            }
            macs += (span * e) as u64;
            let mut total = T::zero();
            for p in prow.iter_mut() {
                *p = (*p - max).exp();
                total += *p;
            }
            let inv = T::one() / total;
            let orow = &mut out[(bi * m + mi) * e..(bi * m + mi + 1) * e];
            for (j, p) in prow.iter_mut().enumerate() {
                *p *= inv;
                axpy(*p, &vd[(bi * n + j) * e..(bi * n + j + 1) * e], orow);
            }
        }
    }
    counters::add_score_macs(macs);

    let (qt, kt, vt) = (q.clone(), k.clone(), v.clone());
    Ok(Tensor::from_op(
        "causal_attention",
        vec![b, m, e],
        out,
        vec![q.clone(), k.clone(), v.clone()],
        move |g, _| {
            let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
            let mut gq = vec![T::zero(); qd.len()];
            let mut gk = vec![T::zero(); kd.len()];
            let mut gv = vec![T::zero(); vd.len()];
            let mut dp = vec![T::zero(); n];
            for bi in 0..b {
                for mi in 0..m {
                    let span = offset + mi + 1;
                    let row = bi * m + mi;
                    let grow = &g[row * e..(row + 1) * e];
                    let prow = &probs[row * n..row * n + span];
                    let mut s = T::zero();
                    for j in 0..span {
                        let vj = &vd[(bi * n + j) * e..(bi * n + j + 1) * e];
                        dp[j] = dot(grow, vj);
                        s += dp[j] * prow[j];
                        axpy(prow[j], grow, &mut gv[(bi * n + j) * e..(bi * n + j + 1) * e]);
                    }
                    let qrow = &qd[row * e..(row + 1) * e];
                    for j in 0..span {
                        let ds = prow[j] * (dp[j] - s) * scale;
                        axpy(ds, &kd[(bi * n + j) * e..(bi * n + j + 1) * e], &mut gq[row * e..(row + 1) * e]);
                        axpy(ds, qrow, &mut gk[(bi * n + j) * e..(bi * n + j + 1) * e]);
                    }
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lmn_tensor::{grad_check, Rng, Stencil};

    #[test]
    fn first_position_copies_its_value() {
        let q = Tensor::from_vec(vec![1.0f32, 0.0, 0.0, 1.0], &[1, 2, 2]).unwrap();
        let v = Tensor::from_vec(vec![3.0f32, 4.0, 5.0, 6.0], &[1, 2, 2]).unwrap();
        let out = causal_attention(&q, &q, &v, 0).unwrap();
        assert_eq!(&out.data()[..2], &[3.0, 4.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let mk = |rng: &mut Rng| Tensor::<f64>::from_vec(rng.uniform_vec(2 * 3 * 2, 1.0), &[2, 3, 2]).unwrap();
        let params = [("q", mk(&mut rng)), ("k", mk(&mut rng)), ("v", mk(&mut rng))];
        let w = Tensor::from_vec(rng.uniform_vec(12, 1.0), &[2, 3, 2]).unwrap();
        let r = grad_check(
            |p| Ok(causal_attention(&p[0], &p[1], &p[2], 0).unwrap().mul(&w)?.sum()?),
            &params,
            1e-5,
            Stencil::Central,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
