//! Elementwise arithmetic. Broadcasting is limited to one case: the right
//! operand's shape may be a suffix of the left operand's shape, in which
//! case it is repeated over the leading axes (bias-style).

use crate::error::{Result, TensorError};
use crate::tensor::alloc_zeroed;
use crate::{Float, Tensor};

fn check_suffix<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: sa.to_vec(),
            right: sb.to_vec(),
        })
    }
}

/// Sums `g` (laid out like the left operand) over the repeated leading axes.
fn reduce_to_suffix<T: Float>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

impl<T: Float> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        check_suffix("add", self, rhs)?;
        let n = rhs.numel();
        let mut data = alloc_zeroed(self.numel())?;
        for (i, (o, &a)) in data.iter_mut().zip(self.data()).enumerate() {
            *o = a + rhs.data()[i % n];
        }
        let same = n == self.numel();
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            move |g, _| {
                let gb = if same { g.to_vec() } else { reduce_to_suffix(g, n) };
                vec![Some(g.to_vec()), Some(gb)]
            },
        ))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        check_suffix("sub", self, rhs)?;
        let n = rhs.numel();
        let mut data = alloc_zeroed(self.numel())?;
        for (i, (o, &a)) in data.iter_mut().zip(self.data()).enumerate() {
            *o = a - rhs.data()[i % n];
        }
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            move |g, _| {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                vec![Some(g.to_vec()), Some(reduce_to_suffix(&neg, n))]
            },
        ))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        check_suffix("mul", self, rhs)?;
        let n = rhs.numel();
        let mut data = alloc_zeroed(self.numel())?;
        for (i, (o, &a)) in data.iter_mut().zip(self.data()).enumerate() {
            *o = a * rhs.data()[i % n];
        }
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            move |g, _| {
                let ga = if a.requires_grad() {
                    Some(g.iter().enumerate().map(|(i, &v)| v * b.data()[i % n]).collect())
                } else {
                    None
                };
                let gb = if b.requires_grad() {
                    let prod: Vec<T> = g.iter().zip(a.data()).map(|(&v, &x)| v * x).collect();
                    Some(reduce_to_suffix(&prod, n))
                } else {
                    None
                };
                vec![ga, gb]
            },
        ))
    }

    pub fn scale(&self, s: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&v| v * s).collect();
        Ok(Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g, _| vec![Some(g.iter().map(|&v| v * s).collect())],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let three = T::from_f64(3.0);
        let one = T::one();
        let mut data = alloc_zeroed(self.numel())?;
        for (o, &x) in data.iter_mut().zip(self.data()) {
            *o = half * x * (one + (c * (x + k * x * x * x)).tanh());
        }
        let x = self.clone();
        Ok(Tensor::from_op(
            "gelu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g, _| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &x)| {
                        let u = c * (x + k * x * x * x);
                        let th = u.tanh();
                        let du = c * (one + three * k * x * x);
                        g * (half * (one + th) + half * x * (one - th * th) * du)
                    })
                    .collect();
                vec![Some(gx)]
            },
        ))
    }

    pub fn sum(&self) -> Result<Tensor<T>> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Ok(Tensor::from_op("sum", Vec::new(), vec![s], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        }))
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = T::from_usize(self.numel());
        self.sum()?.scale(T::one() / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_style_broadcast() {
        let a = Tensor::<f64>::from_vec(vec![1., 2., 3., 4.], &[2, 2]).unwrap();
        let b = Tensor::param(vec![10., 20.], &[2]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[11., 22., 13., 24.]);
        c.sum().unwrap().backward().unwrap();
        assert_eq!(&*b.grad().unwrap(), &[2., 2.]);
    }

    #[test]
    fn mismatched_shapes_name_both() {
        let a = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[2]).unwrap();
        match a.add(&b) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn linear_function_gradient() {
        // loss = sum(w * x), w = [1, 2], x = [3, 4] => dL/dw = x
        let w = Tensor::<f32>::param(vec![1., 2.], &[2]).unwrap();
        let x = Tensor::from_vec(vec![3., 4.], &[2]).unwrap();
        let loss = w.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(&*w.grad().unwrap(), &[3., 4.]);
    }
}
