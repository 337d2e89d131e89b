use std::f64::consts::{FRAC_1_SQRT_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Sigmoid,
    Relu,
}

pub fn activation<T: Element>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Gelu => gelu(x),
        Activation::Sigmoid => sigmoid(x),
        Activation::Relu => relu(x),
    }
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::cast_from(0.5);
    let inv_sqrt2 = T::cast_from(FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::cast_from(1.0 / (2.0 * PI).sqrt());
    x.map_with_grad(
        "gelu",
        move |v| v * half * (T::one() + (v * inv_sqrt2).erf()),
        move |v, _| {
            let cdf = half * (T::one() + (v * inv_sqrt2).erf());
            let pdf = inv_sqrt_2pi * (-(v * v) * half).exp();
            cdf + v * pdf
        },
    )
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map_with_grad(
        "sigmoid",
        |v| {
            // split by sign so exp never overflows
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        },
        |_, y| y * (T::one() - y),
    )
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map_with_grad(
        "relu",
        |v| v.max(T::zero()),
        |v, _| if v > T::zero() { T::one() } else { T::zero() },
    )
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::Contract(format!(
            "softmax axis {axis} on shape {:?}",
            x.shape()
        )));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let len = x.dim(axis);
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(src[base + j * inner]);
            }
            let mut z = T::zero();
            for j in 0..len {
                let e = (src[base + j * inner] - m).exp();
                out[base + j * inner] = e;
                z = z + e;
            }
            for j in 0..len {
                out[base + j * inner] = out[base + j * inner] / z;
            }
        }
    }
    flops::record(src.len() as u64);
    let y = if x.requires_grad() { out.clone() } else { Vec::new() };
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        "softmax",
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for j in 0..len {
                        dot = dot + g[base + j * inner] * y[base + j * inner];
                    }
                    for j in 0..len {
                        let k = base + j * inner;
                        gx[k] = y[k] * (g[k] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn symmetry_points() {
        assert_eq!(gelu(&t(&[1], &[0.0])).item(), 0.0);
        assert_eq!(sigmoid(&t(&[1], &[0.0])).item(), 0.5);
        assert_eq!(relu(&t(&[2], &[-1.0, 2.0])).data(), &[0.0, 2.0]);
    }

    #[test]
    fn gelu_at_one_is_normal_cdf() {
        // Φ(1) = 0.841344746...
        let v = gelu(&t(&[1], &[1.0])).item();
        assert!((v - 0.841345).abs() < 1e-6, "{v}");
    }

    #[test]
    fn sigmoid_of_ln3() {
        let v = sigmoid(&t(&[1], &[3f64.ln()])).item();
        assert!((v - 0.75).abs() < 1e-15);
        assert_eq!(sigmoid(&t(&[2], &[1000.0, -1000.0])).data(), &[1.0, 0.0]);
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let x = Tensor::<f64>::parameter(&[1], vec![0.0]).unwrap();
        sigmoid(&x).sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25]);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap().data(), &[0.5, 0.5]);
        let v = softmax(&t(&[2], &[0.0, 2f64.ln()]), 0).unwrap();
        assert!((v.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(softmax(&t(&[2], &[1000.0, 1000.0]), 0).unwrap().data(), &[0.5, 0.5]);
        assert!(softmax(&t(&[2], &[0.0, 0.0]), 1).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = t(&[2, 3, 2], &[-1.3, -0.4, 0.2, 0.9, 1.7, -2.2, 0.35, -0.05, 1.1, -0.8, 0.6, 2.4]);
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).cos()).collect();
        for kind in [Activation::Gelu, Activation::Sigmoid, Activation::Relu] {
            let r = finite_diff_check(|a| activation(&a[0], kind).weighted_sum(&w), &[x.clone()], 1e-5, 1e-4)
                .unwrap();
            assert!(r.passed, "{kind:?}: {r:?}");
        }
        for axis in 0..3 {
            let r = finite_diff_check(|a| softmax(&a[0], axis)?.weighted_sum(&w), &[x.clone()], 1e-5, 1e-4)
                .unwrap();
            assert!(r.passed, "softmax axis {axis}: {r:?}");
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(vals in proptest::collection::vec(-1e4f64..1e4, 12), axis in 0usize..3) {
            let y = softmax(&t(&[2, 3, 2], &vals), axis).unwrap();
            let shape = [2usize, 3, 2];
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..shape[axis]).map(|j| y.data()[o * shape[axis] * inner + j * inner + i]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
            prop_assert!(y.data().iter().all(|v| *v >= 0.0));
        }
    }
}
