use super::{join, Module};
use crate::error::{Error, Result};
use crate::flops;
use crate::tensor::{Element, Tensor};

/// Per-position normalization across channels followed by a per-channel
/// affine map.
#[derive(Debug, Clone)]
pub struct ChannelNorm<T: Element = f32> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub epsilon: f64,
}

impl<T: Element> ChannelNorm<T> {
    pub const DEFAULT_EPSILON: f64 = 1e-6;

    /// Unit scale, zero shift.
    pub fn new(channels: usize) -> Self {
        ChannelNorm {
            scale: Tensor::<T>::ones(&[channels]).with_grad(),
            shift: Tensor::<T>::zeros(&[channels]).with_grad(),
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn from_parts(scale: Tensor<T>, shift: Tensor<T>, epsilon: f64) -> Result<Self> {
        if scale.rank() != 1 || scale.shape() != shift.shape() {
            return Err(Error::dims("channel_norm params", scale.shape(), shift.shape()));
        }
        if epsilon.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!("channel_norm epsilon must be > 0, got {epsilon}")));
        }
        Ok(ChannelNorm { scale, shift, epsilon })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        channel_norm(x, self)
    }
}

impl<T: Element> Module<T> for ChannelNorm<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "scale"), &self.scale);
        f(&join(prefix, "shift"), &self.shift);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "scale"), &mut self.scale);
        f(&join(prefix, "shift"), &mut self.shift);
    }
}

pub fn channel_norm<T: Element>(x: &Tensor<T>, p: &ChannelNorm<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.dim(1) != p.scale.numel() {
        return Err(Error::dims("channel_norm", x.shape(), p.scale.shape()));
    }
    let (n, c) = (x.dim(0), x.dim(1));
    let plane = x.dim(2) * x.dim(3);
    let eps = T::cast_from(p.epsilon);
    let inv_c = T::cast_from(1.0 / c as f64);
    let (src, scale, shift) = (x.data(), p.scale.data(), p.shift.data());

    let mut xhat = vec![T::zero(); src.len()];
    let mut inv_std = vec![T::zero(); n * plane];
    let mut mean = vec![T::zero(); plane];
    let mut var = vec![T::zero(); plane];
    for s in 0..n {
        let xs = &src[s * c * plane..(s + 1) * c * plane];
        mean.fill(T::zero());
        var.fill(T::zero());
        for ch in xs.chunks(plane) {
            for (m, &v) in mean.iter_mut().zip(ch) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_c);
        for ch in xs.chunks(plane) {
            for ((va, &v), &m) in var.iter_mut().zip(ch).zip(&mean) {
                let d = v - m;
                *va = *va + d * d;
            }
        }
        let istd = &mut inv_std[s * plane..(s + 1) * plane];
        for (is, &va) in istd.iter_mut().zip(&var) {
            *is = T::one() / (va * inv_c + eps).sqrt();
        }
        let xh = &mut xhat[s * c * plane..(s + 1) * c * plane];
        for (ch, dst) in xs.chunks(plane).zip(xh.chunks_mut(plane)) {
            for (((d, &v), &m), &is) in dst.iter_mut().zip(ch).zip(&mean).zip(istd.iter()) {
                *d = (v - m) * is;
            }
        }
    }
    let mut out = xhat.clone();
    for (i, ch) in out.chunks_mut(plane).enumerate() {
        let (a, b) = (scale[i % c], shift[i % c]);
        ch.iter_mut().for_each(|v| *v = *v * a + b);
    }
    flops::record(src.len() as u64);

    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        "channel_norm",
        vec![x.clone(), p.scale.clone(), p.shift.clone()],
        Box::new(move |g, parents| {
            let (px, ps, pb) = (&parents[0], &parents[1], &parents[2]);
            let scale = ps.data();
            let gscale = ps.requires_grad().then(|| {
                let mut d = vec![T::zero(); c];
                for (i, (gc, xc)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    d[i % c] = d[i % c] + gc.iter().zip(xc).map(|(&a, &b)| a * b).sum();
                }
                d
            });
            let gshift = pb.requires_grad().then(|| {
                let mut d = vec![T::zero(); c];
                for (i, gc) in g.chunks(plane).enumerate() {
                    d[i % c] = d[i % c] + gc.iter().copied().sum();
                }
                d
            });
            let gx = px.requires_grad().then(|| {
                let mut gx = vec![T::zero(); g.len()];
                let mut m1 = vec![T::zero(); plane];
                let mut m2 = vec![T::zero(); plane];
                for s in 0..n {
                    let range = s * c * plane..(s + 1) * c * plane;
                    let (gs, xs) = (&g[range.clone()], &xhat[range.clone()]);
                    m1.fill(T::zero());
                    m2.fill(T::zero());
                    for (ci, (gc, xc)) in gs.chunks(plane).zip(xs.chunks(plane)).enumerate() {
                        for p in 0..plane {
                            let d = gc[p] * scale[ci];
                            m1[p] = m1[p] + d;
                            m2[p] = m2[p] + d * xc[p];
                        }
                    }
                    let istd = &inv_std[s * plane..(s + 1) * plane];
                    let dst = &mut gx[range];
                    for (ci, ((dc, gc), xc)) in dst
                        .chunks_mut(plane)
                        .zip(gs.chunks(plane))
                        .zip(xs.chunks(plane))
                        .enumerate()
                    {
                        for p in 0..plane {
                            let d = gc[p] * scale[ci];
                            dc[p] = istd[p] * (d - m1[p] * inv_c - xc[p] * m2[p] * inv_c);
                        }
                    }
                }
                gx
            });
            vec![gx, gscale, gshift]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_vector_maps_to_shift() {
        let mut p = ChannelNorm::<f64>::new(3);
        p.shift = Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap();
        let x = Tensor::<f64>::full(&[1, 3, 1, 1], 4.0);
        let y = p.forward(&x).unwrap();
        assert_eq!(y.data(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn two_channel_hand_case() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = ChannelNorm::<f64>::new(2).forward(&x).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn normalized_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..2 * 5 * 3 * 3).map(|_| rng.random_range(-10.0..10.0)).collect();
        let x = Tensor::from_vec(&[2, 5, 3, 3], vals).unwrap();
        let y = ChannelNorm::<f64>::new(5).forward(&x).unwrap();
        for s in 0..2 {
            for p in 0..9 {
                let v: Vec<f64> = (0..5).map(|c| y.data()[(s * 5 + c) * 9 + p]).collect();
                let m = v.iter().sum::<f64>() / 5.0;
                let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 5.0;
                assert!(m.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn rejects_bad_params() {
        let s = Tensor::<f64>::ones(&[2]);
        assert!(ChannelNorm::from_parts(s.clone(), s.clone(), 0.0).is_err());
        let x = Tensor::<f64>::ones(&[1, 3, 1, 1]);
        assert!(ChannelNorm::<f64>::new(2).forward(&x).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.5..1.5)).collect() };
        let inputs = [
            Tensor::from_vec(&[2, 4, 3, 3], r(72)).unwrap(),
            Tensor::from_vec(&[4], r(4)).unwrap(),
            Tensor::from_vec(&[4], r(4)).unwrap(),
        ];
        let w = r(72);
        let rep = finite_diff_check(
            |t| {
                let p = ChannelNorm::from_parts(t[1].clone(), t[2].clone(), 1e-6)?;
                p.forward(&t[0])?.weighted_sum(&w)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
