use super::{numel, Element, Tensor};
use crate::error::{Error, Result};
use crate::flops;

/// Strides that map a `target`-shaped index onto a tensor of shape `b`,
/// where `b` may have unit extents along any axis. `None` when `b` cannot
/// broadcast to `target` (ranks must match).
pub fn broadcast_strides(target: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if target.len() != b.len() {
        return None;
    }
    let mut strides = vec![0; b.len()];
    let mut acc = 1;
    for ax in (0..b.len()).rev() {
        if b[ax] == target[ax] {
            strides[ax] = if b[ax] == 1 { 0 } else { acc };
        } else if b[ax] != 1 {
            return None;
        }
        acc *= b[ax];
    }
    Some(strides)
}

/// Calls `f(target_index, b_index)` for every element of `shape` in
/// row-major order.
pub(crate) fn for_each_broadcast(shape: &[usize], bstrides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let last = shape[rank - 1];
    let last_stride = bstrides[rank - 1];
    let outer = numel(shape) / last;
    let mut idx = vec![0usize; rank - 1];
    let mut boff = 0usize;
    let mut ai = 0usize;
    for _ in 0..outer {
        for j in 0..last {
            f(ai + j, boff + j * last_stride);
        }
        ai += last;
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            boff += bstrides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            boff -= bstrides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
        }
    }
}

/// Sums a `target`-shaped gradient down to the broadcast operand's shape.
fn reduce_to<T: Element>(g: &[T], target: &[usize], bshape: &[usize], bstrides: &[usize]) -> Vec<T> {
    if target == bshape {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); numel(bshape)];
    for_each_broadcast(target, bstrides, |ai, bi| out[bi] = out[bi] + g[ai]);
    out
}

impl<T: Element> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: Binary) -> Result<Tensor<T>> {
        let strides = broadcast_strides(self.shape(), other.shape())
            .ok_or_else(|| Error::dims(kind.name(), self.shape(), other.shape()))?;
        let a = self.data();
        let b = other.data();
        let out = if self.shape() == other.shape() {
            a.iter().zip(b).map(|(&x, &y)| kind.apply(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); a.len()];
            for_each_broadcast(self.shape(), &strides, |ai, bi| out[ai] = kind.apply(a[ai], b[bi]));
            out
        };
        flops::record(a.len() as u64);

        let target = self.shape().to_vec();
        let bshape = other.shape().to_vec();
        Ok(Tensor::from_op(
            target.clone(),
            out,
            kind.name(),
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let (pa, pb) = (&parents[0], &parents[1]);
                match kind {
                    Binary::Add => vec![
                        pa.requires_grad().then(|| g.to_vec()),
                        pb.requires_grad().then(|| reduce_to(g, &target, &bshape, &strides)),
                    ],
                    Binary::Sub => vec![
                        pa.requires_grad().then(|| g.to_vec()),
                        pb.requires_grad().then(|| {
                            let mut r = reduce_to(g, &target, &bshape, &strides);
                            r.iter_mut().for_each(|v| *v = -*v);
                            r
                        }),
                    ],
                    Binary::Mul => {
                        let (a, b) = (pa.data(), pb.data());
                        let ga = pa.requires_grad().then(|| {
                            let mut ga = vec![T::zero(); g.len()];
                            for_each_broadcast(&target, &strides, |ai, bi| ga[ai] = g[ai] * b[bi]);
                            ga
                        });
                        let gb = pb.requires_grad().then(|| {
                            let mut gb = vec![T::zero(); b.len()];
                            for_each_broadcast(&target, &strides, |ai, bi| {
                                gb[bi] = gb[bi] + g[ai] * a[ai]
                            });
                            gb
                        });
                        vec![ga, gb]
                    }
                }
            }),
        ))
    }

    /// Elementwise `self + other`; `other` may broadcast along unit axes.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Add)
    }

    /// Elementwise `self - other`; `other` may broadcast along unit axes.
    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Sub)
    }

    /// Elementwise `self * other`; `other` may broadcast along unit axes.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn scale(&self, alpha: f64) -> Tensor<T> {
        let a = T::cast_from(alpha);
        flops::record(self.numel() as u64);
        Tensor::from_op(
            self.shape().to_vec(),
            self.data().iter().map(|&v| v * a).collect(),
            "scale",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|&v| v * a).collect())]),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-1.0)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&self) -> Tensor<T> {
        flops::record(self.numel() as u64);
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            "sum",
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// `sum(self ⊙ weights)` where `weights` is a constant of the same shape.
    pub fn weighted_sum(&self, weights: &[T]) -> Result<Tensor<T>> {
        if weights.len() != self.numel() {
            return Err(Error::dims("weighted_sum", self.shape(), &[weights.len()]));
        }
        let w = Tensor::from_vec(self.shape(), weights.to_vec())?;
        Ok(self.mul(&w)?.sum())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::dims("reshape", self.shape(), shape));
        }
        Ok(self.view_as(shape.to_vec()))
    }

    /// Concatenates along `axis`. All other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Contract(format!("concat axis {axis} on rank {rank}")));
        }
        for p in &parts[1..] {
            let ok = p.rank() == rank
                && (0..rank).all(|ax| ax == axis || p.dim(ax) == first.dim(ax));
            if !ok {
                return Err(Error::dims("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.dim(axis) * inner).collect();
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.dim(axis)).sum();
        Ok(Tensor::from_op(
            shape,
            out,
            "concat",
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(move |g, parents| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(parents.len());
                for (p, &w) in parents.iter().zip(&widths) {
                    if p.requires_grad() {
                        let mut gp = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let start = o * row + offset;
                            gp.extend_from_slice(&g[start..start + w]);
                        }
                        grads.push(Some(gp));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || len == 0 || start + len > self.dim(axis) {
            return Err(Error::Contract(format!(
                "narrow({axis}, {start}, {len}) on shape {:?}",
                self.shape()
            )));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let row = self.dim(axis) * inner;
        let (off, w) = (start * inner, len * inner);
        let src = self.data();
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            out.extend_from_slice(&src[o * row + off..o * row + off + w]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = self.numel();
        Ok(Tensor::from_op(
            shape,
            out,
            "narrow",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gp = vec![T::zero(); total];
                for o in 0..outer {
                    gp[o * row + off..o * row + off + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                vec![Some(gp)]
            }),
        ))
    }

    /// Elementwise map with a known derivative; used by activations.
    pub(crate) fn map_with_grad(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        flops::record(self.numel() as u64);
        let out: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        let saved_out = if self.requires_grad() { out.clone() } else { Vec::new() };
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            op,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let x = parents[0].data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .zip(&saved_out)
                        .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
                        .collect(),
                )]
            }),
        )
    }
}

impl<T: Element> Tensor<T> {
    /// True when every value is finite.
    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }
}
