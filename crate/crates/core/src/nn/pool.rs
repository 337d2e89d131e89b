use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

fn check_nchw<T: Element>(x: &Tensor<T>, op: &str) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::Geometry(format!("{op} expects N×C×H×W, got {:?}", x.shape())));
    }
    Ok((x.dim(0), x.dim(1), x.dim(2) * x.dim(3)))
}

/// Reduces every channel plane to one value. In max mode the gradient goes
/// to the first maximal element in row-major order.
pub fn global_pool<T: Element>(x: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>> {
    let (n, c, plane) = check_nchw(x, "global_pool")?;
    let src = x.data();
    flops::record(src.len() as u64);
    match mode {
        PoolMode::Max => {
            let mut out = Vec::with_capacity(n * c);
            let mut arg = Vec::with_capacity(n * c);
            for (i, p) in src.chunks(plane).enumerate() {
                let mut best = 0;
                for (j, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = j;
                    }
                }
                out.push(p[best]);
                arg.push(i * plane + best);
            }
            let total = src.len();
            Ok(Tensor::from_op(
                vec![n, c, 1, 1],
                out,
                "global_max_pool",
                vec![x.clone()],
                Box::new(move |g, _| {
                    let mut gx = vec![T::zero(); total];
                    for (gi, &a) in g.iter().zip(&arg) {
                        gx[a] = *gi;
                    }
                    vec![Some(gx)]
                }),
            ))
        }
        PoolMode::Avg => {
            let inv = T::cast_from(1.0 / plane as f64);
            let out = src.chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
            Ok(Tensor::from_op(
                vec![n, c, 1, 1],
                out,
                "global_avg_pool",
                vec![x.clone()],
                Box::new(move |g, _| {
                    let gx = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, plane)).collect();
                    vec![Some(gx)]
                }),
            ))
        }
    }
}

/// Bin `i` of `out` bins over `len` cells: `[floor(i·len/out), ceil((i+1)·len/out))`.
fn bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Adaptive average pooling to an `oh×ow` grid (bins may overlap when the
/// grid is finer than the input).
pub fn adaptive_avg_pool<T: Element>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, _) = check_nchw(x, "adaptive_avg_pool")?;
    if oh == 0 || ow == 0 {
        return Err(Error::Geometry("adaptive pool to an empty grid".into()));
    }
    let (h, w) = (x.dim(2), x.dim(3));
    let bins: Vec<(usize, usize, usize, usize)> = (0..oh)
        .flat_map(|i| {
            (0..ow).map(move |j| {
                let (y0, y1) = bin(i, h, oh);
                let (x0, x1) = bin(j, w, ow);
                (y0, y1, x0, x1)
            })
        })
        .collect();
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut ops = 0u64;
    for p in src.chunks(h * w) {
        for &(y0, y1, x0, x1) in &bins {
            let mut s = T::zero();
            for yy in y0..y1 {
                for xx in x0..x1 {
                    s = s + p[yy * w + xx];
                }
            }
            let cnt = (y1 - y0) * (x1 - x0);
            ops += cnt as u64;
            out.push(s / T::cast_from(cnt as f64));
        }
    }
    flops::record(ops);
    let total = src.len();
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        "adaptive_avg_pool",
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); total];
            for (pi, gp) in g.chunks(oh * ow).enumerate() {
                let dst = &mut gx[pi * h * w..(pi + 1) * h * w];
                for (&(y0, y1, x0, x1), &gi) in bins.iter().zip(gp) {
                    let share = gi / T::cast_from(((y1 - y0) * (x1 - x0)) as f64);
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            dst[yy * w + xx] = dst[yy * w + xx] + share;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}
