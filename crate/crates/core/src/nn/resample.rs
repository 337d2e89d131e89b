use crate::error::{Error, Result};
use crate::flops;
use crate::tensor::{Element, Tensor};

/// Source taps for half-pixel-centre interpolation along one axis:
/// `(lower index, upper index, weight of upper)` per output cell.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `N×C×H×W` to `N×C×oh×ow` (align-corners off).
pub fn resize_bilinear<T: Element>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::Geometry(format!("resize expects N×C×H×W, got {:?}", x.shape())));
    }
    if oh == 0 || ow == 0 {
        return Err(Error::Geometry("resize to an empty grid".into()));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let ty: Vec<(usize, usize, T)> = taps(h, oh).into_iter().map(|(a, b, l)| (a, b, T::cast_from(l))).collect();
    let tx: Vec<(usize, usize, T)> = taps(w, ow).into_iter().map(|(a, b, l)| (a, b, T::cast_from(l))).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in src.chunks(h * w) {
        for &(y0, y1, ly) in &ty {
            let (r0, r1) = (&p[y0 * w..(y0 + 1) * w], &p[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, lx) in &tx {
                let top = r0[x0] + (r0[x1] - r0[x0]) * lx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * lx;
                out.push(top + (bot - top) * ly);
            }
        }
    }
    flops::record(out.len() as u64);
    let total = src.len();
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        "resize_bilinear",
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); total];
            for (gp, dst) in g.chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let gi = gp[oy * ow + ox];
                        let (wy0, wx0) = (T::one() - ly, T::one() - lx);
                        dst[y0 * w + x0] = dst[y0 * w + x0] + gi * wy0 * wx0;
                        dst[y0 * w + x1] = dst[y0 * w + x1] + gi * wy0 * lx;
                        dst[y1 * w + x0] = dst[y1 * w + x0] + gi * ly * wx0;
                        dst[y1 * w + x1] = dst[y1 * w + x1] + gi * ly * lx;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Integer-factor bilinear upsampling.
pub fn bilinear_upsample<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::Geometry("upsample factor must be ≥ 1".into()));
    }
    if x.rank() != 4 {
        return Err(Error::Geometry(format!("upsample expects N×C×H×W, got {:?}", x.shape())));
    }
    resize_bilinear(x, x.dim(2) * factor, x.dim(3) * factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    #[test]
    fn factor_one_is_identity() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(bilinear_upsample(&x, 1).unwrap().data(), x.data());
    }

    #[test]
    fn constants_stay_constant() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 2], 1.25);
        for f in [2, 3, 4] {
            let y = bilinear_upsample(&x, f).unwrap();
            assert!(y.data().iter().all(|v| (*v - 1.25).abs() < 1e-15));
        }
    }

    #[test]
    fn half_pixel_row() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let y = bilinear_upsample(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.data(), &[0.0, 0.5, 1.5, 2.0, 0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 3, 3], (0..18).map(|i| (i as f64 * 0.9).sin()).collect()).unwrap();
        let w: Vec<f64> = (0..2 * 8 * 8).map(|i| (i as f64 * 0.31).cos()).collect();
        for (oh, ow) in [(6, 6), (4, 4), (8, 5), (2, 2)] {
            let r = finite_diff_check(
                |a| {
                    let y = resize_bilinear(&a[0], oh, ow)?;
                    y.weighted_sum(&w[..y.numel()])
                },
                &[x.clone()],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "{oh}x{ow}: {r:?}");
        }
    }
}
