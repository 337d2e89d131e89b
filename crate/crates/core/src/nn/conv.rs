use rand::Rng;

use super::{init, join, Module};
use crate::error::{Error, Result};
use crate::flops;
use crate::tensor::{gemm, Element, Tensor};

/// 2-D cross-correlation layer with bias. Weight layout `Cout×Cin×k×k`.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> Conv2d<T> {
    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        if weight.rank() != 4 || weight.dim(2) != weight.dim(3) {
            return Err(Error::Geometry(format!(
                "conv weight must be Cout×Cin×k×k, got {:?}",
                weight.shape()
            )));
        }
        if bias.shape() != [weight.dim(0)] {
            return Err(Error::dims("conv2d bias", bias.shape(), &weight.shape()[..1]));
        }
        if stride == 0 {
            return Err(Error::Geometry("conv stride must be positive".into()));
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// All-zero weights and bias; trainable.
    pub fn zeros(cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Tensor::<T>::zeros(&[cout, cin, k, k]).with_grad(),
            bias: Tensor::<T>::zeros(&[cout]).with_grad(),
            stride,
            padding,
        }
    }

    /// Truncated-normal weights with the given standard deviation, zero bias.
    pub fn init(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = init::trunc_normal(cout * cin * k * k, std, rng);
        Conv2d {
            weight: Tensor::parameter(&[cout, cin, k, k], w).expect("consistent shape"),
            bias: Tensor::<T>::zeros(&[cout]).with_grad(),
            stride,
            padding,
        }
    }

    /// He-scaled initialization (`std = sqrt(2 / fan_in)`).
    pub fn he(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self::init(cin, cout, k, stride, padding, std, rng)
    }

    /// "Same" 3×3 / 7×7 style layer: stride 1, padding k/2.
    pub fn same(cin: usize, cout: usize, k: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self::init(cin, cout, k, 1, k / 2, std, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, self)
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Output extent of a convolution, or `None` when it would be < 1.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

impl Geom {
    /// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let off = kx as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((self.w as isize - off + s - 1) / s).clamp(0, self.wo as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample into a `(Cin·k·k) × (Ho·Wo)` matrix. Entries that
/// fall into the padding are never written, so `cols` must start zeroed and
/// may then be reused for further samples of the same geometry.
fn im2col<T: Element>(x: &[T], g: &Geom, cols: &mut [T]) {
    let p = g.ho * g.wo;
    for ci in 0..g.cin {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_cols(kx);
                if lo == hi {
                    continue;
                }
                let ix0 = (lo * g.stride + kx) as isize - g.pad as isize;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w + ix0 as usize..];
                    let line = &mut dst[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        line.copy_from_slice(&src_row[..hi - lo]);
                    } else {
                        for (d, &v) in line.iter_mut().zip(src_row.iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Folds one sample's column matrix back onto its input, summing overlaps.
fn col2im<T: Element>(cols: &[T], g: &Geom, x: &mut [T]) {
    let p = g.ho * g.wo;
    for ci in 0..g.cin {
        let dst = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_cols(kx);
                if lo == hi {
                    continue;
                }
                let ix0 = (lo * g.stride + kx) as isize - g.pad as isize;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w + ix0 as usize..];
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst_row[..hi - lo].iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst_row.iter_mut().step_by(g.stride).zip(line) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Output channel count at or below which stride-1 layers skip im2col.
const DIRECT_MAX_COUT: usize = 2;

/// Calls `f(co, ci, tap, x_offset, out_offset, len)` for every
/// contiguous row segment where a kernel tap overlaps the input
/// (stride 1 only).
fn for_each_tap(g: &Geom, cout: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let (k, pad) = (g.k, g.pad as isize);
    for n in 0..g.n {
        for co in 0..cout {
            for ci in 0..g.cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let tap = (ky * k) + kx;
                        let dx = kx as isize - pad;
                        let ox0 = (-dx).max(0) as usize;
                        let ox1 = (g.w as isize - dx).min(g.wo as isize);
                        if ox1 <= ox0 as isize {
                            continue;
                        }
                        let len = ox1 as usize - ox0;
                        for oy in 0..g.ho {
                            let iy = oy as isize + ky as isize - pad;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let xo = ((n * g.cin + ci) * g.h + iy as usize) * g.w + (ox0 as isize + dx) as usize;
                            let oo = ((n * cout + co) * g.ho + oy) * g.wo + ox0;
                            f(co, ci, tap, xo, oo, len);
                        }
                    }
                }
            }
        }
    }
}

fn direct_forward<T: Element>(x: &[T], w: &[T], b: &[T], g: &Geom, cout: usize) -> Vec<T> {
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * cout * plane];
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        chunk.fill(b[i % cout]);
    }
    let kk = g.k * g.k;
    for_each_tap(g, cout, |co, ci, tap, xo, oo, len| {
        let wv = w[(co * g.cin + ci) * kk + tap];
        for (o, &v) in out[oo..oo + len].iter_mut().zip(&x[xo..xo + len]) {
            *o = *o + wv * v;
        }
    });
    out
}

fn direct_grad_input<T: Element>(grad: &[T], w: &[T], g: &Geom, cout: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); g.n * g.cin * g.h * g.w];
    let kk = g.k * g.k;
    for_each_tap(g, cout, |co, ci, tap, xo, oo, len| {
        let wv = w[(co * g.cin + ci) * kk + tap];
        for (d, &v) in dx[xo..xo + len].iter_mut().zip(&grad[oo..oo + len]) {
            *d = *d + wv * v;
        }
    });
    dx
}

fn direct_grad_weight<T: Element>(grad: &[T], x: &[T], g: &Geom, cout: usize) -> Vec<T> {
    let kk = g.k * g.k;
    let mut dw = vec![T::zero(); cout * g.cin * kk];
    for_each_tap(g, cout, |co, ci, tap, xo, oo, len| {
        let dot = x[xo..xo + len]
            .iter()
            .zip(&grad[oo..oo + len])
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let slot = &mut dw[(co * g.cin + ci) * kk + tap];
        *slot = *slot + dot;
    });
    dw
}

/// Cross-correlation of `x: N×Cin×H×W` with the layer's kernel, plus bias.
pub fn conv2d<T: Element>(x: &Tensor<T>, p: &Conv2d<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::Geometry(format!("conv2d expects N×C×H×W, got {:?}", x.shape())));
    }
    let (n, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if cin != p.in_channels() {
        return Err(Error::dims("conv2d", x.shape(), p.weight.shape()));
    }
    let k = p.kernel();
    let (ho, wo) = match (
        conv_out_extent(h, k, p.stride, p.padding),
        conv_out_extent(w, k, p.stride, p.padding),
    ) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::Geometry(format!(
                "conv2d k={k} stride={} pad={} has no output on {h}×{w}",
                p.stride, p.padding
            )))
        }
    };
    let g = Geom {
        n,
        cin,
        h,
        w,
        k,
        stride: p.stride,
        pad: p.padding,
        ho,
        wo,
    };
    let cout = p.out_channels();
    let (rows, ncols, plane) = (g.rows(), g.cols(), ho * wo);
    if p.stride == 1 && cout <= DIRECT_MAX_COUT {
        return Ok(conv2d_direct(x, p, g));
    }

    let pointwise = g.is_pointwise();
    let (xs, cs) = (cin * h * w, rows * plane);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); cs] };
    let wdata = p.weight.data();
    let bdata = p.bias.data();
    let mut out = vec![T::zero(); n * cout * plane];
    for s in 0..n {
        let sample = &x.data()[s * xs..(s + 1) * xs];
        let src: &[T] = if pointwise {
            sample
        } else {
            im2col(sample, &g, &mut cols);
            &cols
        };
        let c = &mut out[s * cout * plane..(s + 1) * cout * plane];
        for (co, chunk) in c.chunks_mut(plane).enumerate() {
            chunk.fill(bdata[co]);
        }
        gemm(cout, rows, plane, (wdata, rows, 1), (src, plane, 1), T::one(), c, plane, 1);
    }
    flops::record((2 * rows * cout * ncols + cout * ncols) as u64);

    Ok(Tensor::from_op(
        vec![n, cout, ho, wo],
        out,
        "conv2d",
        vec![x.clone(), p.weight.clone(), p.bias.clone()],
        Box::new(move |grad, parents| {
            let (px, pw, pb) = (&parents[0], &parents[1], &parents[2]);
            let (need_x, need_w) = (px.requires_grad(), pw.requires_grad());
            let w = pw.data();
            let mut dx = if need_x { vec![T::zero(); n * xs] } else { Vec::new() };
            let mut dw = if need_w { vec![T::zero(); cout * rows] } else { Vec::new() };
            let mut buf = if pointwise || !need_w { Vec::new() } else { vec![T::zero(); cs] };
            let mut dbuf = if pointwise || !need_x { Vec::new() } else { vec![T::zero(); cs] };
            for s in 0..n {
                let g_s = &grad[s * cout * plane..(s + 1) * cout * plane];
                let sample = &px.data()[s * xs..(s + 1) * xs];
                if need_w {
                    let src: &[T] = if pointwise {
                        sample
                    } else {
                        im2col(sample, &g, &mut buf);
                        &buf
                    };
                    gemm(cout, plane, rows, (g_s, plane, 1), (src, 1, plane), T::one(), &mut dw, rows, 1);
                }
                if need_x {
                    let dx_s = &mut dx[s * xs..(s + 1) * xs];
                    if pointwise {
                        gemm(rows, cout, plane, (w, 1, rows), (g_s, plane, 1), T::zero(), dx_s, plane, 1);
                    } else {
                        gemm(rows, cout, plane, (w, 1, rows), (g_s, plane, 1), T::zero(), &mut dbuf, plane, 1);
                        col2im(&dbuf, &g, dx_s);
                    }
                }
            }
            let gx = need_x.then_some(dx);
            let gw = need_w.then_some(dw);
            let gb = pb.requires_grad().then(|| {
                let mut db = vec![T::zero(); cout];
                for s in 0..n {
                    for (co, chunk) in grad[s * cout * plane..(s + 1) * cout * plane]
                        .chunks(plane)
                        .enumerate()
                    {
                        db[co] = db[co] + chunk.iter().copied().sum();
                    }
                }
                db
            });
            vec![gx, gw, gb]
        }),
    ))
}

fn conv2d_direct<T: Element>(x: &Tensor<T>, p: &Conv2d<T>, g: Geom) -> Tensor<T> {
    let cout = p.out_channels();
    let out = direct_forward(x.data(), p.weight.data(), p.bias.data(), &g, cout);
    let ncols = g.cols();
    flops::record((2 * g.rows() * cout * ncols + cout * ncols) as u64);
    let plane = g.ho * g.wo;
    Tensor::from_op(
        vec![g.n, cout, g.ho, g.wo],
        out,
        "conv2d",
        vec![x.clone(), p.weight.clone(), p.bias.clone()],
        Box::new(move |grad, parents| {
            let (px, pw, pb) = (&parents[0], &parents[1], &parents[2]);
            let gx = px.requires_grad().then(|| direct_grad_input(grad, pw.data(), &g, cout));
            let gw = pw.requires_grad().then(|| direct_grad_weight(grad, px.data(), &g, cout));
            let gb = pb.requires_grad().then(|| {
                let mut db = vec![T::zero(); cout];
                for (i, chunk) in grad.chunks(plane).enumerate() {
                    db[i % cout] = db[i % cout] + chunk.iter().copied().sum();
                }
                db
            });
            vec![gx, gw, gb]
        }),
    )
}
