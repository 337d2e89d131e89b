use crate::error::{Error, Result};
use crate::flops;
use crate::tensor::{Element, Tensor};

/// Label value excluded from the loss and from confusion matrices.
pub const IGNORE_INDEX: u8 = 255;

/// Mean pixel-wise cross-entropy of `logits: N×K×H×W` against `labels`
/// (`N·H·W` class indices). Pixels labelled `ignore_index` contribute
/// nothing; if every pixel is ignored the loss is 0 with zero gradient.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[u8], ignore_index: u8) -> Result<Tensor<T>> {
    if logits.rank() != 4 {
        return Err(Error::Geometry(format!(
            "cross_entropy expects N×K×H×W logits, got {:?}",
            logits.shape()
        )));
    }
    let (n, k, h, w) = (logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3));
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(Error::dims("cross_entropy labels", &[n, h, w], &[labels.len()]));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l != ignore_index && l as usize >= k {
            let p = i % plane;
            return Err(Error::Data {
                msg: format!("label {l} outside [0, {k}) in sample {}", i / plane),
                row: p / w,
                col: p % w,
            });
        }
    }
    let src = logits.data();
    let mut probs = vec![T::zero(); src.len()];
    let mut total = 0.0f64;
    let mut count = 0usize;
    for s in 0..n {
        let base = s * k * plane;
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(src[base + c * plane + p]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (src[base + c * plane + p] - m).exp();
                probs[base + c * plane + p] = e;
                z = z + e;
            }
            for c in 0..k {
                probs[base + c * plane + p] = probs[base + c * plane + p] / z;
            }
            let l = labels[s * plane + p];
            if l != ignore_index {
                let logit = src[base + l as usize * plane + p];
                total += (m + z.ln() - logit).as_f64();
                count += 1;
            }
        }
    }
    flops::record(src.len() as u64);
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![T::cast_from(loss)],
        "cross_entropy",
        vec![logits.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); probs.len()];
            if count == 0 {
                return vec![Some(gx)];
            }
            let scale = g[0] / T::cast_from(count as f64);
            for s in 0..n {
                let base = s * k * plane;
                for p in 0..plane {
                    let l = labels[s * plane + p];
                    if l == ignore_index {
                        continue;
                    }
                    for c in 0..k {
                        let idx = base + c * plane + p;
                        let onehot = if c == l as usize { T::one() } else { T::zero() };
                        gx[idx] = (probs[idx] - onehot) * scale;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Per-pixel argmax over the class axis; ties go to the lowest index.
pub fn argmax_classes<T: Element>(logits: &Tensor<T>) -> Vec<u8> {
    let (n, k) = (logits.dim(0), logits.dim(1));
    let plane = logits.dim(2) * logits.dim(3);
    let src = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for s in 0..n {
        let base = s * k * plane;
        for p in 0..plane {
            let mut best = 0;
            let mut bv = src[base + p];
            for c in 1..k {
                let v = src[base + c * plane + p];
                if v > bv {
                    bv = v;
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
