//! Central finite differences as an independent oracle for `backward()`.

use super::Tensor;
use crate::error::{Error, Result};

/// Per-input comparison between analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct InputError {
    pub max_abs: f64,
    pub max_rel: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub inputs: Vec<InputError>,
    pub tol: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn max_abs(&self) -> f64 {
        self.inputs.iter().map(|e| e.max_abs).fold(0.0, f64::max)
    }

    pub fn max_rel(&self) -> f64 {
        self.inputs.iter().map(|e| e.max_rel).fold(0.0, f64::max)
    }
}

/// Finite-difference settings. `max_coords` bounds how many coordinates per
/// input are perturbed; the chosen coordinates are evenly strided so the
/// subset is deterministic and spans the whole tensor.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    pub max_coords: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: None,
        }
    }
}

fn coordinates(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => {
            let stride = n as f64 / m as f64;
            (0..m).map(|i| ((i as f64 + 0.5) * stride) as usize).collect()
        }
        _ => (0..n).collect(),
    }
}

impl GradCheck {
    pub fn run<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradReport>
    where
        F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    {
        let leaves: Vec<Tensor<f64>> = inputs.iter().map(Tensor::with_grad).collect();
        let out = f(&leaves)?;
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "gradient check needs a scalar function, got shape {:?}",
                out.shape()
            )));
        }
        out.backward()?;
        let analytic: Vec<Vec<f64>> = leaves
            .iter()
            .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
            .collect();
        self.compare(&analytic, f, inputs)
    }

    /// Checks gradients computed elsewhere (for example by a 32-bit copy of
    /// the function) against central differences of `f`.
    pub fn compare<F>(&self, analytic: &[Vec<f64>], f: F, inputs: &[Tensor<f64>]) -> Result<GradReport>
    where
        F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    {
        if analytic.len() != inputs.len() || analytic.iter().zip(inputs).any(|(a, t)| a.len() != t.numel()) {
            return Err(Error::Contract("one analytic gradient per input coordinate is required".into()));
        }
        let constants: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
        let mut report = Vec::with_capacity(inputs.len());
        for (i, input) in inputs.iter().enumerate() {
            let base = input.to_vec();
            let mut err = InputError {
                max_abs: 0.0,
                max_rel: 0.0,
                worst_index: 0,
                coords_checked: 0,
            };
            for idx in coordinates(base.len(), self.max_coords) {
                let eval = |delta: f64| -> Result<f64> {
                    let mut vals = base.clone();
                    vals[idx] += delta;
                    let mut args = constants.clone();
                    args[i] = Tensor::from_vec(input.shape(), vals)?;
                    let v = f(&args)?.item();
                    if !v.is_finite() {
                        return Err(Error::NumericalInstability {
                            input: i,
                            index: idx,
                            value: v,
                        });
                    }
                    Ok(v)
                };
                let numeric = (eval(self.eps)? - eval(-self.eps)?) / (2.0 * self.eps);
                let a = analytic[i][idx];
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(1e-12);
                err.max_abs = err.max_abs.max(abs);
                if rel > err.max_rel {
                    err.max_rel = rel;
                    err.worst_index = idx;
                }
                err.coords_checked += 1;
            }
            report.push(err);
        }
        let passed = report.iter().all(|e| e.max_rel <= self.tol);
        Ok(GradReport {
            inputs: report,
            tol: self.tol,
            passed,
        })
    }
}

/// Compares `backward()` against central differences on every coordinate.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    GradCheck {
        eps,
        tol,
        max_coords: None,
    }
    .run(f, inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(&[3, 3], x).unwrap();
        let report = finite_diff_check(|t| Ok(t[0].mul(&t[0])?.sum()), &[x], 1e-5, 1e-8).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel() <= 1e-8);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // scale(2) has gradient 2; claim the function is x*3 numerically
        let x = Tensor::from_vec(&[2], vec![0.5, -0.25]).unwrap();
        let report = finite_diff_check(
            |t| {
                if t[0].requires_grad() {
                    Ok(t[0].scale(2.0).sum())
                } else {
                    Ok(t[0].scale(3.0).sum())
                }
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn non_finite_value_names_the_coordinate() {
        let x = Tensor::from_vec(&[3], vec![1.0, 0.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |t| {
                let d = t[0].data();
                if !t[0].requires_grad() && d[1] != 0.0 {
                    return Ok(Tensor::scalar(f64::NAN));
                }
                Ok(t[0].sum())
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NumericalInstability { input: 0, index: 1, .. }));
    }

    #[test]
    fn sampled_coordinates_are_spread() {
        let c = coordinates(100, Some(10));
        assert_eq!(c.len(), 10);
        assert_eq!(c[0], 5);
        assert_eq!(c[9], 95);
        assert_eq!(coordinates(4, Some(10)), vec![0, 1, 2, 3]);
    }
}
