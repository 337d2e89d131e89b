use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Element, Tensor};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            eps: 1e-8,
        }
    }
}

/// Moments per parameter, in visiting order, kept in 64-bit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and ≥ 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::Config("weight decay must be ≥ 0 and eps > 0".into()));
        }
        Ok(())
    }

    /// One update of every parameter of `model` from its accumulated gradient:
    /// `θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)`.
    pub fn step<T: Element, M: Module<T>>(&self, model: &mut M, state: &mut AdamWState) -> Result<()> {
        let mut grads = Vec::new();
        let mut missing = None;
        model.visit_params("", &mut |name, p| match p.grad() {
            Some(g) => grads.push(g),
            None => {
                missing.get_or_insert_with(|| name.to_string());
            }
        });
        if let Some(name) = missing {
            return Err(Error::Registry(format!("no gradient for parameter `{name}`")));
        }
        if state.m.is_empty() {
            state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            state.v = state.m.clone();
        }
        if state.m.len() != grads.len() || state.m.iter().zip(&grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::Registry("optimizer state does not match the parameter set".into()));
        }
        state.t += 1;
        let t = state.t as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let mut i = 0;
        model.visit_params_mut("", &mut |_, p| {
            let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
            let data: Vec<T> = p
                .data()
                .iter()
                .enumerate()
                .map(|(j, &theta)| {
                    let (theta, g) = (theta.as_f64(), g[j].as_f64());
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                    let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps) + self.weight_decay * theta;
                    T::cast_from(theta - self.lr * update)
                })
                .collect();
            *p = Tensor::parameter(p.shape(), data).expect("shape unchanged");
            i += 1;
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::join;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Params(Vec<Tensor<f64>>);

    impl Module<f64> for Params {
        fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
            for (i, p) in self.0.iter().enumerate() {
                f(&join(prefix, &i.to_string()), p);
            }
        }
        fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            for (i, p) in self.0.iter_mut().enumerate() {
                f(&join(prefix, &i.to_string()), p);
            }
        }
    }

    fn set_grad(p: &Tensor<f64>, g: &[f64]) {
        p.zero_grad();
        let coeffs = Tensor::from_vec(p.shape(), g.to_vec()).unwrap();
        p.mul(&coeffs).unwrap().sum().backward().unwrap();
    }

    fn single(theta: f64, g: f64, opt: AdamW) -> f64 {
        let mut m = Params(vec![Tensor::parameter(&[1], vec![theta]).unwrap()]);
        set_grad(&m.0[0], &[g]);
        opt.step(&mut m, &mut AdamWState::default()).unwrap();
        m.0[0].data()[0]
    }

    #[test]
    fn hand_evaluated_first_step() {
        let got = single(1.0, 1.0, AdamW::default());
        let want = 1.0 - 1e-4 * (1.0 / (1.0 + 1e-8) + 0.05);
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.999895).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        assert_eq!(single(0.37, 0.0, opt), 0.37);
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let opt = AdamW::default();
        let got = single(2.0, 0.0, opt);
        assert!((got - 2.0 * (1.0 - 1e-4 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut m = Params(vec![Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap()]);
        let err = AdamW::default().step(&mut m, &mut AdamWState::default()).unwrap_err();
        assert!(matches!(&err, Error::Registry(msg) if msg.contains("`0`")), "{err}");
    }

    #[test]
    fn matches_textbook_adam_without_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let opt = AdamW { lr: 1e-2, weight_decay: 0.0, ..AdamW::default() };
        let init: Vec<Vec<f64>> = vec![
            (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ];
        let mut model = Params(vec![
            Tensor::parameter(&[2, 3], init[0].clone()).unwrap(),
            Tensor::parameter(&[3], init[1].clone()).unwrap(),
        ]);
        let mut state = AdamWState::default();
        let mut theta = init.clone();
        let mut m: Vec<Vec<f64>> = init.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut v = m.clone();
        for step in 1..=10 {
            let grads: Vec<Vec<f64>> = init.iter().map(|p| (0..p.len()).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            for (p, g) in model.0.iter().zip(&grads) {
                set_grad(p, g);
            }
            opt.step(&mut model, &mut state).unwrap();
            for k in 0..theta.len() {
                for j in 0..theta[k].len() {
                    let g = grads[k][j];
                    m[k][j] = 0.9 * m[k][j] + 0.1 * g;
                    v[k][j] = 0.999 * v[k][j] + 0.001 * g * g;
                    let mh = m[k][j] / (1.0 - 0.9f64.powi(step));
                    let vh = v[k][j] / (1.0 - 0.999f64.powi(step));
                    theta[k][j] -= 1e-2 * mh / (vh.sqrt() + 1e-8);
                }
            }
            for (p, want) in model.0.iter().zip(&theta) {
                for (a, b) in p.data().iter().zip(want) {
                    assert!((a - b).abs() < 1e-10, "step {step}: {a} vs {b}");
                }
            }
        }
        assert_eq!(state.t, 10);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(AdamW { beta1: 1.0, ..AdamW::default() }.validate().is_err());
        assert!(AdamW { lr: f64::NAN, ..AdamW::default() }.validate().is_err());
        assert!(AdamW::default().validate().is_ok());
    }
}
