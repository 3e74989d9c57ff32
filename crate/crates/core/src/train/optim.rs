use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter plus the shared step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState<F> {
    pub step: u64,
    pub m: BTreeMap<String, Matrix<F>>,
    pub v: BTreeMap<String, Matrix<F>>,
}

impl<F: Scalar> AdamWState<F> {
    pub fn new() -> Self {
        Self { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

/// AdamW with decoupled weight decay and bias correction. Only parameters
/// present in `grads` move. Gradients are checked for finiteness before any
/// parameter is touched.
pub fn adamw_step<F: Scalar>(
    params: &mut ParamStore<F>,
    grads: &Gradients<F>,
    state: &mut AdamWState<F>,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::Shape(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("`{name}`: parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (fb1, fb2) = (F::of(b1), F::of(b2));
    let decay = F::of(1.0 - lr * weight_decay);
    let flr = F::of(lr);
    let (fc1, fc2, eps) = (F::of(c1), F::of(c2), F::of(ADAM_EPS));
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
        for (((pv, &gv), mv), vv) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
            *mv = fb1 * *mv + (F::one() - fb1) * gv;
            *vv = fb2 * *vv + (F::one() - fb2) * gv * gv;
            let mhat = *mv / fc1;
            let vhat = *vv / fc2;
            *pv = *pv * decay - flr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(name: &str, v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert(name, Matrix::scalar(v));
        p
    }

    fn grad(name: &str, v: f64) -> Gradients<f64> {
        let mut g = Gradients::new();
        g.insert(name.to_string(), Matrix::scalar(v));
        g
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = single("w", 0.7);
        let mut s = AdamWState::new();
        adamw_step(&mut p, &grad("w", 0.0), &mut s, 0.1, (0.9, 0.999), 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn decay_only_shrinks_multiplicatively() {
        let mut p = single("w", 2.0);
        let mut s = AdamWState::new();
        adamw_step(&mut p, &grad("w", 0.0), &mut s, 0.01, (0.9, 0.999), 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 2.0 * (1.0 - 0.01 * 0.1));
    }

    #[test]
    fn quadratic_matches_hand_rolled_reference() {
        // f(x) = x², x0 = 1, two steps.
        let (lr, b1, b2, wd) = (0.05, 0.9, 0.999, 0.01);
        let mut p = single("x", 1.0);
        let mut s = AdamWState::new();
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 2.0 * x;
            adamw_step(&mut p, &grad("x", g), &mut s, lr, (b1, b2), wd).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x = x * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + 1e-8);
            assert!((p.get("x").unwrap().item() - x).abs() < 1e-15);
        }
        // First step moves by lr·sign(g) up to eps and decay.
        assert!((1.0 * (1.0 - lr * wd) - lr * 2.0 / (2.0 + 1e-8) - 0.95).abs() < 1e-3);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single("enc.w", 1.0);
        let err = adamw_step(&mut p, &grad("enc.w", f64::NAN), &mut AdamWState::new(), 0.1, (0.9, 0.999), 0.0).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
        assert_eq!(p.get("enc.w").unwrap().item(), 1.0);
    }

    proptest! {
        #[test]
        fn finite_inputs_give_finite_updates(x in -1e3f64..1e3, g in -1e6f64..1e6, steps in 1usize..20) {
            let mut p = single("w", x);
            let mut s = AdamWState::new();
            for _ in 0..steps {
                adamw_step(&mut p, &grad("w", g), &mut s, 1e-3, (0.9, 0.999_999), 0.05).unwrap();
            }
            prop_assert!(p.get("w").unwrap().item().is_finite());
        }
    }
}
