use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

use super::tensor::Tensor;

/// Named trainable tensor with an optional gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Adam moments and hyper-parameters.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Parameter<T>], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update; gradients are zeroed afterwards.
pub fn adam_step<T: Scalar>(params: &mut [Parameter<T>], state: &mut AdamState<T>) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "optimizer tracks {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (p, m) in params.iter().zip(&state.m) {
        let Some(g) = &p.grad else {
            return Err(Error::MissingGradient(p.name.clone()));
        };
        if g.len() != p.numel() || m.len() != p.numel() {
            return Err(Error::shape(format!("gradient of `{}` has the wrong size", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1: T = lit(state.beta1);
    let b2: T = lit(state.beta2);
    let c1: T = lit(1.0 - state.beta1.powi(t));
    let c2: T = lit(1.0 - state.beta2.powi(t));
    let lr: T = lit(state.lr);
    let eps: T = lit(state.eps);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.as_mut().expect("checked above");
        for (((w, gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data_mut().iter_mut())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * *gi;
            *vi = b2 * *vi + (T::one() - b2) * *gi * *gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
            *gi = T::zero();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f64) -> Vec<Parameter<f64>> {
        vec![Parameter::new("w", Tensor::scalar(w))]
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = scalar_param(1.0);
        let mut st = AdamState::new(&p, 0.01);
        p[0].grad = Some(Tensor::scalar(3.7));
        adam_step(&mut p, &mut st).unwrap();
        let dw = (1.0 - p[0].value.data()[0]).abs();
        assert!(dw > 0.99 * 0.01 && dw <= 0.01, "{dw}");
        assert_eq!(p[0].grad.as_ref().unwrap().data(), &[0.0]);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar_param(2.5);
        let mut st = AdamState::new(&p, 0.1);
        p[0].grad = Some(Tensor::scalar(0.0));
        adam_step(&mut p, &mut st).unwrap();
        assert_eq!(p[0].value.data(), &[2.5]);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = scalar_param(-4.0);
        let mut st = AdamState::new(&p, 0.0);
        for g in [1.0, -3.0, 0.5] {
            p[0].grad = Some(Tensor::scalar(g));
            adam_step(&mut p, &mut st).unwrap();
        }
        assert_eq!(p[0].value.data(), &[-4.0]);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = scalar_param(0.0);
        let mut st = AdamState::new(&p, 0.1);
        match adam_step(&mut p, &mut st) {
            Err(Error::MissingGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn converges_on_a_shifted_quadratic() {
        // f(w) = (w - 3)^2, f'(w) = 2 (w - 3)
        let mut p = scalar_param(0.0);
        let mut st = AdamState::new(&p, 0.1);
        for _ in 0..200 {
            let w = p[0].value.data()[0];
            p[0].grad = Some(Tensor::scalar(2.0 * (w - 3.0)));
            adam_step(&mut p, &mut st).unwrap();
        }
        assert!((p[0].value.data()[0] - 3.0).abs() < 0.05);
    }
}
