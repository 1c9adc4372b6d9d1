use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::tensor::{lit, Element, Tensor4};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Half-period cosine decay from `lr0` at step 0 to 0 at `total_steps`.
/// With `total_steps == 0` the schedule is the constant `lr0`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Range(format!(
            "step {step} exceeds total steps {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    Ok(0.5 * lr0 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

fn check_shapes<T: Element>(a: &Tensor4<T>, b: &Tensor4<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "shape",
            format!("{what}: {} vs {}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `v = momentum * v + g; theta -= lr * v`.
pub fn sgd_momentum_step<T: Element>(
    param: &mut Tensor4<T>,
    grad: &Tensor4<T>,
    velocity: &mut Tensor4<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_shapes(param, grad, "gradient")?;
    check_shapes(param, velocity, "velocity")?;
    let (lr, mu) = (lit::<T>(lr), lit::<T>(momentum));
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = mu * *v + g;
        *p = *p - lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Tensor4<T>,
    pub v: Tensor4<T>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn zeros_like(p: &Tensor4<T>) -> Self {
        Self {
            m: Tensor4::zeros(p.shape()),
            v: Tensor4::zeros(p.shape()),
            t: 0,
        }
    }
}

/// Bias-corrected Adam with the default betas and epsilon.
pub fn adam_step<T: Element>(
    param: &mut Tensor4<T>,
    grad: &Tensor4<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    check_shapes(param, grad, "gradient")?;
    check_shapes(param, &state.m, "adam state")?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2, eps) = (
        lit::<T>(ADAM_BETA1),
        lit::<T>(ADAM_BETA2),
        lit::<T>(ADAM_EPS),
    );
    let one = T::one();
    let (c1, c2, lr) = (lit::<T>(c1), lit::<T>(c2), lit::<T>(lr));
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.data_mut())
        .zip(state.v.data_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam,
}

enum Slot<T> {
    Velocity(Tensor4<T>),
    Adam(AdamState<T>),
}

/// Per-parameter optimizer state, matched to parameters by position.
pub struct Optimizer<T: Element> {
    kind: OptimizerKind,
    slots: Vec<Slot<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            slots: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update to every parameter of `layer` from its accumulated
    /// gradients.
    pub fn step(&mut self, layer: &mut dyn Layer<T>, lr: f64) -> Result<()> {
        let params = layer.params_mut();
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|(_, p)| match self.kind {
                    OptimizerKind::SgdMomentum { .. } => {
                        Slot::Velocity(Tensor4::zeros(p.value.shape()))
                    }
                    OptimizerKind::Adam => Slot::Adam(AdamState::zeros_like(&p.value)),
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, layer has {}",
                self.slots.len(),
                params.len()
            )));
        }
        for ((_, p), slot) in params.into_iter().zip(&mut self.slots) {
            match (slot, self.kind) {
                (Slot::Velocity(v), OptimizerKind::SgdMomentum { momentum }) => {
                    sgd_momentum_step(&mut p.value, &p.grad, v, lr, momentum)?
                }
                (Slot::Adam(s), OptimizerKind::Adam) => adam_step(&mut p.value, &p.grad, s, lr)?,
                _ => unreachable!("slots are created for the optimizer kind"),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn scalar(v: f64) -> Tensor4<f64> {
        Tensor4::full(Shape4::new(1, 1, 1, 1), v)
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 0.5).unwrap(), 0.5);
        assert!(cosine_lr(100, 100, 0.5).unwrap().abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.5).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(cosine_lr(101, 100, 0.5), Err(Error::Range(_))));
        assert_eq!(cosine_lr(0, 0, 0.3).unwrap(), 0.3);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = scalar(1.5);
        let mut v = scalar(0.0);
        sgd_momentum_step(&mut p, &scalar(0.0), &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p.data(), &[1.5]);
    }

    #[test]
    fn first_sgd_step_is_plain_descent() {
        let mut p = scalar(1.0);
        let mut v = scalar(0.0);
        sgd_momentum_step(&mut p, &scalar(2.0), &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.1 * 2.0]);
    }

    /// Reference recurrence on plain scalars.
    fn adam_reference(theta0: f64, lr: f64, steps: usize) -> f64 {
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * th;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            th -= lr * mh / (vh.sqrt() + 1e-8);
        }
        th
    }

    #[test]
    fn adam_quadratic_bowl() {
        let mut p = scalar(1.0);
        let mut s = AdamState::zeros_like(&p);
        for _ in 0..100 {
            let g = p.scale(2.0);
            adam_step(&mut p, &g, &mut s, 0.1).unwrap();
        }
        let reference = adam_reference(1.0, 0.1, 100);
        assert!((p.data()[0] - reference).abs() < 1e-12);
        assert!(p.data()[0].abs() < 0.05, "{}", p.data()[0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar(1.0);
        let g = Tensor4::zeros(Shape4::new(1, 2, 1, 1));
        let mut v = scalar(0.0);
        assert!(sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9).is_err());
        let mut s = AdamState::zeros_like(&p);
        assert!(adam_step(&mut p, &g, &mut s, 0.1).is_err());
    }
}
