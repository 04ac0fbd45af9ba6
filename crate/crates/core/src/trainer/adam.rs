use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Moments {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads[i] = None` leaves parameter `i`
/// and its moments untouched; the step counter advances once per call.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Option<Tensor>],
    moments: &mut Moments,
    lr: f64,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != moments.m.len() {
        return Err(Error::shape(
            "adam_step",
            &[params.len(), moments.m.len()],
            &[grads.len()],
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
    }
    moments.t += 1;
    let t = moments.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let m = moments.m[i].data_mut();
        let v = moments.v[i].data_mut();
        for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * gv;
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * gv * gv;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar reference written out from the textbook recurrences.
    fn scalar_adam(p0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        let mut out = Vec::new();
        for (step, g) in grads.iter().enumerate() {
            let t = (step + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            out.push(p);
        }
        out
    }

    #[test]
    fn zero_grads_leave_params_and_decay_moments() {
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let mut mom = Moments::zeros_like([&p]);
        adam_step(
            &mut [&mut p],
            &[Some(Tensor::zeros(&[2]))],
            &mut mom,
            0.1,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(p.data(), &[1.0, -1.0]);

        mom.m[0] = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        mom.v[0] = Tensor::new(vec![2], vec![2.0, 2.0]).unwrap();
        let mut q = p.clone();
        adam_step(
            &mut [&mut q],
            &[Some(Tensor::zeros(&[2]))],
            &mut mom,
            0.1,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(mom.m[0].data(), &[0.45, 0.45]);
        assert_eq!(mom.v[0].data(), &[2.0 * 0.999, 2.0 * 0.999]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let g = Tensor::new(vec![3], vec![2.5, -0.01, 40.0]).unwrap();
        let mut mom = Moments::zeros_like([&p]);
        adam_step(
            &mut [&mut p],
            &[Some(g.clone())],
            &mut mom,
            0.01,
            &AdamConfig::default(),
        )
        .unwrap();
        for (i, &gv) in g.data().iter().enumerate() {
            let oracle = scalar_adam(0.0, &[gv], 0.01)[0];
            assert_eq!(p.data()[i], oracle);
            assert!((p.data()[i] + 0.01 * gv.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_gradient_trajectory_matches_scalar_reference() {
        let mut p = Tensor::scalar(1.5);
        let mut mom = Moments::zeros_like([&p]);
        let expected = scalar_adam(1.5, &[0.3; 100], 0.05);
        for e in expected {
            adam_step(
                &mut [&mut p],
                &[Some(Tensor::scalar(0.3))],
                &mut mom,
                0.05,
                &AdamConfig::default(),
            )
            .unwrap();
            assert!((p.item() - e).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_entries_skip() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(2.0);
        let mut mom = Moments::zeros_like([&a, &b]);
        adam_step(
            &mut [&mut a, &mut b],
            &[Some(Tensor::scalar(1.0)), None],
            &mut mom,
            0.1,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_ne!(a.item(), 1.0);
        assert_eq!(b.item(), 2.0);
        assert_eq!(mom.m[1].item(), 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut mom = Moments::zeros_like([&p]);
        let err = adam_step(
            &mut [&mut p],
            &[Some(Tensor::zeros(&[3]))],
            &mut mom,
            0.1,
            &AdamConfig::default(),
        );
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }
}
