//! Adam.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim(
                "adam_step",
                format!("tensor {i}: param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, &mj), &vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mj / c1;
            let v_hat = vj / c2;
            *pj -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(p0: &[f64], grads: &[Vec<f64>], cfg: &AdamConfig) -> (Tensor, AdamState) {
        let mut p = Tensor::vector(p0.to_vec());
        let mut st = AdamState::new(std::slice::from_ref(&p));
        for g in grads {
            adam_step(&mut [&mut p], &[Tensor::vector(g.clone())], &mut st, cfg).unwrap();
        }
        (p, st)
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let cfg = AdamConfig::default();
        let (p, st) = run(&[1.0, -2.0], &vec![vec![0.0, 0.0]; 5], &cfg);
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert!(st.m[0]
            .data()
            .iter()
            .chain(st.v[0].data())
            .all(|&x| x == 0.0));
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = g, v_hat = g^2 after one step, so delta = -lr g / (|g| + eps).
        let cfg = AdamConfig::default();
        let g = [3.0, -0.02, 1e-3];
        let (p, _) = run(&[0.0; 3], &[g.to_vec()], &cfg);
        for (pj, gj) in p.data().iter().zip(g) {
            let expect = -cfg.lr * gj / (gj.abs() + cfg.eps);
            assert!((pj - expect).abs() < 1e-18);
            assert!((pj + cfg.lr * gj.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_gradient_steps_are_bounded() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut p = Tensor::vector(vec![0.0]);
        let mut st = AdamState::new(std::slice::from_ref(&p));
        let mut prev = 0.0;
        for _ in 0..200 {
            adam_step(&mut [&mut p], &[Tensor::vector(vec![0.5])], &mut st, &cfg).unwrap();
            let step = p.data()[0] - prev;
            assert!(step < 0.0 && step.abs() <= cfg.lr * (1.0 + 1e-9));
            prev = p.data()[0];
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::vector(vec![0.0, 1.0]);
        let mut st = AdamState::new(std::slice::from_ref(&p));
        let r = adam_step(
            &mut [&mut p],
            &[Tensor::vector(vec![1.0])],
            &mut st,
            &AdamConfig::default(),
        );
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }
}
