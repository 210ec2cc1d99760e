use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam over a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl AdamState {
    /// Zero moments shaped like `params`, standard betas and eps.
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        }
    }

    /// Rebuilds a saved state from its hyperparameters and moments.
    pub fn restore(template: AdamState, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<Self> {
        let n = template.shapes.len();
        if first.len() != n || second.len() != n {
            return Err(Error::shape("adam_restore", format!("{} / {} moments for {n} slots", first.len(), second.len())));
        }
        for (i, (m, v)) in first.iter().zip(&second).enumerate() {
            if m.shape() != template.shapes[i].as_slice() || v.shape() != template.shapes[i].as_slice() {
                return Err(Error::shape("adam_restore", format!("slot {i} has the wrong shape")));
            }
        }
        Ok(AdamState {
            first_moment: first.into_iter().map(Tensor::into_vec).collect(),
            second_moment: second.into_iter().map(Tensor::into_vec).collect(),
            ..template
        })
    }

    pub fn num_slots(&self) -> usize {
        self.shapes.len()
    }

    pub fn first_moment(&self, i: usize) -> Tensor {
        Tensor::from_parts(self.shapes[i].clone(), self.first_moment[i].clone())
    }

    pub fn second_moment(&self, i: usize) -> Tensor {
        Tensor::from_parts(self.shapes[i].clone(), self.second_moment[i].clone())
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.shapes.len() || grads.len() != self.shapes.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params / {} grads for {} slots",
                    params.len(),
                    grads.len(),
                    self.shapes.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.shapes[i].as_slice() || g.shape() != self.shapes[i].as_slice() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "slot {i}: param {:?}, grad {:?}, state {:?}",
                        p.shape(),
                        g.shape(),
                        self.shapes[i]
                    ),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("adam gradient slot {i}")));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let pd = p.data_mut();
            for k in 0..pd.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                pd[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::row(&[1.0, -2.0, 3.0])];
        let before = params.clone();
        let mut adam = AdamState::new(&params, 1e-3);
        for _ in 0..5 {
            adam.step(&mut params, &[Tensor::zeros(&[1, 3])]).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // After one step m_hat = g and v_hat = g^2, so the update is
        // lr * g / (|g| + eps).
        let grads = [0.5, -3.0, 1e-3];
        let mut params = vec![Tensor::row(&[0.0; 3])];
        let mut adam = AdamState::new(&params, 1e-3);
        adam.step(&mut params, &[Tensor::row(&grads)]).unwrap();
        for (p, g) in params[0].data().iter().zip(grads) {
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-18, "{p} vs {expected}");
        }
    }

    #[test]
    fn two_constant_steps_match_reference() {
        let g = 0.7;
        let lr = 0.01;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut p_ref = 1.0f64;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p_ref -= lr * mh / (vh.sqrt() + eps);
        }
        let mut params = vec![Tensor::scalar(1.0)];
        let mut adam = AdamState::new(&params, lr);
        for _ in 0..2 {
            adam.step(&mut params, &[Tensor::scalar(g)]).unwrap();
        }
        assert_eq!(params[0].item(), p_ref);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::row(&[0.0; 3])];
        let mut adam = AdamState::new(&params, 1e-3);
        assert!(adam.step(&mut params, &[Tensor::row(&[0.0; 2])]).is_err());
    }
}
