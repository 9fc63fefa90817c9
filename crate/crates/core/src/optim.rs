//! Adam with bias-corrected moment estimates. Weight decay is not applied
//! here; it reaches the update through the gradient of the penalized loss.

use crate::error::{Error, Result};

pub const DEFAULT_LEARNING_RATE: f64 = 2e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// One moment buffer per parameter array, sized by `lengths`.
    pub fn new(lengths: &[usize], learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            v: lengths.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn for_slices(params: &[&[f64]], learning_rate: f64) -> Result<Self> {
        let lengths: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Adam::new(&lengths, learning_rate)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients are validated before anything is
    /// mutated, so a rejected step leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(
                "adam_step",
                format!(
                    "{} parameter arrays and {} gradients for {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (k, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::dim(
                    "adam_step",
                    format!("array {k}: parameter {}, gradient {}, state {}", p.len(), g.len(), m.len()),
                ));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {} in parameter array {k} at index {i}",
                    g[i]
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut w = vec![1.0, -2.0, 3.0];
        let mut opt = Adam::new(&[3], 0.1).unwrap();
        opt.step(&mut [&mut w], &[&[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(w, vec![1.0, -2.0, 3.0]);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let lr = 0.01;
        let mut w = vec![0.0, 0.0, 0.0];
        let g = [3.0, -0.002, 1e4];
        let mut opt = Adam::new(&[3], lr).unwrap();
        opt.step(&mut [&mut w], &[&g]).unwrap();
        for (wi, gi) in w.iter().zip(g) {
            // update = lr·g/(|g| + eps)
            let expected = -lr * gi / (gi.abs() + 1e-8);
            assert!((wi - expected).abs() < 1e-15);
            assert!((wi + lr * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut w = vec![1.0, 2.0];
        let mut opt = Adam::new(&[2], 0.1).unwrap();
        let before = opt.clone();
        let err = opt.step(&mut [&mut w], &[&[0.5, f64::NAN]]);
        assert!(matches!(err, Err(Error::Numerical(_))));
        assert_eq!(w, vec![1.0, 2.0]);
        assert_eq!(opt, before);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut w = vec![1.0, 2.0];
        let mut opt = Adam::new(&[3], 0.1).unwrap();
        assert!(opt.step(&mut [&mut w], &[&[0.0, 0.0]]).is_err());
        assert!(Adam::new(&[1], 0.0).is_err());
    }

    #[test]
    fn converges_on_a_quadratic() {
        // f(x) = (x - 3)^2
        let mut x = vec![-2.0];
        let mut opt = Adam::new(&[1], 0.01).unwrap();
        let mut converged_at = None;
        for step in 0..5000 {
            let g = 2.0 * (x[0] - 3.0);
            opt.step(&mut [&mut x], &[&[g]]).unwrap();
            if converged_at.is_none() && (x[0] - 3.0).abs() < 1e-4 {
                converged_at = Some(step);
            }
        }
        assert!(converged_at.is_some());
        assert!((x[0] - 3.0).abs() < 1e-4, "x = {}", x[0]);
    }

    #[test]
    fn identical_inputs_give_identical_trajectories() {
        let run = || {
            let mut w = vec![0.5, -0.5];
            let mut opt = Adam::new(&[2], 0.05).unwrap();
            for k in 0..100 {
                let g = [w[0] * 2.0 + (k as f64).sin(), w[1] - 1.0];
                opt.step(&mut [&mut w], &[&g]).unwrap();
            }
            w
        };
        let a = run();
        let b = run();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }
}
