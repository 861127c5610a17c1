//! Optimizer steps over flat Euclidean parameter storage.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptAlgo {
    /// Adaptive-moment update with bias correction.
    Adam,
    /// Plain gradient descent.
    Sgd,
}

/// A parameter region excluded from updates: its values are restored to
/// their pre-step state after every update (the frozen first transform row,
/// the bound curvature under the share ablation).
#[derive(Debug, Clone, Copy)]
pub struct FrozenSpan {
    pub param: usize,
    pub start: usize,
    pub len: usize,
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub algo: OptAlgo,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn adam(lr: f64) -> Self {
        Self {
            algo: OptAlgo::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            algo: OptAlgo::Sgd,
            ..Self::adam(lr)
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over a fixed-order parameter list. Frozen spans are
    /// restored to their pre-step values after the update.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        frozen: &[FrozenSpan],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::usage(format!(
                "optimizer got {} parameter blocks but {} gradient blocks",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::usage("parameter/gradient shape mismatch"));
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::numeric("non-finite gradient in optimizer step"));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        let saved: Vec<(usize, usize, Vec<f64>)> = frozen
            .iter()
            .map(|f| {
                (
                    f.param,
                    f.start,
                    params[f.param][f.start..f.start + f.len].to_vec(),
                )
            })
            .collect();

        self.step += 1;
        match self.algo {
            OptAlgo::Adam => {
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for (pi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.m[pi];
                    let v = &mut self.v[pi];
                    for i in 0..p.len() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
            OptAlgo::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for i in 0..p.len() {
                        p[i] -= self.lr * g[i];
                    }
                }
            }
        }

        for (param, start, values) in saved {
            params[param][start..start + values.len()].copy_from_slice(&values);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.0; 3];
        let mut opt = OptimizerState::adam(1e-3);
        let before = p.clone();
        opt.step(&mut [&mut p], &[&g], &[]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_adam_step_is_bias_corrected_unit_direction() {
        // g = 1 at step 1: m_hat = 1, v_hat = 1, update = -lr / (1 + eps).
        let mut p = vec![0.0];
        let g = vec![1.0];
        let mut opt = OptimizerState::adam(1e-3);
        opt.step(&mut [&mut p], &[&g], &[]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9, "p = {}", p[0]);
    }

    #[test]
    fn frozen_row_stays_zero_after_many_random_steps() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let side = 4;
        let mut w = vec![0.0; side * side];
        for x in w.iter_mut().skip(side) {
            *x = rng.random::<f64>();
        }
        let mut opt = OptimizerState::adam(1e-2);
        let frozen = [FrozenSpan {
            param: 0,
            start: 0,
            len: side,
        }];
        for _ in 0..100 {
            let g: Vec<f64> = (0..side * side).map(|_| rng.random::<f64>() - 0.5).collect();
            opt.step(&mut [&mut w], &[&g], &frozen).unwrap();
        }
        assert!(w[..side].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_gradient_is_a_numeric_failure() {
        let mut p = vec![0.0];
        let g = vec![f64::NAN];
        let mut opt = OptimizerState::adam(1e-3);
        let err = opt.step(&mut [&mut p], &[&g], &[]).unwrap_err();
        assert!(matches!(err, crate::error::Error::Numeric(_)));
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = vec![1.0];
        let g = vec![2.0];
        let mut opt = OptimizerState::sgd(0.1);
        opt.step(&mut [&mut p], &[&g], &[]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }
}
