use super::Real;
use crate::error::{Error, Result};

/// Adam with bias correction. Moments are kept per optimized buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub step_count: u64,
    pub learning_rate: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
    pub first_moment: Vec<Vec<F>>,
    pub second_moment: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    /// Standard betas (0.9, 0.999) and epsilon 1e-8; `sizes` are the lengths
    /// of the buffers that will be optimized.
    pub fn new(learning_rate: f64, sizes: &[usize]) -> Self {
        Self {
            step_count: 0,
            learning_rate: F::of(learning_rate),
            beta1: F::of(0.9),
            beta2: F::of(0.999),
            epsilon: F::of(1e-8),
            first_moment: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn step(&mut self, variables: &mut [&mut [F]], gradients: &[&[F]]) -> Result<()> {
        if variables.len() != self.first_moment.len() || gradients.len() != variables.len() {
            return Err(Error::usage(format!(
                "adam tracks {} buffers, got {} variables and {} gradients",
                self.first_moment.len(),
                variables.len(),
                gradients.len()
            )));
        }
        for (i, (v, g)) in variables.iter().zip(gradients).enumerate() {
            if v.len() != self.first_moment[i].len() || g.len() != v.len() {
                return Err(Error::usage(format!(
                    "buffer {i}: moment length {}, variable {}, gradient {}",
                    self.first_moment[i].len(),
                    v.len(),
                    g.len()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let one = F::one();
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let lr = self.learning_rate;
        let eps = self.epsilon;
        for (i, (vars, grads)) in variables.iter_mut().zip(gradients).enumerate() {
            let m = &mut self.first_moment[i];
            let s = &mut self.second_moment[i];
            for j in 0..vars.len() {
                let g = grads[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                s[j] = b2 * s[j] + (one - b2) * g * g;
                let m_hat = m[j] / c1;
                let s_hat = s[j] / c2;
                vars[j] -= lr * m_hat / (s_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
