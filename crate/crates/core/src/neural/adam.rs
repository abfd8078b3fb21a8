//! Adaptive moment estimation.

use crate::error::{Error, Result};

use super::{Gradients, NetParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &NetParams, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, steps: 0, first: zeros.clone(), second: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected update of `params` against `grads`.
    pub fn step(&mut self, params: &mut NetParams, grads: &Gradients) -> Result<()> {
        if grads.tensors.len() != self.first.len()
            || grads.tensors.iter().zip(&self.first).any(|(g, m)| g.len() != m.len())
        {
            return Err(Error::Shape("gradient does not match optimiser state".into()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((tensor, g), m), v) in params.tensors_mut().iter_mut().zip(&grads.tensors).zip(&mut self.first).zip(&mut self.second) {
            for (((w, &g), m), v) in tensor.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Architecture;

    fn scalar() -> NetParams {
        NetParams::zeros(Architecture { input: 1, lstm_hidden: 1, dense: vec![], output: 1 }).unwrap()
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = scalar();
        p.tensors_mut()[0].data[0] = 0.7;
        let before = p.clone();
        let mut opt = Adam::new(&p, 1e-3);
        let zero = p.zero_gradients();
        for _ in 0..10 {
            opt.step(&mut p, &zero).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = scalar();
        let mut opt = Adam::new(&p, 1e-3);
        let mut g = p.zero_gradients();
        g.tensors[0][0] = 2.0;
        for _ in 0..50 {
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.tensors()[0].data[0] < 0.0);
    }

    #[test]
    fn quadratic_bowl() {
        let mut p = scalar();
        p.tensors_mut()[0].data[0] = 1.0;
        let mut opt = Adam::new(&p, 1e-2);
        let mut g = p.zero_gradients();
        for _ in 0..10_000 {
            g.tensors[0][0] = 2.0 * p.tensors()[0].data[0];
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.tensors()[0].data[0].abs() < 1e-3, "{}", p.tensors()[0].data[0]);
    }
}
