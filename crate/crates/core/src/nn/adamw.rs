use crate::error::{Error, Result};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamW {
    pub fn new(param_count: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Restores optimiser state, e.g. from a run checkpoint.
    pub fn restore(&mut self, step: u64, first: Vec<f64>, second: Vec<f64>) -> Result<()> {
        if first.len() != self.first_moment.len() || second.len() != self.second_moment.len() {
            return Err(Error::config("optimiser moment length mismatch"));
        }
        self.step = step;
        self.first_moment = first;
        self.second_moment = second;
        Ok(())
    }

    /// One update of `params` in place. Nothing is modified when a gradient
    /// entry is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::config(format!(
                "adamw: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            params[i] -= self.lr * self.weight_decay * params[i];
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut opt = AdamW::new(3, 1e-2, 0.0);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            opt.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn single_step_hand_trace() {
        // t=1: m = 0.1 g, v = 0.001 g², m̂ = g, v̂ = g², Δ = lr·g/(|g|+eps)
        let mut opt = AdamW::new(2, 0.01, 0.0);
        let mut p = vec![1.0, 1.0];
        opt.step(&mut p, &[0.5, -2.0]).unwrap();
        let expect0 = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        let expect1 = 1.0 + 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - expect0).abs() < 1e-15);
        assert!((p[1] - expect1).abs() < 1e-15);
        // t=2 with the same gradient: m = 0.19 g, v = 0.001999 g²
        opt.step(&mut p, &[0.5, -2.0]).unwrap();
        let m_hat = 0.19 * 0.5 / (1.0 - 0.81);
        let v_hat = 0.001999 * 0.25 / (1.0 - 0.999f64.powi(2));
        let expect0 = expect0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - expect0).abs() < 1e-14);
    }

    #[test]
    fn decay_shrinks_params_with_zero_gradient() {
        let mut opt = AdamW::new(2, 0.1, 0.5);
        let mut p = vec![2.0, -4.0];
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert!((p[0] - 2.0 * 0.95).abs() < 1e-15);
        assert!((p[1] + 4.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_reports_index() {
        let mut opt = AdamW::new(3, 0.1, 0.0);
        let mut p = vec![0.0; 3];
        let err = opt.step(&mut p, &[0.0, f64::NAN, 1.0]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1 }));
        assert_eq!(opt.step_count(), 0);
    }
}
