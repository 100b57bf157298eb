/// Adam with per-parameter learning rates and bias correction.
///
/// `step` returns the update to *add* to the parameters. The optimizers in
/// this crate clone the state for a trial step and keep the clone only when
/// the step is accepted.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: Vec<f64>) -> Self {
        let n = lr.len();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-12,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
    }

    /// Forgets the moment estimates, keeping the learning rates.
    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|m| *m = 0.0);
        self.v.iter_mut().for_each(|v| *v = 0.0);
        self.t = 0;
    }

    /// Consumes one gradient and returns `−lr · scale · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, grad: &[f64], scale: f64) -> Vec<f64> {
        assert_eq!(grad.len(), self.lr.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut out = Vec::with_capacity(grad.len());
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            out.push(-self.lr[i] * scale * m_hat / (v_hat.sqrt() + self.eps));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_sign_times_lr() {
        let mut a = Adam::new(vec![0.1, 0.2, 0.3]);
        let s = a.step(&[2.0, -5.0, 0.0], 1.0);
        assert!((s[0] + 0.1).abs() < 1e-9);
        assert!((s[1] - 0.2).abs() < 1e-9);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut a = Adam::new(vec![0.05; 2]);
        let mut x = [3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)];
            let s = a.step(&g, 1.0);
            x[0] += s[0];
            x[1] += s[1];
        }
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3);
    }
}
