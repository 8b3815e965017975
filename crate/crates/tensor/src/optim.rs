use crate::error::{Result, TensorError};
use crate::params::ParamStore;

/// Adam with bias correction.
///
/// L2 regularization `η‖θ‖²` enters as the gradient term `2ηθ` before the
/// moment update. A parameter whose effective gradient is identically zero is
/// left untouched for that step, moments included.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self::with_betas(params, lr, (0.9, 0.999), 1e-8)
    }

    pub fn with_betas(params: &ParamStore, lr: f64, betas: (f64, f64), eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores optimizer state, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let fits = |xs: &[Vec<f64>]| xs.len() == self.m.len() && xs.iter().zip(&self.m).all(|(a, b)| a.len() == b.len());
        if !fits(&m) || !fits(&v) {
            return Err(TensorError::Contract("Adam moments do not match parameter shapes".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update using the gradients stored in `params`, then zeroes them.
    pub fn step(&mut self, params: &mut ParamStore, weight_decay: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(TensorError::Contract("optimizer built for a different parameter set".into()));
        }
        for p in params.iter_mut() {
            if p.grad.data().iter().any(|g| g.is_nan()) {
                return Err(TensorError::Divergence { param: p.name.clone() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let theta = p.value.data_mut();
            let grad = p.grad.data();
            let effective = |i: usize| grad[i] + 2.0 * weight_decay * theta[i];
            if (0..theta.len()).all(|i| effective(i) == 0.0) {
                continue;
            }
            for i in 0..theta.len() {
                let g = grad[i] + 2.0 * weight_decay * theta[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn single(value: f64) -> (ParamStore, crate::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::scalar(value));
        (store, id)
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let (mut store, id) = single(1.5);
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store, 0.0).unwrap();
        assert_eq!(store.value(id).data(), &[1.5]);
    }

    #[test]
    fn scalar_trace() {
        // m = 0.1, v = 0.001, m̂ = v̂ = 1 → θ = 1 − 0.1 / (1 + 1e-8)
        let (mut store, id) = single(1.0);
        let mut adam = Adam::new(&store, 0.1);
        store.get_mut(id).grad = Tensor::scalar(1.0);
        adam.step(&mut store, 0.0).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-15);
        assert!((store.value(id).data()[0] - 0.9).abs() < 1e-8);
        assert_eq!(store.get(id).grad.data(), &[0.0]);
    }

    #[test]
    fn weight_decay_shrinks_zero_grad_param() {
        let (mut store, id) = single(1.0);
        let mut adam = Adam::new(&store, 0.001);
        adam.step(&mut store, 1e-5).unwrap();
        // effective grad 2e-5: first Adam step moves by ≈ lr regardless of magnitude
        let theta = store.value(id).data()[0];
        assert!(theta < 1.0);
        let g: f64 = 2e-5;
        let expected = 1.0 - 0.001 * g / (g + 1e-8);
        assert!((theta - expected).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_divergence() {
        let (mut store, id) = single(1.0);
        let mut adam = Adam::new(&store, 0.1);
        store.get_mut(id).grad = Tensor::scalar(f64::NAN);
        assert_eq!(
            adam.step(&mut store, 0.0),
            Err(TensorError::Divergence { param: "theta".into() })
        );
        assert_eq!(adam.step_count(), 0);
    }
}
