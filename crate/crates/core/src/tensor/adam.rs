use super::{ParamSet, Real};

/// Adam with bias correction. Moments are kept per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: params.iter().map(|t| vec![T::zero(); t.numel()]).collect(),
            second: params.iter().map(|t| vec![T::zero(); t.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Tensors without a gradient buffer are left as they are.
    pub fn step(&mut self, params: &mut ParamSet<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, tensor) in params.iter_mut().enumerate() {
            let Some(grad) = tensor.grad().map(<[T]>::to_vec) else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, value) in tensor.values_mut().iter_mut().enumerate() {
                let g = grad[k].f64();
                let mk = self.beta1 * m[k].f64() + (1.0 - self.beta1) * g;
                let vk = self.beta2 * v[k].f64() + (1.0 - self.beta2) * g * g;
                m[k] = T::of(mk);
                v[k] = T::of(vk);
                let update = self.learning_rate * (mk / bc1) / ((vk / bc2).sqrt() + self.epsilon);
                *value = T::of(value.f64() - update);
            }
            tensor.zero_grad();
        }
    }
}
