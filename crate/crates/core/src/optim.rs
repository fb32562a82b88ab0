use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed set of parameters.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub params: Vec<ParamId>,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: Vec<ParamId>, store: &ParamStore<T>) -> Self {
        let first = params.iter().map(|&p| Tensor::zeros(store.value(p).shape())).collect();
        let second = params.iter().map(|&p| Tensor::zeros(store.value(p).shape())).collect();
        Adam {
            config,
            params,
            step: 0,
            first,
            second,
        }
    }

    /// Apply one update. `grads` is indexed by parameter id; parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = T::from_f64_lossy(c.learning_rate / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(c.eps);
        for (slot, &id) in self.params.iter().enumerate() {
            let Some(g) = grads[id.index()].as_ref() else {
                continue;
            };
            let m = self.first[slot].data_mut();
            for (m, &g) in m.iter_mut().zip(g.data()) {
                *m = b1 * *m + (T::one() - b1) * g;
            }
            let v = self.second[slot].data_mut();
            for (v, &g) in v.iter_mut().zip(g.data()) {
                *v = b2 * *v + (T::one() - b2) * g * g;
            }
            apply(store.value_mut(id), &self.first[slot], &self.second[slot], lr, inv_bc2, eps);
        }
    }
}

fn apply<T: Scalar>(p: &mut Tensor<T>, m: &Tensor<T>, v: &Tensor<T>, lr: T, inv_bc2: T, eps: T) {
    for ((p, &m), &v) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
        *p = *p - lr * m / ((v * inv_bc2).sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p".into(), Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap(), ParamGroup::Distill, 0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.005), vec![id], &store);
        let g = Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap();
        adam.step(&mut store, &[Some(g)]);
        let p = store.value(id).data();
        assert!((p[0] - (1.0 - 0.005)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 0.005)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p".into(), Tensor::scalar(4.0), ParamGroup::Distill, 0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), vec![id], &store);
        for _ in 0..2000 {
            let x = store.value(id).item();
            adam.step(&mut store, &[Some(Tensor::scalar(2.0 * (x - 1.5)))]);
        }
        assert!((store.value(id).item() - 1.5).abs() < 1e-3);
    }
}
