//! Adam with classic L2 weight decay and a per-epoch exponential schedule.

use crate::autograd::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub first_moment: Tensor<F>,
    pub second_moment: Tensor<F>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    states: Vec<AdamState<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            states: store
                .iter()
                .map(|p| AdamState {
                    first_moment: Tensor::zeros(p.value.shape()),
                    second_moment: Tensor::zeros(p.value.shape()),
                    step: 0,
                })
                .collect(),
        }
    }

    pub fn states(&self) -> &[AdamState<F>] {
        &self.states
    }

    /// Applies one update to every trainable parameter. The decay term
    /// `weight_decay · value` is added to the gradient before the moments
    /// are updated.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64, weight_decay: f64) {
        let (b1, b2) = (self.beta1, self.beta2);
        for (param, state) in store.iter_mut().zip(&mut self.states) {
            if !param.trainable {
                continue;
            }
            state.step += 1;
            let t = state.step as i32;
            let bias1 = 1.0 - b1.powi(t);
            let bias2 = 1.0 - b2.powi(t);
            let m = state.first_moment.data_mut();
            let v = state.second_moment.data_mut();
            let grad = param.grad.data();
            for (i, value) in param.value.data_mut().iter_mut().enumerate() {
                let g = grad[i].as_f64() + weight_decay * value.as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
                m[i] = F::from_f64(mi);
                v[i] = F::from_f64(vi);
                let update = lr * (mi / bias1) / ((vi / bias2).sqrt() + self.eps);
                *value = F::from_f64(value.as_f64() - update);
            }
        }
    }
}

/// Learning rate after `epoch` full epochs of exponential decay.
pub fn exponential_lr(initial: f64, decay: f64, epoch: usize) -> f64 {
    initial * decay.powi(epoch as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.3f32, -0.7]));
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 1e-2, 0.0);
        assert_eq!(store.value(id).data(), &[0.3, -0.7]);
        assert_eq!(adam.states()[0].step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [2.5f64, -0.01] {
            let mut store = ParamStore::new();
            let id = store.add("w", Tensor::scalar(1.0f64));
            store.get_mut(id).grad = Tensor::scalar(g);
            let mut adam = Adam::new(&store);
            adam.step(&mut store, 0.05, 0.0);
            let moved = store.value(id).item() - 1.0;
            assert!((moved + 0.05 * g.signum()).abs() < 1e-6, "moved {moved}");
        }
    }

    #[test]
    fn identical_parameters_stay_identical() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![0.1f32, 0.2, 0.3]));
        let b = store.add("b", Tensor::vector(vec![0.1f32, 0.2, 0.3]));
        let mut adam = Adam::new(&store);
        for step in 0..5 {
            let g = Tensor::vector(vec![0.5 - step as f32, 1.0, -2.0]);
            store.get_mut(a).grad = g.clone();
            store.get_mut(b).grad = g;
            adam.step(&mut store, 1e-3, 1e-6);
        }
        assert_eq!(store.value(a), store.value(b));
        assert_eq!(adam.states()[1].step, 5);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0f32));
        store.get_mut(id).grad = Tensor::scalar(1.0);
        store.get_mut(id).trainable = false;
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.1, 0.0);
        assert_eq!(store.value(id).item(), 1.0);
        assert_eq!(adam.states()[0].step, 0);
    }

    #[test]
    fn empty_store_is_noop() {
        let mut store = ParamStore::<f32>::new();
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.1, 0.1);
    }

    #[test]
    fn schedule_decays_geometrically() {
        assert_eq!(exponential_lr(1e-4, 0.99, 0), 1e-4);
        assert!((exponential_lr(1e-4, 0.99, 2) - 0.9801e-4).abs() < 1e-15);
    }
}
