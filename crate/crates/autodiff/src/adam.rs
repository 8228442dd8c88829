use crate::error::OptimError;
use crate::{Gradients, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            state: AdamState::new(params),
        }
    }

    /// One bias-corrected Adam update. Parameters missing from `grads` are
    /// treated as having zero gradient. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<(), OptimError> {
        for (id, g) in grads.params() {
            let name = params.name(id).unwrap_or("?").to_string();
            let expected = params.get(id).map(|t| t.shape().to_vec()).unwrap_or_default();
            if g.shape() != expected.as_slice() {
                return Err(OptimError::ShapeMismatch {
                    name,
                    expected,
                    got: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(OptimError::NonFiniteGradient { name });
            }
        }

        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step_size = T::lit(lr / c1);
        let c2_sqrt = T::lit(c2.sqrt());
        let eps = T::lit(eps);

        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let grad = grads.param(id);
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let p = params.get_mut(id).expect("id from store").data_mut();
            for j in 0..p.len() {
                let g = grad.map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                p[j] -= step_size * m[j] / (v[j].sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}
