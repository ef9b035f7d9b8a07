use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

/// First-order update rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    /// Stochastic gradient descent with heavy-ball momentum.
    Sgd { momentum: f64 },
    /// Adaptive moments with the usual defaults (β₁ = 0.9, β₂ = 0.999).
    Adam,
}

impl OptimizerKind {
    pub fn label(&self) -> String {
        match self {
            OptimizerKind::Sgd { momentum } => format!("sgd(momentum={momentum})"),
            OptimizerKind::Adam => "adam".to_string(),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment buffers for one flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Float> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    /// One bias-corrected Adam step on `param` in place.
    pub fn step(&mut self, param: &mut [T], grad: &[T], lr: f64) {
        assert_eq!(param.len(), grad.len());
        assert_eq!(param.len(), self.m.len());
        self.t += 1;
        let c = |x: f64| T::from(x).expect("representable");
        let (b1, b2) = (c(ADAM_BETA1), c(ADAM_BETA2));
        let one = T::one();
        let bc1 = one - b1.powi(self.t);
        let bc2 = one - b2.powi(self.t);
        let step = c(lr) / bc1;
        let eps = c(ADAM_EPS);
        for (((p, g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            *p = *p - step * *m / ((*v / bc2).sqrt() + eps);
        }
    }
}

/// Updates every parameter of a [`ParamStore`] from its gradient.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    adam: Vec<AdamState<f32>>,
    velocity: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Self {
        let sizes: Vec<usize> = params
            .layout()
            .iter()
            .map(|s| s.shape.iter().product())
            .collect();
        let (adam, velocity) = match kind {
            OptimizerKind::Adam => (sizes.iter().map(|&n| AdamState::new(n)).collect(), vec![]),
            OptimizerKind::Sgd { .. } => (vec![], sizes.iter().map(|&n| vec![0.0; n]).collect()),
        };
        Optimizer {
            kind,
            lr,
            adam,
            velocity,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), params.len());
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.tensor_mut(i);
            match self.kind {
                OptimizerKind::Adam => self.adam[i].step(p.data_mut(), g.data(), self.lr),
                OptimizerKind::Sgd { momentum } => {
                    let (mu, lr) = (momentum as f32, self.lr as f32);
                    for ((w, v), gv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(self.velocity[i].iter_mut())
                        .zip(g.data())
                    {
                        *v = mu * *v + *gv;
                        *w -= lr * *v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut x = vec![5.0f64, -3.0];
        let mut st = AdamState::new(2);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            st.step(&mut x, &g, 0.05);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut x = vec![1.5f32; 3];
        let mut st = AdamState::new(3);
        st.step(&mut x, &[0.0; 3], 1.0);
        assert_eq!(x, vec![1.5; 3]);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::from_vec([1, 1, 1, 1], vec![1.0]));
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.5 }, 0.1, &store);
        let g = vec![Some(Tensor::from_vec([1, 1, 1, 1], vec![1.0]))];
        opt.step(&mut store, &g);
        opt.step(&mut store, &g);
        // v1 = 1, v2 = 1.5 → w = 1 - 0.1 - 0.15
        assert!((store.get(store.find("w").unwrap()).data()[0] - 0.75).abs() < 1e-6);
    }
}
