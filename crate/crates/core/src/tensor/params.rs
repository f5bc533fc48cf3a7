use super::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    trainable: bool,
}

/// Named parameter tensors with gradient accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    /// Registers a parameter that never receives gradient updates.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.params[id.0].trainable)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds the gradients of every parameter leaf of `graph`, scaled by `weight`.
    pub fn accumulate(&mut self, graph: &Graph, weight: f64) {
        for &(var, id) in graph.param_nodes() {
            if let Some(g) = graph.grad(var) {
                for (acc, &v) in self.params[id.0].grad.iter_mut().zip(g) {
                    *acc += weight * v;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// SGD with classical momentum: `v ← μ·v + g`, `p ← p − lr·v`. With
/// `clip_norm` set, `g` is first rescaled so its global L2 norm over the
/// trainable parameters is at most that value.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            clip_norm: None,
            velocity: Vec::new(),
        }
    }

    pub fn with_clip_norm(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    /// Global L2 norm of the trainable gradients.
    pub fn grad_norm(store: &ParamStore) -> f64 {
        store
            .params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| &p.grad)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        if self.velocity.len() != store.params.len() {
            self.velocity = store.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        let scale = match self.clip_norm {
            Some(c) => {
                let n = Self::grad_norm(store);
                if n > c { c / n } else { 1.0 }
            }
            None => 1.0,
        };
        for (p, v) in store.params.iter_mut().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            for ((w, vel), &g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(&p.grad) {
                *vel = self.momentum * *vel + scale * g;
                *w -= self.lr * *vel;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(p: f64, g: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(p));
        s.params[id.0].grad[0] = g;
        (s, id)
    }

    #[test]
    fn sgd_examples() {
        let (mut s, id) = store_with(1.0, 2.0);
        Sgd::new(0.1, 0.9).step(&mut s);
        assert!((s.value(id).item() - 0.8).abs() < 1e-15);

        let (mut s, id) = store_with(1.0, 0.0);
        Sgd::new(0.1, 0.9).step(&mut s);
        assert_eq!(s.value(id).item(), 1.0);

        let (mut s, id) = store_with(1.0, 2.0);
        Sgd::new(0.0, 0.9).step(&mut s);
        assert_eq!(s.value(id).item(), 1.0);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut s = ParamStore::new();
        let id = s.add_frozen("w", Tensor::scalar(1.0));
        s.params[id.0].grad[0] = 5.0;
        Sgd::new(0.1, 0.9).step(&mut s);
        assert_eq!(s.value(id).item(), 1.0);
    }
}
