use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};

/// Index of a parameter within a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Named parameter tensors with accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        debug_assert!(
            !self.entries.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        let grad = vec![0.0; value.len()];
        self.entries.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init for linear and LSTM
    /// weights.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape, data).expect("valid shape"))
    }

    /// N(0, 0.02) init for embedding tables.
    pub fn add_normal(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(shape, data).expect("valid shape"))
    }

    pub fn add_const(&mut self, name: &str, shape: Vec<usize>, fill: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, Tensor::new(shape, vec![fill; n]).expect("valid shape"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Create requires_grad leaves for every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|p| tape.leaf(p.value.clone(), true))
            .collect();
        BoundParams { vars }
    }

    /// Pull gradients accumulated on `tape` back into the parameter store,
    /// scaled by `scale`.
    pub fn accumulate_from_tape(&mut self, tape: &Tape, bound: &BoundParams, scale: f64) {
        for (p, var) in self.entries.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(*var) {
                for (acc, gv) in p.grad.iter_mut().zip(g) {
                    *acc += gv * scale;
                }
            }
        }
    }

    pub fn grad_global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.entries {
            for g in &mut p.grad {
                *g *= factor;
            }
        }
    }
}

/// Tape leaves for one forward/backward pass, in ParamSet order.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
