use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Grads, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters of a store placed on a tape for one forward pass.
#[derive(Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Binds every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect(),
        }
    }

    /// Collects gradients in store order; parameters unused by the pass get zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Grads) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.raw_dim())))
            .collect()
    }

    /// Replaces values by name; every name must exist with a matching shape.
    pub fn load_named(&mut self, values: BTreeMap<String, Tensor>) -> Result<(), String> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let v = values
                .get(name)
                .ok_or_else(|| format!("missing parameter {name}"))?;
            if v.shape() != slot.shape() {
                return Err(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    v.shape()
                ));
            }
            *slot = v.clone();
        }
        Ok(())
    }
}

/// Gaussian initialisation scaled by `gain / sqrt(fan_in)`.
pub fn init_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::from_shape_vec(IxDyn(shape), (0..n).map(|_| normal.sample(rng)).collect())
        .expect("shape matches element count")
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.raw_dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, mut grads: Vec<Tensor>) {
        if let Some(max_norm) = self.clip_norm {
            let norm = grads
                .iter()
                .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                let factor = max_norm / norm;
                for g in &mut grads {
                    g.mapv_inplace(|x| x * factor);
                }
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(&grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", array![3.0, -2.0].into_dyn());
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let sq = tape.square(b[id]);
            let loss = tape.sum(sq);
            let mut g = tape.backward(loss);
            let grads = store.collect_grads(&b, &mut g);
            opt.step(&mut store, grads);
        }
        assert!(store.get(id).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn load_named_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.add("w", zeros(&[2, 2]));
        let mut values = BTreeMap::new();
        values.insert("w".to_string(), zeros(&[3]));
        assert!(store.load_named(values).is_err());
    }
}
