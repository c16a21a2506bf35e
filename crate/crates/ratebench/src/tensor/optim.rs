//! Named parameter storage and the AdamW update rule.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{NodeId, Shape, Tape};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct ParamId(pub usize);

pub struct Param {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

/// Flat registry of named parameter tensors. Registration order is the
/// canonical order for optimizer state and checkpoints.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: Shape, data: Vec<f32>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.numel(), data.len(), "param {name}: shape/data mismatch");
        assert!(!self.by_name.contains_key(&name), "duplicate param {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, shape, data });
        id
    }

    /// Uniform init in [-bound, bound] with bound = sqrt(1 / fan_in),
    /// optionally scaled down (output layers start near zero).
    pub fn register_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        fan_in: usize,
        gain: f32,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = gain / (fan_in.max(1) as f32).sqrt();
        let data = (0..shape.numel())
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.register(name, shape, data)
    }

    pub fn register_zeros(&mut self, name: impl Into<String>, shape: Shape) -> ParamId {
        let data = vec![0.0; shape.numel()];
        self.register(name, shape, data)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Pushes the parameter onto a tape as a gradient-requiring leaf and
    /// records the binding for the optimizer step.
    pub fn bind(&self, id: ParamId, tape: &mut Tape, bindings: &mut Bindings) -> NodeId {
        let p = &self.params[id.0];
        let node = tape.param(p.shape, p.data.clone());
        bindings.pairs.push((id, node));
        node
    }
}

/// (parameter, tape leaf) pairs collected while building one step's graph.
#[derive(Default)]
pub struct Bindings {
    pub pairs: Vec<(ParamId, NodeId)>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }
}

/// AdamW with decoupled weight decay.
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect(),
            v: store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// Applies one update over the bound parameters. Parameters without a
    /// gradient this step (unused branches) are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        tape: &Tape,
        grads: &super::Grads,
        bindings: &Bindings,
    ) {
        let _ = tape;
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for &(pid, node) in &bindings.pairs {
            let Some(g) = grads.get(node) else { continue };
            let m = &mut self.m[pid.0];
            let v = &mut self.v[pid.0];
            let data = &mut store.params[pid.0].data;
            for i in 0..data.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -=
                    self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
    }
}
