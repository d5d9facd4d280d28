//! Named parameter storage with a frozen/trainable partition.

use std::collections::HashMap;
use std::fmt;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Low-rank adapter factors.
    Lora,
    /// Trajectory embedder (Fourier features, road and missing-point encoders, reference tokens).
    Embedder,
    /// Prompt token embedding table.
    Prompt,
    /// Flow-grid convolution encoder.
    FlowEncoder,
    /// Segment classifier and ratio regressor.
    Heads,
    /// Transformer base weights.
    Base,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Lora,
        ParamGroup::Embedder,
        ParamGroup::Prompt,
        ParamGroup::FlowEncoder,
        ParamGroup::Heads,
        ParamGroup::Base,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Lora => "lora",
            ParamGroup::Embedder => "embedder",
            ParamGroup::Prompt => "prompt",
            ParamGroup::FlowEncoder => "flow_encoder",
            ParamGroup::Heads => "heads",
            ParamGroup::Base => "base",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Mat, trainable: bool) -> ParamId {
        let name = name.into();
        let id = ParamId(self.params.len());
        assert!(self.by_name.insert(name.clone(), id).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, group, value, trainable });
        id
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

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Scalar count of trainable entries, optionally restricted to one group.
    pub fn trainable_count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && group.is_none_or(|g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over the names and exact bit patterns of the selected parameters.
    pub fn checksum(&self, mut select: impl FnMut(&Param) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| select(p)) {
            h.update(p.name.as_bytes());
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn norm_report(&self) -> String {
        let mut groups: Vec<(ParamGroup, f64)> = ParamGroup::ALL.iter().map(|g| (*g, 0.0)).collect();
        for p in &self.params {
            let slot = groups.iter_mut().find(|(g, _)| *g == p.group).expect("known group");
            slot.1 += p.value.iter().map(|v| v * v).sum::<f64>();
        }
        groups.iter().map(|(g, s)| format!("{g}={:.4e}", s.sqrt())).collect::<Vec<_>>().join(" ")
    }
}

/// Matrix of i.i.d. normal entries.
pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut (impl Rng + ?Sized)) -> Mat {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// Gradients indexed by parameter; `None` means identically zero.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn zeros(n_params: usize) -> Self {
        Self { grads: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore, grads: &Gradients);
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        for (id, g) in grads.iter() {
            if store.is_trainable(id) {
                store.value_mut(id).scaled_add(-self.lr, g);
            }
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let m = self.m[id.0].get_or_insert_with(|| Mat::zeros(g.raw_dim()));
            let v = self.v[id.0].get_or_insert_with(|| Mat::zeros(g.raw_dim()));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
            });
            ndarray::Zip::from(store.value_mut(id)).and(&*m).and(&*v).for_each(|w, &m, &v| {
                *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}
