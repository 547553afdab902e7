//! Parameters, binding them onto a graph, and the basic layers.

mod layers;
mod optim;

pub use layers::{Attention, Conv1x1, Conv2d, ConvTranspose2x2, LayerNorm, Linear, Mlp, Projection};
pub use optim::{AdamW, AdamWConfig};

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};

/// Which part of the model a parameter belongs to. Checkpoint sections and the
/// ablation parameter ledger are keyed on this.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Frozen image encoder weights.
    Backbone,
    /// LoRA adapters on the encoder attention projections.
    Adapter,
    /// Prior aligner: image projection, similarity projection, guide affine.
    Prior,
    /// Two-stage upsampling, deformable guide alignment and the image-path 1x1.
    Fusion,
    /// Hypernetwork, base kernel, residual bias and step size.
    Refiner,
    /// Mask-token transformer decoder.
    Decoder,
    /// High-resolution prediction head.
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// Flat registry of named parameters.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>, group: ParamGroup, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value, trainable, group });
        ParamId(self.params.len() - 1)
    }

    /// Gaussian-initialized parameter.
    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        group: ParamGroup,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data: Vec<T> = (0..shape.iter().product()).map(|_| T::lit(dist.sample(rng))).collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape");
        self.add(name, value, group, trainable)
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], v: f64, group: ParamGroup, trainable: bool) -> ParamId {
        self.add(name, ArrayD::from_elem(IxDyn(shape), T::lit(v)), group, trainable)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Element counts per group, trainable parameters only.
    pub fn trainable_by_group(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out = BTreeMap::new();
        for p in self.params.iter().filter(|p| p.trainable) {
            *out.entry(p.group).or_insert(0) += p.value.len();
        }
        out
    }

    /// Copy into another element type (used to gradient-check a trained layout in f64).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.mapv(|v| U::lit(v.as_f64())),
                    trainable: p.trainable,
                    group: p.group,
                })
                .collect(),
        }
    }
}

/// A graph plus the lazily created leaf for each parameter used in a forward pass.
pub struct Ctx<'s, T: Real> {
    pub g: Graph<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    track_params: bool,
}

impl<'s, T: Real> Ctx<'s, T> {
    /// Context for training: trainable parameters become gradient leaves.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self { g: Graph::new(), store, bound: vec![None; store.len()], track_params: true }
    }

    /// Context for inference or for gradients with respect to inputs only.
    pub fn frozen(store: &'s ParamStore<T>) -> Self {
        Self { track_params: false, ..Self::new(store) }
    }

    /// Wraps an existing graph; parameters bind as constants unless [`Ctx::bind`] is used.
    pub fn with_graph(store: &'s ParamStore<T>, g: Graph<T>) -> Self {
        Self { g, store, bound: vec![None; store.len()], track_params: false }
    }

    /// Uses `var` wherever parameter `id` is read.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn into_graph(self) -> Graph<T> {
        self.g
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = self.store.get(id);
        let v = self.g.leaf(param.value.clone(), self.track_params && param.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameter variables bound during the forward pass.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}
