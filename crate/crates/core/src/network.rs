//! End-to-end reconstruction pipeline: encoder, memory, decoder, loss.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::data::PatchedWindow;
use crate::error::{Error, Result};
use crate::memory::{ItemUpdate, MemoryBank, MemorySelection, Route};
use crate::model::{Model, ModelVars};
use crate::numerics::{Graph, Matrix, ParamVector, Real, Var};

/// How the memory participates in training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemoryStrategy {
    /// No memory; the decoder sees `[q; q]`.
    None,
    /// Own-domain item, never written back.
    Frozen,
    /// Own-domain item, written back during training.
    OwnDomain,
    /// Similarity top-K items, written back during training.
    DataDriven,
}

impl MemoryStrategy {
    pub fn uses_memory(self) -> bool {
        self != MemoryStrategy::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MemoryStrategy::None => "none",
            MemoryStrategy::Frozen => "frozen",
            MemoryStrategy::OwnDomain => "own_domain",
            MemoryStrategy::DataDriven => "data_driven",
        }
    }
}

impl fmt::Display for MemoryStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MemoryStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MemoryStrategy::None),
            "frozen" => Ok(MemoryStrategy::Frozen),
            "own_domain" => Ok(MemoryStrategy::OwnDomain),
            "data_driven" => Ok(MemoryStrategy::DataDriven),
            other => Err(Error::Config(alloc::format!("unknown memory strategy `{other}`"))),
        }
    }
}

/// Model, optional memory bank, and the strategy tying them together.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub model: Model<T>,
    pub bank: Option<MemoryBank<T>>,
    pub strategy: MemoryStrategy,
}

/// Graph handles for all trainable tensors.
pub struct NetworkVars {
    pub model: ModelVars,
    pub gates: Option<(Var, Var)>,
    pub all: Vec<Var>,
}

/// Output of one window pass recorded on a graph.
pub struct GraphPass<T> {
    pub reconstruction: Var,
    pub loss: Var,
    pub selection: Option<MemorySelection>,
    pub updates: Vec<ItemUpdate<T>>,
}

/// Output of one inference pass.
#[derive(Clone, Debug)]
pub struct WindowPass<T> {
    /// `P × L` reconstruction of the observed patches.
    pub reconstruction: Matrix<T>,
    pub loss: T,
    pub selection: Option<MemorySelection>,
}

/// Mean loss and flat gradient over a batch.
pub struct BatchGradient<T> {
    pub loss: T,
    pub gradient: Vec<T>,
    pub updates: Vec<ItemUpdate<T>>,
    pub selections: Vec<MemorySelection>,
}

impl<T: Real> Network<T> {
    pub fn new(model: Model<T>, bank: Option<MemoryBank<T>>, strategy: MemoryStrategy) -> Result<Self> {
        if strategy.uses_memory() != bank.is_some() {
            return Err(Error::Config(alloc::format!(
                "strategy {strategy} {} a memory bank",
                if strategy.uses_memory() { "requires" } else { "forbids" }
            )));
        }
        if let Some(b) = &bank {
            b.validate()?;
            if b.d_model() != model.cfg.d_model || b.max_patches() != model.cfg.max_patches {
                return Err(Error::Shape("memory bank does not match model dimensions".into()));
            }
        }
        Ok(Self { model, bank, strategy })
    }

    /// Names and values of every trainable tensor.
    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut t = self.model.tensors();
        if let Some(b) = &self.bank {
            t.push((String::from("memory.u_psi"), &b.u_psi));
            t.push((String::from("memory.w_psi"), &b.w_psi));
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut t = self.model.tensors_mut();
        if let Some(b) = &mut self.bank {
            t.push(&mut b.u_psi);
            t.push(&mut b.w_psi);
        }
        t
    }

    pub fn to_param_vector(&self) -> ParamVector<T> {
        let mut p = ParamVector::new();
        for (name, m) in self.tensors() {
            p.push(name, m);
        }
        p
    }

    pub fn load_param_vector(&mut self, p: &ParamVector<T>) -> Result<()> {
        if p.len() != self.tensors().iter().map(|(_, m)| m.len()).sum::<usize>() {
            return Err(Error::Shape("parameter vector length differs from network".into()));
        }
        let mut offset = 0;
        for slot in self.tensors_mut() {
            let n = slot.len();
            slot.data_mut().copy_from_slice(&p.values()[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Overwrites trainable tensors from a flat slice in [`Self::tensors`] order.
    pub fn load_flat(&mut self, values: &[T]) -> Result<()> {
        let mut offset = 0;
        for slot in self.tensors_mut() {
            let n = slot.len();
            let src = values
                .get(offset..offset + n)
                .ok_or_else(|| Error::Shape("flat parameter slice too short".into()))?;
            slot.data_mut().copy_from_slice(src);
            offset += n;
        }
        if offset != values.len() {
            return Err(Error::Shape("flat parameter slice too long".into()));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> NetworkVars {
        let model = self.model.bind(g, trainable);
        let mut all = model.all.clone();
        let gates = self.bank.as_ref().map(|b| {
            let (u, w) = if trainable {
                (g.param(b.u_psi.clone()), g.param(b.w_psi.clone()))
            } else {
                (g.constant(b.u_psi.clone()), g.constant(b.w_psi.clone()))
            };
            all.push(u);
            all.push(w);
            (u, w)
        });
        NetworkVars { model, gates, all }
    }

    /// Routing for an input of the given domain.
    pub fn route(&self, domain: Option<usize>) -> Route {
        match (self.strategy, &self.bank, domain) {
            (MemoryStrategy::Frozen | MemoryStrategy::OwnDomain, Some(b), Some(d)) => {
                b.own_item(d).map_or(Route::TopK, Route::Forced)
            }
            _ => Route::TopK,
        }
    }

    /// Records one window pass; the loss is the MSE over observed patches.
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &NetworkVars, window: &PatchedWindow, domain: Option<usize>) -> Result<GraphPass<T>> {
        let patches: Matrix<T> = window.patches.cast();
        let tokens = self.model.embed_graph(g, &vars.model, &patches, &window.mask)?;
        let q = self.model.encode_graph(g, &vars.model, tokens, &window.mask)?;
        let (refined, selection, updates) = match (&self.bank, vars.gates) {
            (Some(bank), Some(gates)) => {
                let (r, s, u) = bank.forward_graph(g, q, gates, self.route(domain))?;
                (r, Some(s), u)
            }
            _ => (q, None, Vec::new()),
        };
        let cat = g.concat_cols(&[q, refined])?;
        let reconstruction = self.model.decode_graph(g, &vars.model, cat)?;
        let target = g.constant(window.observed_patches().cast());
        let diff = g.sub(reconstruction, target)?;
        let loss = g.mean_square(diff);
        Ok(GraphPass { reconstruction, loss, selection, updates })
    }

    /// Inference pass; never touches the bank.
    pub fn reconstruct(&self, window: &PatchedWindow, domain: Option<usize>) -> Result<WindowPass<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let pass = self.forward_graph(&mut g, &vars, window, domain)?;
        Ok(WindowPass {
            reconstruction: g.value(pass.reconstruction).clone(),
            loss: g.scalar(pass.loss),
            selection: pass.selection,
        })
    }

    /// Mean loss over `batch` and its gradient in [`Self::tensors`] order.
    pub fn batch_gradient(&self, batch: &[(&PatchedWindow, Option<usize>)]) -> Result<BatchGradient<T>> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let weight = T::one() / T::of(batch.len() as f64);
        let sizes: Vec<usize> = self.tensors().iter().map(|(_, m)| m.len()).collect();
        let mut gradient = alloc::vec![T::zero(); sizes.iter().sum()];
        let mut loss = T::zero();
        let mut updates = Vec::new();
        let mut selections = Vec::new();
        for &(window, domain) in batch {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, true);
            let pass = self.forward_graph(&mut g, &vars, window, domain)?;
            loss += g.scalar(pass.loss) * weight;
            let grads = g.backward(pass.loss, weight)?;
            let mut offset = 0;
            for (&v, &n) in vars.all.iter().zip(&sizes) {
                if let Some(dv) = grads.get(v) {
                    for (acc, &x) in gradient[offset..offset + n].iter_mut().zip(dv.data()) {
                        *acc += x;
                    }
                }
                offset += n;
            }
            updates.extend(pass.updates);
            selections.extend(pass.selection);
        }
        Ok(BatchGradient { loss, gradient, updates, selections })
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network { model: self.model.cast(), bank: self.bank.as_ref().map(|b| b.cast()), strategy: self.strategy }
    }
}
