use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TplError};
use crate::numerics::{Graph, NodeId, Tensor};

/// What a parameter belongs to; stage 2 only updates non-backbone roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Backbone,
    VisionPrompt,
    Generator,
    Gate,
    /// Derived tensors stored alongside a tuned model (e.g. the target-domain prompt).
    Derived,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Backbone => "backbone",
            Role::VisionPrompt => "vision_prompt",
            Role::Generator => "generator",
            Role::Gate => "gate",
            Role::Derived => "derived",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub tensor: Tensor,
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, role: Role, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TplError::invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, role, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| TplError::invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Marks every parameter of `role` as trainable or frozen.
    pub fn set_trainable(&mut self, role: Role, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.role == role) {
            p.tensor.set_requires_grad(trainable);
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(trainable);
        }
    }

    /// Removes and returns every parameter not matching `keep`.
    pub fn retain(&mut self, keep: impl Fn(&Param) -> bool) {
        self.params.retain(|p| keep(p));
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    /// Appends every parameter of `other`; names must not collide.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for p in other.params {
            self.insert(p.name, p.role, p.tensor)?;
        }
        Ok(())
    }

    /// Flattened little-endian bytes of every parameter value in order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_values() * 8);
        for p in &self.params {
            for v in p.tensor.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Content hash over names, shapes and bit patterns.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.values() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Binds stored parameters into a graph on first use.
///
/// Parameters enter the graph as differentiable leaves only when their
/// tensor has `requires_grad` set and the binder is in training mode.
pub struct Binder<'a> {
    stores: Vec<&'a ParamStore>,
    trainable: bool,
    bound: HashMap<String, NodeId>,
}

impl<'a> Binder<'a> {
    pub fn new(stores: Vec<&'a ParamStore>, trainable: bool) -> Self {
        Self {
            stores,
            trainable,
            bound: HashMap::new(),
        }
    }

    pub fn lookup(&self, name: &str) -> Option<&'a Tensor> {
        self.stores.iter().find_map(|s| s.get(name))
    }

    pub fn has(&self, name: &str) -> bool {
        self.lookup(name).is_some()
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let t = self
            .lookup(name)
            .ok_or_else(|| TplError::invalid(format!("missing parameter {name}")))?;
        let id = if self.trainable && t.requires_grad() {
            g.leaf(t)?
        } else {
            g.constant(t.shape(), t.values().to_vec())?
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Name → node for every parameter bound so far.
    pub fn bound(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Copies graph gradients into the matching tensors of `store`.
    pub fn write_grads(&self, g: &Graph, store: &mut ParamStore) -> Result<()> {
        for p in store.iter_mut() {
            match self.bound.get(&p.name).and_then(|&id| g.grad(id)) {
                Some(grad) => p.tensor.set_grad(grad.to_vec())?,
                None => p.tensor.clear_grad(),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_values() {
        let mut a = ParamStore::new();
        a.insert("w", Role::Gate, Tensor::full(&[2], 0.1)).unwrap();
        let b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        a.get_mut("w").unwrap().values_mut()[0] = 0.2;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert!(a.insert("w", Role::Gate, Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn binder_respects_trainable_flag() {
        let mut s = ParamStore::new();
        s.insert("a", Role::Gate, Tensor::full(&[1], 1.0).with_requires_grad(true)).unwrap();
        s.insert("b", Role::Backbone, Tensor::full(&[1], 1.0)).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::new(vec![&s], true);
        let a = binder.get(&mut g, "a").unwrap();
        let b = binder.get(&mut g, "b").unwrap();
        assert!(g.requires_grad(a));
        assert!(!g.requires_grad(b));
        let mut frozen = Binder::new(vec![&s], false);
        let a2 = frozen.get(&mut g, "a").unwrap();
        assert!(!g.requires_grad(a2));
    }
}
