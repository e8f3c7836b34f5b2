use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{parameter_layout, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, LeafKind, NodeId, Tensor};

/// Independently freezable parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Encoder,
    Projection,
    AuxFeaturizer,
    Classifier,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Encoder, Group::Projection, Group::AuxFeaturizer, Group::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Projection => "projection",
            Group::AuxFeaturizer => "aux_featurizer",
            Group::Classifier => "classifier",
        }
    }

    pub fn from_name(name: &str) -> Result<Group> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter group `{name}`")))
    }

    /// Group of a parameter, from its `<group>/` prefix.
    pub fn of_param(name: &str) -> Option<Group> {
        let prefix = name.split_once('/')?.0;
        Group::from_name(prefix).ok()
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named parameter tensors plus the set of frozen groups.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<Group>,
}

impl ModelParams {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in parameter_layout(cfg) {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let (fan_in, fan_out) = match shape.as_slice() {
                    [i, o] => (*i, *o),
                    [co, ci, kh, kw] => (ci * kh * kw, co * kh * kw),
                    other => unreachable!("unexpected parameter shape {other:?}"),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
                Tensor::new(shape, data)?
            };
            tensors.insert(name, t);
        }
        Ok(ModelParams {
            tensors,
            frozen: BTreeSet::new(),
        })
    }

    /// Wraps existing tensors. Every name must carry a known group prefix.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        if let Some(bad) = tensors.keys().find(|n| Group::of_param(n).is_none()) {
            return Err(Error::Format(format!("parameter `{bad}` has no known group prefix")));
        }
        Ok(ModelParams {
            tensors,
            frozen: BTreeSet::new(),
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Replaces an existing tensor with one of the same shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("no parameter named `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "`{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_in(&self, group: Group) -> impl Iterator<Item = &str> {
        self.tensors
            .keys()
            .filter(move |n| Group::of_param(n) == Some(group))
            .map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Freezes a group by name. Freezing twice is a no-op.
    pub fn freeze(&mut self, group: &str) -> Result<()> {
        self.freeze_group(Group::from_name(group)?);
        Ok(())
    }

    pub fn freeze_group(&mut self, group: Group) {
        self.frozen.insert(group);
    }

    pub fn unfreeze_group(&mut self, group: Group) {
        self.frozen.remove(&group);
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen.contains(&group)
    }

    /// Little-endian bytes of every value in a group, in name order.
    pub fn group_bytes(&self, group: Group) -> Vec<u8> {
        self.names_in(group)
            .flat_map(|n| self.tensors[n].to_le_bytes())
            .collect()
    }

    /// Attaches the tensors of `groups` to a graph. With `trainable`
    /// false every tensor is a constant; otherwise frozen groups become
    /// frozen leaves and the rest become parameters.
    pub fn bind(&self, g: &mut Graph, groups: &[Group], trainable: bool) -> Bound {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.tensors {
            let Some(group) = Group::of_param(name) else { continue };
            if !groups.contains(&group) {
                continue;
            }
            let kind = match (trainable, self.is_frozen(group)) {
                (false, _) => LeafKind::Constant,
                (true, true) => LeafKind::Frozen,
                (true, false) => LeafKind::Param,
            };
            ids.insert(name.clone(), g.leaf(t.clone(), kind));
        }
        Bound { ids }
    }
}

/// Parameter names mapped to the graph nodes holding them.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    /// Builds a binding from nodes the caller already created.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        Bound {
            ids: pairs.into_iter().collect(),
        }
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("parameter `{name}` is not bound to this graph")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
