//! Named parameter and buffer storage shared by the model, the optimizer
//! and checkpoint I/O.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};

/// Which half of the detector a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    /// Global encoder, global decoder, global head and side outputs.
    Global,
    /// Local encoder/decoder, fusion module, local head and side outputs.
    Local,
}

impl Stage {
    pub(crate) fn index(self) -> usize {
        match self {
            Stage::Global => 0,
            Stage::Local => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub stage: Stage,
    pub frozen: bool,
}

/// Non-trainable state (batch-norm running moments).
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
    pub stage: Stage,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    names: HashMap<String, Entry>,
}

#[derive(Clone, Copy, Debug)]
enum Entry {
    Param(usize),
    Buffer(usize),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn claim(&mut self, name: &str, entry: Entry) -> Result<()> {
        if self.names.insert(name.to_string(), entry).is_some() {
            return Err(Error::Config(format!("duplicate tensor name {name}")));
        }
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, value: Tensor, stage: Stage) -> Result<ParamId> {
        self.claim(name, Entry::Param(self.params.len()))?;
        let n = value.numel();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            stage,
            frozen: false,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor, stage: Stage) -> Result<BufferId> {
        self.claim(name, Entry::Buffer(self.buffers.len()))?;
        self.buffers.push(Buffer {
            name: name.to_string(),
            value,
            stage,
        });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Entry::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn set_frozen(&mut self, stage: Stage, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.stage == stage) {
            p.frozen = frozen;
        }
    }

    /// Every parameter and buffer keyed by name, in sorted order.
    pub fn named_tensors(&self) -> BTreeMap<&str, &Tensor> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers.iter().map(|b| (b.name.as_str(), &b.value)))
            .collect()
    }

    /// Replaces the value of a parameter or buffer, keeping its shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = match self.names.get(name) {
            Some(Entry::Param(i)) => &mut self.params[*i].value,
            Some(Entry::Buffer(i)) => &mut self.buffers[*i].value,
            None => return Err(Error::Input(format!("unknown tensor {name}"))),
        };
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_tensor", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// SHA-256 over names and exact bit patterns of one stage's tensors.
    pub fn stage_digest(&self, stage: Stage) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut entries: Vec<(&str, &Tensor)> = self
            .params
            .iter()
            .filter(|p| p.stage == stage)
            .map(|p| (p.name.as_str(), &p.value))
            .chain(
                self.buffers
                    .iter()
                    .filter(|b| b.stage == stage)
                    .map(|b| (b.name.as_str(), &b.value)),
            )
            .collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        for (name, t) in entries {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add_param("a", Tensor::zeros(&[2]), Stage::Global).unwrap();
        assert!(s.add_buffer("a", Tensor::zeros(&[2]), Stage::Global).is_err());
    }

    #[test]
    fn stage_digest_tracks_bits() {
        let mut s = ParamStore::new();
        let a = s.add_param("a", Tensor::zeros(&[2]), Stage::Global).unwrap();
        s.add_param("b", Tensor::zeros(&[2]), Stage::Local).unwrap();
        let g0 = s.stage_digest(Stage::Global);
        let l0 = s.stage_digest(Stage::Local);
        s.param_mut(a).value.data_mut()[0] = -0.0;
        assert_ne!(s.stage_digest(Stage::Global), g0);
        assert_eq!(s.stage_digest(Stage::Local), l0);
    }
}
