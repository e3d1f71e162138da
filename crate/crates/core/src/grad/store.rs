use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GradError, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Trainable parameters with their accumulated gradients, plus named
/// non-trainable buffers (batch-norm running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<(String, Tensor)>,
    bound: HashMap<(u64, ParamId), usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push((name.into(), value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    /// Mutable value together with its gradient, for optimiser updates.
    pub fn value_and_grad(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        let p = &mut self.params[id.0];
        (&mut p.value, &p.grad)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Leaf for parameter `id` on `tape`. Repeated calls with the same tape
    /// return the same node so that gradients from every use accumulate.
    pub fn bind<'t>(&mut self, tape: &'t Tape, id: ParamId) -> Var<'t> {
        let key = (tape.uid(), id);
        if let Some(&node) = self.bound.get(&key) {
            return tape.handle(node);
        }
        let v = tape.leaf(self.params[id.0].value.clone(), true);
        self.bound.insert(key, v.id());
        v
    }

    /// Add the gradients that `tape` holds for bound parameters into the
    /// store, then forget the bindings.
    pub fn collect_grads(&mut self, tape: &Tape) {
        let tape_key = tape.uid();
        let mut bindings: Vec<((u64, ParamId), usize)> = self.bound.iter().map(|(k, v)| (*k, *v)).collect();
        bindings.sort_by_key(|((_, p), _)| p.0);
        for ((t, pid), node) in bindings {
            if t != tape_key {
                continue;
            }
            if let Some(g) = tape.grad(tape.handle(node)) {
                self.params[pid.0].grad.add_assign(&g);
            }
        }
        self.release(tape);
    }

    /// Drop bindings to `tape` without collecting gradients.
    pub fn release(&mut self, tape: &Tape) {
        let tape_key = tape.uid();
        self.bound.retain(|(t, _), _| *t != tape_key);
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::default();
        for p in &self.params {
            c.push(format!("param.{}", p.name), p.value.clone());
        }
        for (name, b) in &self.buffers {
            c.push(format!("buffer.{name}"), b.clone());
        }
        c
    }

    /// Load values by name. Every parameter and buffer must be present
    /// with a matching shape.
    pub fn load_container(&mut self, c: &TensorContainer) -> Result<(), GradError> {
        for p in &mut self.params {
            let key = format!("param.{}", p.name);
            p.value = take_matching(c, &key, p.value.shape())?;
        }
        for (name, b) in &mut self.buffers {
            let key = format!("buffer.{name}");
            *b = take_matching(c, &key, b.shape())?;
        }
        Ok(())
    }
}

fn take_matching(c: &TensorContainer, key: &str, shape: &[usize]) -> Result<Tensor, GradError> {
    let t = c.get(key).ok_or_else(|| GradError::Container(format!("missing tensor {key}")))?;
    if t.shape() != shape {
        return Err(GradError::Container(format!("{key}: stored shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t.clone())
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Index {
    format: String,
    version: u32,
    tensors: Vec<IndexEntry>,
}

const FORMAT: &str = "spikesal-tensors";

/// Ordered name to tensor map stored as a JSON index next to a flat
/// little-endian `f64` payload.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<(String, Tensor)>,
}

impl TensorContainer {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes `<stem>.json` and `<stem>.bin` inside `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), GradError> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            tensors.push(IndexEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                len: (t.len() * 8) as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let index = Index { format: FORMAT.into(), version: 1, tensors };
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&index)?)?;
        fs::write(dir.join(format!("{stem}.bin")), payload)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, GradError> {
        let index: Index = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
        if index.format != FORMAT || index.version != 1 {
            return Err(GradError::Container(format!("unsupported format {} v{}", index.format, index.version)));
        }
        let payload = fs::read(dir.join(format!("{stem}.bin")))?;
        let mut entries = Vec::with_capacity(index.tensors.len());
        for e in index.tensors {
            let end = e.offset.checked_add(e.len).filter(|&end| end as usize <= payload.len());
            let Some(end) = end else {
                return Err(GradError::Container(format!("{}: payload truncated", e.name)));
            };
            let bytes = &payload[e.offset as usize..end as usize];
            if bytes.len() % 8 != 0 {
                return Err(GradError::Container(format!("{}: length not a multiple of 8", e.name)));
            }
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push((e.name, Tensor::new(&e.shape, data)?));
        }
        Ok(Self { entries })
    }
}
