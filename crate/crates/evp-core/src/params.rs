//! Named parameter storage, graph binding, and checkpoint i/o.
//!
//! Model code registers tensors under dotted names ("imafr.step2.fuse.weight")
//! and keeps `ParamId` handles. Each training step binds the whole store
//! into a fresh graph as leaves; the optimizer then writes updated values
//! back through the store. Checkpoints are a directory of one EVPT file
//! per parameter plus a TSV manifest fixing the order.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::evpt;
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

pub struct ParamStore<T: Element> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Register a tensor under a unique dotted name.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Create one differentiable leaf per parameter, in registration
    /// order, on a fresh graph.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Binding> {
        let vars = self.tensors.iter().map(|t| g.leaf(t.clone())).collect::<Result<_>>()?;
        Ok(Binding { vars })
    }

    /// Write every parameter as `<name>.evpt` plus a `params.tsv`
    /// manifest (registration order) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (name, tensor) in self.names.iter().zip(&self.tensors) {
            let file = format!("{name}.evpt");
            evpt::write_file(dir.join(&file), tensor)?;
            manifest.push_str(name);
            manifest.push('\t');
            manifest.push_str(&file);
            manifest.push('\n');
        }
        let mpath = dir.join("params.tsv");
        std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
    }

    /// Replace the values of an already-built store from a checkpoint
    /// directory. The name sets must match exactly and every shape must
    /// agree, so a checkpoint can only restore the configuration that
    /// produced it.
    pub fn load_values(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mpath = dir.join("params.tsv");
        let manifest = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut seen = vec![false; self.tensors.len()];
        for (lineno, line) in manifest.lines().enumerate() {
            let (name, file) = line.split_once('\t').ok_or_else(|| Error::Manifest {
                line: lineno + 1,
                msg: "expected `name<TAB>file`".into(),
            })?;
            let &at = self.index.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint holds unknown parameter `{name}`"))
            })?;
            let tensor: Tensor<T> = evpt::read_file(dir.join(file))?;
            if tensor.shape() != self.tensors[at].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint, model wants {:?}",
                    tensor.shape(),
                    self.tensors[at].shape()
                )));
            }
            self.tensors[at] = tensor;
            seen[at] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing parameter `{}`",
                self.names[missing]
            )));
        }
        Ok(())
    }
}

/// The graph leaves of one [`ParamStore::bind`] call.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Adopt pre-made leaves in store registration order. Gradient
    /// checkers use this to substitute their own probed leaves for the
    /// stored parameters.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Normal init scaled for fan-in: std = sqrt(2 / fan_in).
pub fn init_fan_in<T: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let t: Tensor<f64> = Tensor::randn(shape, rng);
    Tensor::from_fn(shape, |i| T::from_f64(t.data()[i] * std))
}
