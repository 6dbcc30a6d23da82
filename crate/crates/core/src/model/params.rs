use std::collections::HashMap;

use numcore::{Checkpoint, SeededRng, Tensor, Var};

use crate::error::{Error, Result};

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn write_to(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            ckpt.push_f32(format!("{prefix}/{n}"), t);
        }
    }

    /// Replaces every tensor by the checkpoint's array of the same name and
    /// shape.
    pub fn read_from(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}/{n}");
            let a = ckpt
                .get(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
            let loaded = a.to_tensor_f32()?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{key}: shape {:?} in checkpoint, model expects {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(())
    }
}

/// Resolves parameter names to the tape variables bound to them.
#[derive(Clone, Copy)]
pub struct Bound<'a> {
    pub store: &'a ParamStore,
    pub vars: &'a [Var],
}

impl Bound<'_> {
    pub fn v(&self, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }
}

/// Parameter initializer drawing from one seeded stream.
pub struct Init {
    pub rng: SeededRng,
}

impl Init {
    pub fn normal(&mut self, shape: &[usize], std: f32) -> Tensor<f32> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| rng.normal_f32() * std)
    }

    pub fn linear(&mut self, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) {
        let w = self.normal(&[fan_in, fan_out], 1.0 / (fan_in as f32).sqrt());
        store.add(format!("{name}.w"), w);
        store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
    }

    pub fn zero_linear(&mut self, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) {
        store.add(format!("{name}.w"), Tensor::zeros(vec![fan_in, fan_out]));
        store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
    }

    pub fn mlp(&mut self, store: &mut ParamStore, name: &str, dims: [usize; 3]) {
        self.linear(store, &format!("{name}.0"), dims[0], dims[1]);
        self.linear(store, &format!("{name}.1"), dims[1], dims[2]);
    }

    pub fn attention(&mut self, store: &mut ParamStore, name: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(store, &format!("{name}.{p}"), d, d);
        }
    }
}
