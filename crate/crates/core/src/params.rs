//! Named parameter storage shared by all network modules.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{kaiming_uniform, Tape, Tensor, Var};

/// Ordered name → tensor map. Insertion order is the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        let mut store = Self::new();
        for (name, t) in entries {
            store.insert(name, t);
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Registers `name` on the tape.
    pub fn var<'t>(&self, tape: &'t Tape<T>, name: &str) -> Result<Var<'t, T>> {
        Ok(tape.param(name, self.get(name)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore::from_entries(self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect())
    }

    /// `weight [c_out, c_in, k, k]` (Kaiming) plus zero `bias [c_out]`.
    pub fn add_conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) {
        self.insert(format!("{prefix}.weight"), kaiming_uniform([c_out, c_in, k, k], c_in * k * k, rng));
        self.insert(format!("{prefix}.bias"), Tensor::zeros([c_out]));
    }

    /// `weight [d_in, d_out]` (Kaiming) plus zero `bias [d_out]`.
    pub fn add_linear(&mut self, prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) {
        self.insert(format!("{prefix}.weight"), kaiming_uniform([d_in, d_out], d_in, rng));
        self.insert(format!("{prefix}.bias"), Tensor::zeros([d_out]));
    }

    pub fn conv<'t>(&self, tape: &'t Tape<T>, prefix: &str, x: &Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let w = self.var(tape, &format!("{prefix}.weight"))?;
        let b = self.var(tape, &format!("{prefix}.bias"))?;
        x.conv2d(&w, Some(&b), stride, pad)
    }

    pub fn linear<'t>(&self, tape: &'t Tape<T>, prefix: &str, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let w = self.var(tape, &format!("{prefix}.weight"))?;
        let b = self.var(tape, &format!("{prefix}.bias"))?;
        x.linear(&w, &b)
    }
}

/// Weight decay applies to `*.weight` tensors only.
pub fn is_decayed(name: &str) -> bool {
    name.ends_with(".weight")
}
