use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::{Error, Result};

/// Which optimizer owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// Encoders and generators.
    Generator,
    /// Domain, low-resolution and content discriminators.
    Discriminator,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub var: Var,
}

/// Flat, ordered registry of every trainable tensor.
///
/// A tied block is registered once; every network holding it keeps a clone of
/// the same `Var`, so an update through one is seen by all.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn group(&self, group: Group) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.group == group)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    fn insert(&mut self, name: String, group: Group, var: Var) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::InvalidState(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, group, var });
        Ok(())
    }

    /// Deep copy of every parameter value, in registry order.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        self.params
            .iter()
            .map(|p| Ok(p.var.as_tensor().copy()?))
            .collect()
    }

    pub fn restore(&self, snap: &[Tensor]) -> Result<()> {
        if snap.len() != self.params.len() {
            return Err(Error::InvalidState("snapshot size mismatch".into()));
        }
        for (p, t) in self.params.iter().zip(snap) {
            p.var.set(t)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for p in &self.params {
            let v: Vec<f64> = p
                .var
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Creates and registers parameters under a dotted name prefix.
pub(crate) struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut RngStream,
    pub dtype: DType,
    pub device: Device,
    prefix: String,
    group: Group,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(
        store: &'a mut ParamStore,
        rng: &'a mut RngStream,
        dtype: DType,
        device: Device,
    ) -> Self {
        Self {
            store,
            rng,
            dtype,
            device,
            prefix: String::new(),
            group: Group::Generator,
        }
    }

    /// Runs `f` with `name` appended to the prefix and `group` selected.
    pub fn scoped<T>(
        &mut self,
        name: &str,
        group: Group,
        f: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T> {
        let old_prefix = self.prefix.clone();
        let old_group = self.group;
        self.prefix = self.join(name);
        self.group = group;
        let out = f(self);
        self.prefix = old_prefix;
        self.group = old_group;
        out
    }

    pub fn sub<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let g = self.group;
        self.scoped(name, g, f)
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn register(&mut self, name: &str, t: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let full = self.join(name);
        self.store.insert(full, self.group, var.clone())?;
        Ok(var)
    }

    /// He-normal initialised tensor with the given fan-in.
    pub fn normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        let n: usize = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt() as f32;
        let data: Vec<f32> = self.rng.normals_f32(n).into_iter().map(|v| v * std).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.register(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F32, &self.device)? * value)?;
        self.register(name, t)
    }
}
