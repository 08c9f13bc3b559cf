use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::networks::{Group, ParamStore};
use crate::{Error, Result};

/// Adam over one parameter group, with moments kept as plain tensors so they
/// can be checkpointed and restored exactly.
#[derive(Clone, Debug)]
pub struct Adam {
    group: Group,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    names: Vec<String>,
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

/// Exported optimizer state.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    /// `(parameter name, first moment, second moment)` in registry order.
    pub moments: Vec<(String, Tensor, Tensor)>,
}

impl Adam {
    pub const EPS: f64 = 1e-8;

    pub fn new(store: &ParamStore, group: Group, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let mut names = Vec::new();
        let mut vars = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in store.group(group) {
            names.push(p.name.clone());
            vars.push(p.var.clone());
            m.push(p.var.as_tensor().zeros_like()?);
            v.push(p.var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            group,
            lr,
            beta1,
            beta2,
            eps: Self::EPS,
            step: 0,
            names,
            vars,
            m,
            v,
        })
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient are treated as having a
    /// zero gradient.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..self.vars.len() {
            let var = &self.vars[i];
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => var.as_tensor().zeros_like()?,
            };
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let delta = ((&m / bc1)? / denom)?;
            let next = (var.as_tensor() - (delta * self.lr)?)?;
            var.set(&next)?;
            // Detached so the moments never hold on to an autograd graph.
            self.m[i] = m.detach();
            self.v[i] = v.detach();
        }
        Ok(())
    }

    pub fn moments_finite(&self) -> Result<bool> {
        for t in self.m.iter().chain(self.v.iter()) {
            let v: Vec<f32> = t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            step: self.step,
            moments: self
                .names
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .map(|(n, (m, v))| (n.clone(), m.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn restore(&mut self, state: &AdamState) -> Result<()> {
        if state.moments.len() != self.names.len() {
            return Err(Error::InvalidState(format!(
                "optimizer state has {} entries, expected {}",
                state.moments.len(),
                self.names.len()
            )));
        }
        for (i, (name, m, v)) in state.moments.iter().enumerate() {
            if name != &self.names[i] {
                return Err(Error::InvalidState(format!(
                    "optimizer state entry `{name}` does not match `{}`",
                    self.names[i]
                )));
            }
            if m.dims() != self.vars[i].dims() || v.dims() != self.vars[i].dims() {
                return Err(Error::InvalidState(format!("moment shape mismatch for `{name}`")));
            }
            self.m[i] = m.to_dtype(self.vars[i].dtype())?;
            self.v[i] = v.to_dtype(self.vars[i].dtype())?;
        }
        self.step = state.step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ParamBuilder;
    use crate::rng::RngStream;
    use candle_core::{DType, Device};

    fn quadratic_store() -> ParamStore {
        let mut store = ParamStore::default();
        let mut rng = RngStream::new(0, "t");
        let mut pb = ParamBuilder::new(&mut store, &mut rng, DType::F64, Device::Cpu);
        pb.scoped("w", Group::Generator, |pb| pb.constant("x", &[3], 1.0))
            .unwrap();
        store
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g).
        let store = quadratic_store();
        let var = store.get("w.x").unwrap().var.clone();
        let mut opt = Adam::new(&store, Group::Generator, 0.1, 0.9, 0.999).unwrap();
        let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v: Vec<f64> = var.as_tensor().to_vec1().unwrap();
        for x in v {
            assert!((x - 0.9).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn minimises_quadratic() {
        let store = quadratic_store();
        let var = store.get("w.x").unwrap().var.clone();
        let mut opt = Adam::new(&store, Group::Generator, 0.05, 0.9, 0.999).unwrap();
        for _ in 0..500 {
            let loss = (var.as_tensor() - 3.0).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let v: Vec<f64> = var.as_tensor().to_vec1().unwrap();
        for x in v {
            assert!((x - 3.0).abs() < 1e-2, "{x}");
        }
    }

    #[test]
    fn state_roundtrip_continues_identically() {
        let run = |restore_at: Option<usize>| {
            let store = quadratic_store();
            let var = store.get("w.x").unwrap().var.clone();
            let mut opt = Adam::new(&store, Group::Generator, 0.05, 0.5, 0.999).unwrap();
            for i in 0..10 {
                if Some(i) == restore_at {
                    let st = opt.state();
                    let mut fresh = Adam::new(&store, Group::Generator, 0.05, 0.5, 0.999).unwrap();
                    fresh.restore(&st).unwrap();
                    opt = fresh;
                }
                let loss = (var.as_tensor() * 2.0).unwrap().exp().unwrap().sum_all().unwrap();
                opt.step(&loss.backward().unwrap()).unwrap();
            }
            var.as_tensor().to_vec1::<f64>().unwrap()
        };
        assert_eq!(run(None), run(Some(4)));
    }

    #[test]
    fn other_group_is_untouched() {
        let store = quadratic_store();
        let var = store.get("w.x").unwrap().var.clone();
        let mut opt = Adam::new(&store, Group::Discriminator, 0.1, 0.9, 0.999).unwrap();
        let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        assert_eq!(var.as_tensor().to_vec1::<f64>().unwrap(), vec![1.0; 3]);
    }
}
