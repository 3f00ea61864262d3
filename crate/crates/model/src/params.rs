//! Named parameter storage with seeded initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ModelError;

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Glorot uniform over the last two dimensions.
    Glorot,
}

/// Whether weight decay applies to a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decay {
    Yes,
    No,
}

#[derive(Debug)]
struct Entry {
    var: Var,
    decay: Decay,
}

/// Every learnable tensor of a model, keyed by a dotted path name.
#[derive(Debug)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates a parameter; values are drawn from the store's generator in
    /// creation order, so the same construction sequence yields the same model.
    pub fn create(&mut self, name: &str, shape: &[usize], init: Init, decay: Decay) -> Result<Tensor, ModelError> {
        assert!(!self.entries.contains_key(name), "parameter {name} created twice");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.gen_range(-b..=b)).collect(),
            Init::Glorot => {
                let fan_out = *shape.last().unwrap_or(&1);
                let fan_in = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
                let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-b..=b)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.entries.insert(name.to_string(), Entry { var, decay });
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.entries
            .get(name)
            .map(|e| e.var.as_tensor())
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    /// Overwrites a parameter's values in place, keeping its identity.
    pub fn set(&self, name: &str, values: &Tensor) -> Result<(), ModelError> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        if e.var.shape() != values.shape() {
            return Err(ModelError::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                e.var.shape(),
                values.shape()
            )));
        }
        e.var.set(&values.to_dtype(DType::F64)?)?;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.var.elem_count()).sum()
    }

    /// Variables split by weight-decay group, in name order.
    pub fn vars_by_decay(&self, prefix_filter: impl Fn(&str) -> bool) -> (Vec<Var>, Vec<Var>) {
        let mut decay = Vec::new();
        let mut plain = Vec::new();
        for (name, e) in &self.entries {
            if !prefix_filter(name) {
                continue;
            }
            match e.decay {
                Decay::Yes => decay.push(e.var.clone()),
                Decay::No => plain.push(e.var.clone()),
            }
        }
        (decay, plain)
    }

    /// Flat values of one parameter.
    pub fn values(&self, name: &str) -> Result<Vec<f64>, ModelError> {
        Ok(self.get(name)?.flatten_all()?.to_vec1::<f64>()?)
    }

    pub fn shape(&self, name: &str) -> Result<Vec<usize>, ModelError> {
        Ok(self.get(name)?.dims().to_vec())
    }

    pub fn decay_of(&self, name: &str) -> Option<Decay> {
        self.entries.get(name).map(|e| e.decay)
    }

    /// Name-ordered snapshot of every parameter's flat values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>, ModelError> {
        self.entries.keys().map(|n| Ok((n.clone(), self.values(n)?))).collect()
    }
}
