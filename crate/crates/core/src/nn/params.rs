//! Named, seeded parameters grouped by learning-rate group.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Image encoder and detection heads.
    Image,
    Text,
    Caption,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    /// Uniform in `±bound`.
    Uniform(f64),
    Normal(f64),
}

impl Init {
    /// Kaiming-uniform bound for a layer with `fan_in` inputs feeding a ReLU.
    pub fn kaiming(fan_in: usize) -> Self {
        Init::Uniform((6.0 / fan_in as f64).sqrt())
    }

    /// Uniform `±1/sqrt(fan_in)`.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub group: Group,
}

/// Every trainable tensor of a model, keyed by a dotted path.
///
/// Creation order is fixed by the model constructors, so a given seed always
/// yields the same weights.
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            params: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(&mut self, name: &str, shape: &[usize], init: Init, group: Group) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("parameter {name} created twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    // Box–Muller
                    let u1: f64 = self.rng.random::<f64>().max(f64::MIN_POSITIVE);
                    let u2: f64 = self.rng.random();
                    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.insert(
            name.to_string(),
            Param {
                var: var.clone(),
                group,
            },
        );
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.var.elem_count()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), p.var.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrite every parameter from a safetensors file; names and shapes must match exactly.
    pub fn load(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        if loaded.len() != self.params.len() {
            return Err(Error::ArchMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                loaded.len(),
                self.params.len()
            )));
        }
        for (name, p) in &self.params {
            let t = loaded
                .get(name)
                .ok_or_else(|| Error::ArchMismatch(format!("checkpoint lacks {name}")))?;
            if t.dims() != p.var.dims() {
                return Err(Error::ArchMismatch(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// `(name, shape)` list, the basis of the architecture hash.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.var.dims().to_vec()))
            .collect()
    }
}
