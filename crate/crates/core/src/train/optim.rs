//! AdamW with decoupled weight decay and serializable moments.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Group, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupLrs {
    pub image: f64,
    pub text: f64,
    pub caption: f64,
}

impl GroupLrs {
    pub fn uniform(lr: f64) -> Self {
        Self {
            image: lr,
            text: lr,
            caption: lr,
        }
    }

    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Image => self.image,
            Group::Text => self.text,
            Group::Caption => self.caption,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Parameters that receive no gradient in a step are left untouched, moments included.
/// Weight decay applies to parameters of rank ≥ 2 only.
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct OptimMeta {
    config: AdamWConfig,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lrs: GroupLrs) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter() {
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let lr = lrs.get(p.group);
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let g = g.detach();
            let m = ((m * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            let v = ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let denom = ((&v / bc2)?.sqrt()? + eps)?;
            let mut update = ((&m / bc1)? / denom)?;
            let w = &p.var.as_tensor().detach();
            if weight_decay > 0.0 && w.rank() >= 2 {
                update = (update + (w * weight_decay)?)?;
            }
            p.var.set(&(w - (update * lr)?)?)?;
            self.moments.insert(name.to_string(), (m, v));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut map = HashMap::new();
        for (name, (m, v)) in &self.moments {
            map.insert(format!("m.{name}"), m.clone());
            map.insert(format!("v.{name}"), v.clone());
        }
        candle_core::safetensors::save(&map, dir.join("optimizer.safetensors"))?;
        let meta = OptimMeta {
            config: self.cfg,
            step: self.step,
        };
        std::fs::write(dir.join("optimizer.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path, params: &ParamStore) -> Result<Self> {
        let meta: OptimMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("optimizer.json"))?)?;
        let mut tensors = candle_core::safetensors::load(dir.join("optimizer.safetensors"), &Device::Cpu)?;
        let mut moments = BTreeMap::new();
        for (name, p) in params.iter() {
            match (tensors.remove(&format!("m.{name}")), tensors.remove(&format!("v.{name}"))) {
                (Some(m), Some(v)) => {
                    if m.dims() != p.var.dims() {
                        return Err(Error::ArchMismatch(format!("optimizer state for {name} has shape {:?}", m.dims())));
                    }
                    moments.insert(name.to_string(), (m.to_dtype(params.dtype())?, v.to_dtype(params.dtype())?));
                }
                (None, None) => {}
                _ => return Err(Error::ArchMismatch(format!("optimizer state for {name} is incomplete"))),
            }
        }
        if !tensors.is_empty() {
            return Err(Error::ArchMismatch("optimizer state names parameters the model lacks".into()));
        }
        Ok(Self {
            cfg: meta.config,
            step: meta.step,
            moments,
        })
    }
}
