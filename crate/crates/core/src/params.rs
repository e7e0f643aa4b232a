//! Named trainable parameters and the checkpoint container.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// One trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered registry of all parameters of a model. Iteration order is
/// registration order, which fixes the optimizer update order and the
/// checkpoint layout.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
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

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"UFOC")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let bytes = p.name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            p.value.write_to(&mut w)?;
        }
        Ok(())
    }

    /// Load checkpoint values into an already-built store. Every stored
    /// name must exist with a matching shape.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"UFOC" {
            return Err(Error::Data(format!("bad checkpoint magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != 1 {
            return Err(Error::Data(format!("unsupported checkpoint v{version}")));
        }
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let len = u32::from_le_bytes(b4) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Data(format!("bad parameter name: {e}")))?;
            let value = Tensor::read_from(&mut r)?;
            let id = self
                .lookup(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint has unknown parameter {name}")))?;
            if self.value(id).shape() != value.shape() {
                return Err(Error::Data(format!(
                    "checkpoint shape {:?} for {name} does not match model shape {:?}",
                    value.shape(),
                    self.value(id).shape()
                )));
            }
            self.params[id.0].value = value;
        }
        Ok(())
    }
}

/// Standard normal via Box-Muller, driven by the deterministic stream rng.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fan-in scaled init for conv and linear weights.
pub fn he_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| normal(rng) * std)
}

pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| normal(rng) * std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dir = std::env::temp_dir().join("ufo_param_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.ufoc");

        let mut store = ParamStore::new();
        let a = store.register("backbone.stage0.block0.w", normal_init(&mut rng, &[3, 3], 1.0));
        let b = store.register("decoder.query_content", normal_init(&mut rng, &[4, 2], 1.0));
        let va = store.value(a).clone();
        let vb = store.value(b).clone();
        store.save(&path).unwrap();

        let mut store2 = ParamStore::new();
        store2.register("backbone.stage0.block0.w", Tensor::zeros(&[3, 3]));
        store2.register("decoder.query_content", Tensor::zeros(&[4, 2]));
        store2.load(&path).unwrap();
        assert_eq!(store2.value(ParamId(0)), &va);
        assert_eq!(store2.value(ParamId(1)), &vb);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dir = std::env::temp_dir().join("ufo_param_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.ufoc");
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(&[2, 2]));
        store.save(&path).unwrap();
        let mut other = ParamStore::new();
        other.register("w", Tensor::zeros(&[3]));
        assert!(other.load(&path).is_err());
        std::fs::remove_file(path).ok();
    }
}
