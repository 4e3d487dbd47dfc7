use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Initialization scheme for a freshly created parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    /// Normal distribution truncated at two standard deviations.
    TruncNormal { std: f64 },
    /// He-style normal with `std = sqrt(2 / fan_out)`, where fan_out is
    /// `out_channels * kernel_h * kernel_w` (or the output width of a linear map).
    FanOutNormal,
}

/// Stable 64-bit digest of a string, independent of the Rust version.
pub fn stable_hash(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

/// Seed for an independent random stream identified by `(seed, label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    stable_hash(&format!("{seed}/{label}"))
}

struct Entry {
    var: Var,
    trainable: bool,
}

/// Named parameter collection with deterministic, order-independent
/// initialization: the initial value of a parameter depends only on the
/// store seed and its name.
#[derive(Clone)]
pub struct ParamStore {
    entries: Arc<Mutex<BTreeMap<String, Entry>>>,
    seed: u64,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.entries.lock().expect("param store poisoned").len();
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("entries", &n)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self {
            entries: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
            device: device.clone(),
        }
    }

    pub fn root(&self) -> ParamPath {
        ParamPath {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn get_or_create(
        &self,
        name: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
    ) -> Result<Var> {
        let mut entries = self.entries.lock().expect("param store poisoned");
        if let Some(entry) = entries.get(name) {
            let found = entry.var.dims().to_vec();
            if found != shape {
                return Err(Error::ParamShape {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found,
                });
            }
            return Ok(entry.var.clone());
        }
        let values = init_values(derive_seed(self.seed, name), shape, init);
        let tensor = Tensor::from_vec(values, shape, &self.device)?;
        let var = Var::from_tensor(&tensor)?;
        entries.insert(
            name.to_string(),
            Entry {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let entries = self.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    /// Trainable parameters whose name starts with `prefix`.
    pub fn trainable_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.trainable()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect()
    }

    /// Every stored tensor (parameters and running statistics), by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let entries = self.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .map(|(k, e)| (k.clone(), e.var.as_tensor().copy().expect("cpu copy")))
            .collect()
    }

    pub fn tensors_with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        let entries = self.entries.lock().expect("param store poisoned");
        entries.keys().cloned().collect()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrite stored values with `tensors`. Names unknown to the store are
    /// ignored; a shape disagreement is an error naming the parameter.
    /// Returns how many tensors were applied.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<usize> {
        let entries = self.entries.lock().expect("param store poisoned");
        let mut applied = 0;
        for (name, value) in tensors {
            let Some(entry) = entries.get(name) else {
                continue;
            };
            if entry.var.dims() != value.dims() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: entry.var.dims().to_vec(),
                    found: value.dims().to_vec(),
                });
            }
            entry
                .var
                .set(&value.to_dtype(entry.var.dtype())?.to_device(&self.device)?)?;
            applied += 1;
        }
        Ok(applied)
    }
}

fn init_values(seed: u64, shape: &[usize], init: Init) -> Vec<f32> {
    let n: usize = shape.iter().product();
    match init {
        Init::Const(c) => vec![c as f32; n],
        Init::TruncNormal { std } => truncated_normal(seed, n, std),
        Init::FanOutNormal => {
            let fan_out = match shape {
                [out, _, kh, kw] => out * kh * kw,
                [out, _] => *out,
                _ => n,
            };
            truncated_normal(seed, n, (2.0 / fan_out.max(1) as f64).sqrt())
        }
    }
}

fn truncated_normal(seed: u64, n: usize, std: f64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(&mut rng);
            if z.abs() <= 2.0 {
                break (z * std) as f32;
            }
        })
        .collect()
}

/// Hierarchical name scope inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamPath {
    store: ParamStore,
    prefix: String,
}

impl ParamPath {
    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Trainable parameter.
    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        Ok(self
            .store
            .get_or_create(&self.full(name), shape, init, true)?
            .as_tensor()
            .clone())
    }

    /// Non-trainable state such as running statistics.
    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.get_or_create(&self.full(name), shape, init, false)
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        DType::F32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() -> Result<()> {
        let a = ParamStore::new(7, &Device::Cpu);
        let b = ParamStore::new(7, &Device::Cpu);
        // different creation order
        let a1 = a.root().param("x.w", &[4, 3], Init::TruncNormal { std: 0.02 })?;
        let _ = a.root().param("y.w", &[2], Init::TruncNormal { std: 0.02 })?;
        let _ = b.root().param("y.w", &[2], Init::TruncNormal { std: 0.02 })?;
        let b1 = b.root().param("x.w", &[4, 3], Init::TruncNormal { std: 0.02 })?;
        assert_eq!(a1.to_vec2::<f32>()?, b1.to_vec2::<f32>()?);
        Ok(())
    }

    #[test]
    fn truncated_normal_stays_within_two_std() {
        let v = truncated_normal(3, 10_000, 0.5);
        assert!(v.iter().all(|x| x.abs() <= 1.0 + 1e-6));
    }

    #[test]
    fn load_rejects_wrong_shape_by_name() -> Result<()> {
        let s = ParamStore::new(0, &Device::Cpu);
        s.root().pp("enc").param("weight", &[2, 2], Init::Const(0.0))?;
        let mut m = BTreeMap::new();
        m.insert(
            "enc.weight".to_string(),
            Tensor::zeros((3, 2), DType::F32, &Device::Cpu)?,
        );
        match s.load(&m) {
            Err(Error::ParamShape { name, .. }) => assert_eq!(name, "enc.weight"),
            other => panic!("expected shape error, got {other:?}"),
        }
        Ok(())
    }

    #[test]
    fn buffers_are_not_trainable() -> Result<()> {
        let s = ParamStore::new(0, &Device::Cpu);
        s.root().param("w", &[3], Init::Const(1.0))?;
        s.root().buffer("running_mean", &[3], Init::Const(0.0))?;
        assert_eq!(s.trainable().len(), 1);
        assert_eq!(s.tensors().len(), 2);
        Ok(())
    }
}
