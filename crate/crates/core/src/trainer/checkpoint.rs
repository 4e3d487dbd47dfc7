//! Single-file checkpoints in safetensors format. Tensors are the model
//! parameters under their own names plus optimizer moments under
//! `optim.m.<name>` and `optim.v.<name>`; the JSON header metadata holds the
//! epoch counters and the model configuration.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};

use super::adam::Adam;
use crate::error::{Error, Result};
use crate::fusion::{DepthModel, ModelConfig};

const FORMAT: &str = "uqdepth-checkpoint-1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Adam,
    /// Epochs completed in the phase that wrote the checkpoint.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub model_config: ModelConfig,
    pub config_digest: String,
}

impl Checkpoint {
    pub fn capture(model: &DepthModel, optimizer: &Adam, epoch: usize) -> Self {
        Self {
            params: model.store().tensors(),
            optimizer: optimizer.clone(),
            epoch,
            step: optimizer.t,
            model_config: model.config().clone(),
            config_digest: model.config().digest(),
        }
    }

    /// Whether the stored digest matches `config`; logs a warning if not.
    pub fn check_digest(&self, config: &ModelConfig) -> bool {
        let ok = self.config_digest == config.digest();
        if !ok {
            log::warn!(
                "checkpoint config digest {} differs from model config {}",
                self.config_digest,
                config.digest()
            );
        }
        ok
    }

    /// Copy matching parameters into `model`. Parameters the model does not
    /// have are ignored; a shape mismatch names the offending parameter.
    pub fn apply(&self, model: &DepthModel) -> Result<usize> {
        self.check_digest(model.config());
        model.store().load(&self.params)
    }

    /// Write to `path` via a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (k, v) in &self.optimizer.m {
            tensors.push((format!("optim.m.{k}"), v.clone()));
        }
        for (k, v) in &self.optimizer.v {
            tensors.push((format!("optim.v.{k}"), v.clone()));
        }
        let metadata: HashMap<String, String> = [
            ("format", FORMAT.to_string()),
            ("epoch", self.epoch.to_string()),
            ("step", self.step.to_string()),
            ("adam_t", self.optimizer.t.to_string()),
            ("config_digest", self.config_digest.clone()),
            ("model_config", serde_json::to_string(&self.model_config)?),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let bytes = safetensors::serialize(tensors, Some(metadata))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;

        let file_name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into());
        let tmp = path.with_file_name(format!(".{file_name}.tmp"));
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let (_, header) =
            safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| corrupt("missing metadata".into()))?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| corrupt(format!("missing metadata key `{k}`")))
        };
        if field("format")? != FORMAT {
            return Err(corrupt(format!("unsupported format `{}`", field("format")?)));
        }
        let number = |k: &str| -> Result<u64> {
            field(k)?
                .parse::<u64>()
                .map_err(|e| corrupt(format!("{k}: {e}")))
        };
        let model_config: ModelConfig =
            serde_json::from_str(&field("model_config")?).map_err(|e| corrupt(e.to_string()))?;

        let all = candle_core::safetensors::load_buffer(&bytes, device)
            .map_err(|e| corrupt(e.to_string()))?;
        let mut params = BTreeMap::new();
        let mut optimizer = Adam {
            t: number("adam_t")?,
            ..Adam::default()
        };
        for (name, t) in all {
            if let Some(k) = name.strip_prefix("optim.m.") {
                optimizer.m.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix("optim.v.") {
                optimizer.v.insert(k.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        Ok(Self {
            params,
            optimizer,
            epoch: number("epoch")? as usize,
            step: number("step")?,
            model_config,
            config_digest: field("config_digest")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;

    fn small(mode: FusionMode) -> ModelConfig {
        let mut c = ModelConfig::desk(32, 1.0, mode);
        c.local.stage_channels = vec![8, 8, 8, 8, 8];
        c.local.layers_per_stage = vec![1; 5];
        c.local.growth_rate = 4;
        c.global.embed_dims = vec![8, 8, 8, 8];
        c.global.num_heads = vec![1; 4];
        c.global.reduction_ratios = vec![1; 4];
        c.global.decoder_dim = 8;
        c
    }

    #[test]
    fn round_trip_is_lossless() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let model = DepthModel::new(&small(FusionMode::UncertaintyFusion), 4, &Device::Cpu)?;
        let mut adam = Adam::default();
        adam.t = 7;
        let name = model.store().names()[0].clone();
        adam.m.insert(name.clone(), model.store().tensors()[&name].clone());
        adam.v.insert(name.clone(), model.store().tensors()[&name].clone());
        let ck = Checkpoint::capture(&model, &adam, 3);
        let path = dir.path().join("c.safetensors");
        ck.save(&path)?;
        let back = Checkpoint::load(&path, &Device::Cpu)?;
        assert_eq!(back.epoch, 3);
        assert_eq!(back.optimizer.t, 7);
        assert_eq!(back.model_config, ck.model_config);
        assert_eq!(back.params.len(), ck.params.len());
        for (k, v) in &ck.params {
            let a = v.flatten_all()?.to_vec1::<f32>()?;
            let b = back.params[k].flatten_all()?.to_vec1::<f32>()?;
            assert_eq!(a, b, "{k}");
        }
        assert!(back.optimizer.m.contains_key(&name));
        assert!(back.check_digest(model.config()));
        Ok(())
    }

    #[test]
    fn shape_mismatch_names_the_parameter() -> Result<()> {
        let model = DepthModel::new(&small(FusionMode::LocalOnly), 0, &Device::Cpu)?;
        let mut other = small(FusionMode::LocalOnly);
        other.local.stage_channels[4] = 16;
        let bigger = DepthModel::new(&other, 0, &Device::Cpu)?;
        let ck = Checkpoint::capture(&bigger, &Adam::default(), 0);
        assert!(!ck.check_digest(model.config()));
        match ck.apply(&model) {
            Err(Error::ParamShape { name, .. }) => assert!(name.starts_with("local.")),
            other => panic!("expected a shape error, got {other:?}"),
        }
        Ok(())
    }

    #[test]
    fn garbage_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.safetensors");
        fs::write(&p, b"not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&p, &Device::Cpu), Err(Error::Checkpoint(_))));
    }
}
