//! Checkpoints: one HIMT file per parameter plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DitModel, DitParams, ModelConfig};
use crate::error::{HimatError, Result};
use crate::params::{named, ParamTree};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: String,
    pub config: ModelConfig,
    pub step: usize,
    pub seed: u64,
    /// Parameter names in traversal order; file `params/<name>.himt`.
    pub params: Vec<String>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, model: &DitModel, step: usize, seed: u64, extra: serde_json::Value) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir)?;
    let leaves = named(&model.params);
    for (name, t) in &leaves {
        t.write_himt(pdir.join(format!("{name}.himt")), DType::F64)?;
    }
    let manifest = CheckpointManifest {
        version: crate::VERSION.to_string(),
        config: model.config.clone(),
        step,
        seed,
        params: leaves.into_iter().map(|(n, _)| n).collect(),
        extra,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(DitModel, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest.config.validate()?;
    let mut params = DitParams::init(&manifest.config, 0);
    let mut err = None;
    let mut seen = Vec::new();
    params.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        seen.push(name.to_string());
        match Tensor::read_himt(dir.join("params").join(format!("{name}.himt"))) {
            Ok(v) if v.shape() == t.shape() => *t = v,
            Ok(v) => err = Some(HimatError::Format(format!("{name}: stored {:?}, expected {:?}", v.shape(), t.shape()))),
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != manifest.params {
        return Err(HimatError::Format("parameter list does not match the model layout".into()));
    }
    Ok((DitModel { config: manifest.config.clone(), params }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig { n_blocks: 2, channels: 8, latent_height: 4, latent_width: 4, latent_channels: 2, ..Default::default() };
        let mut m = DitModel::new(cfg, 1).unwrap();
        m.params.blocks[1].cs.pooled.data_mut()[3] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &m, 17, 5, serde_json::json!({"note": "x"})).unwrap();
        let (back, man) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!((man.step, man.seed), (17, 5));
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let m = DitModel::new(ModelConfig { n_blocks: 1, channels: 4, ..Default::default() }, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &m, 0, 0, serde_json::Value::Null).unwrap();
        fs::remove_file(dir.path().join("params/output.bias.himt")).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
