use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{load_named, named_params, ControlBranch, ModelConfig, UNet};
use crate::error::{Error, Result};
use crate::numerics::{read_cvt1_file, write_cvt1_file, Tensor};

const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    config_hash: String,
    tensors: Vec<TensorEntry>,
}

/// Hex SHA-256 of the compact JSON encoding of any config value.
pub fn config_hash<S: Serialize>(cfg: &S) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Trained weights: the image denoiser and, once trained, its control
/// branch. Stored as one CVT1 file per tensor plus a JSON manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub unet: UNet<f32>,
    pub control: Option<ControlBranch<f32>>,
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out: Vec<_> = named_params(&self.unet)
            .into_iter()
            .map(|(k, v)| (format!("unet.{k}"), v))
            .collect();
        if let Some(c) = &self.control {
            out.extend(
                named_params(c)
                    .into_iter()
                    .map(|(k, v)| (format!("control.{k}"), v)),
            );
        }
        out
    }

    pub fn entries(&self) -> Vec<TensorEntry> {
        self.tensors()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.dims().to_vec(),
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors = self.tensors();
        for (name, t) in &tensors {
            write_cvt1_file(dir.join(format!("{name}.cvt1")), t)?;
        }
        let manifest = Manifest {
            config: self.config.clone(),
            config_hash: config_hash(&self.config)?,
            tensors: self.entries(),
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if config_hash(&manifest.config)? != manifest.config_hash {
            return Err(Error::Format {
                what: "checkpoint manifest",
                detail: "config hash does not match the stored config".into(),
            });
        }
        let cfg = manifest.config;
        let read = |prefix: &str| -> Result<std::collections::BTreeMap<String, Tensor<f32>>> {
            manifest
                .tensors
                .iter()
                .filter_map(|e| e.name.strip_prefix(prefix).map(|short| (short, &e.name)))
                .map(|(short, name)| {
                    let t: Tensor<f32> = read_cvt1_file(dir.join(format!("{name}.cvt1")))?;
                    Ok((short.to_string(), t))
                })
                .collect()
        };
        let mut unet = cfg.init_unet::<f32>()?;
        load_named(&mut unet, &read("unet.")?)?;
        let control_tensors = read("control.")?;
        let control = if control_tensors.is_empty() {
            None
        } else {
            let mut c = cfg.init_control(&unet)?;
            load_named(&mut c, &control_tensors)?;
            Some(c)
        };
        Ok(Self {
            config: cfg,
            unet,
            control,
        })
    }
}
