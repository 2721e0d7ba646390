//! Versioned JSON container of named parameter arrays, the model
//! configuration and an optional default prompt image.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "pbd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<NamedArray>,
    #[serde(default)]
    prompt: Option<NamedArray>,
}

fn to_array<T: Scalar>(name: &str, t: &Tensor<T>) -> NamedArray {
    NamedArray {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|v| v.to_f64_lossy()).collect(),
    }
}

fn from_array<T: Scalar>(a: &NamedArray) -> Result<Tensor<T>> {
    Tensor::from_vec(&a.shape, a.data.iter().map(|&v| T::lit(v)).collect())
        .map_err(|_| Error::Checkpoint(format!("array `{}` has {} values for shape {:?}", a.name, a.data.len(), a.shape)))
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &Model<T>, prompt: Option<&Tensor<T>>) -> Result<()> {
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config().clone(),
        params: model.store().iter().map(|(n, t)| to_array(n, t)).collect(),
        prompt: prompt.map(|p| to_array("prompt", p)),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
}

/// Loads a model and its stored prompt.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model<T>, Option<Tensor<T>>)> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.as_ref().display().to_string(),
        reason: e.to_string(),
    })?;
    if file.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", file.format)));
    }
    if file.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {} (expected {VERSION})", file.version)));
    }
    let mut model = Model::new(file.config, 0)?;
    let mut store = ParamStore::new();
    for a in &file.params {
        store.add(a.name.clone(), from_array(a)?);
    }
    model.load_store(store)?;
    let prompt = file.prompt.as_ref().map(from_array).transpose()?;
    Ok((model, prompt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = Model::<f32>::new(ModelConfig::desk(), 11).unwrap();
        let prompt = Tensor::from_fn(&[1, 64, 64], |i| (i % 7) as f32 / 7.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_checkpoint(&p, &m, Some(&prompt)).unwrap();
        let (back, pr) = load_checkpoint::<f32>(&p).unwrap();
        assert_eq!(pr.unwrap(), prompt);
        for ((n1, t1), (n2, t2)) in m.store().iter().zip(back.store().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
        let first = std::fs::read(&p).unwrap();
        save_checkpoint(&p, &back, Some(&prompt)).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
    }

    #[test]
    fn wrong_version_is_rejected() {
        let m = Model::<f32>::new(ModelConfig::desk(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_checkpoint(&p, &m, None).unwrap();
        let text = std::fs::read_to_string(&p).unwrap().replace("\"version\":1", "\"version\":99");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::Checkpoint(_))));
    }
}
