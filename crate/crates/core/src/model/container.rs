//! Weight container I/O.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header
//! mapping each tensor name to `{dtype, shape, data_offsets}`, then the
//! contiguous little-endian payload. `F32` and `F64` tensors are accepted;
//! `F64` is narrowed to `f32` on load.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensorError, SafeTensors, TensorView};

use super::{ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn container_error(e: SafeTensorError) -> Error {
    Error::Container(e.to_string())
}

pub fn weights_to_bytes(weights: &Weights) -> Result<Vec<u8>> {
    let named = weights.named_tensors();
    let payloads: Vec<(String, Vec<usize>, Vec<u8>)> = named
        .into_iter()
        .map(|(name, t)| {
            let bytes = t.data().iter().flat_map(|x| x.to_le_bytes()).collect();
            (name, t.shape().to_vec(), bytes)
        })
        .collect();
    let views = payloads
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(container_error)
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata = HashMap::from([("format".to_string(), "pine-core".to_string())]);
    safetensors::tensor::serialize(views, Some(metadata)).map_err(container_error)
}

pub fn weights_from_bytes(config: &ModelConfig, bytes: &[u8]) -> Result<Weights> {
    config.validate()?;
    let st = SafeTensors::deserialize(bytes).map_err(container_error)?;
    Weights::from_named(config, |name, _| {
        let view = st.tensor(name).map_err(|e| match e {
            SafeTensorError::TensorNotFound(n) => Error::MissingTensor(n),
            other => container_error(other),
        })?;
        let data: Vec<f32> = match view.dtype() {
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
                .collect(),
            other => {
                return Err(Error::UnsupportedDtype {
                    name: name.to_string(),
                    dtype: format!("{other:?}"),
                })
            }
        };
        Tensor::new(view.shape().to_vec(), data)
    })
}

pub fn save_weights(path: impl AsRef<Path>, weights: &Weights) -> Result<()> {
    std::fs::write(path, weights_to_bytes(weights)?)?;
    Ok(())
}

/// Reads a config file and a weight container and validates them together.
pub fn load_weights(
    path: impl AsRef<Path>,
    config_path: impl AsRef<Path>,
) -> Result<(ModelConfig, Weights)> {
    let config = ModelConfig::load(config_path)?;
    let bytes = std::fs::read(path)?;
    let weights = weights_from_bytes(&config, &bytes)?;
    Ok((config, weights))
}
