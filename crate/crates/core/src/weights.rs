//! Reading and writing named tensors in safetensors archives.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Result, TrdError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named tensor queued for serialization.
pub struct NamedBytes {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl NamedBytes {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        NamedBytes {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes: t.to_le_bytes(),
        }
    }
}

pub fn serialize(tensors: &[NamedBytes], metadata: Option<HashMap<String, String>>) -> Result<Vec<u8>> {
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|t| {
            TensorView::new(t.dtype, t.shape.clone(), &t.bytes)
                .map(|v| (t.name.clone(), v))
                .map_err(|e| TrdError::Checkpoint(format!("tensor {}: {e}", t.name)))
        })
        .collect::<Result<_>>()?;
    safetensors::tensor::serialize(views, &metadata).map_err(|e| TrdError::Checkpoint(e.to_string()))
}

/// Parsed archive owning its bytes.
pub struct Archive {
    bytes: Vec<u8>,
}

impl Archive {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| TrdError::io(path, e))?;
        Self::from_bytes(bytes).map_err(|e| match e {
            TrdError::Checkpoint(reason) => TrdError::WeightLoad {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        SafeTensors::deserialize(&bytes).map_err(|e| TrdError::Checkpoint(format!("corrupt archive: {e}")))?;
        Ok(Archive { bytes })
    }

    fn view(&self) -> SafeTensors<'_> {
        SafeTensors::deserialize(&self.bytes).expect("validated on construction")
    }

    pub fn metadata(&self) -> Option<HashMap<String, String>> {
        SafeTensors::read_metadata(&self.bytes)
            .ok()
            .and_then(|(_, m)| m.metadata().clone())
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.view().names().into_iter().cloned().collect();
        names.sort();
        names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.view().tensor(name).is_ok()
    }

    /// Decode a tensor into `T`, converting from f32/f64 storage.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let st = self.view();
        let view = st
            .tensor(name)
            .map_err(|_| TrdError::Checkpoint(format!("missing tensor {name}")))?;
        let shape = view.shape().to_vec();
        let data = view.data();
        let values: Vec<T> = match view.dtype() {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
                .collect(),
            Dtype::F64 => data.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
            other => {
                return Err(TrdError::Checkpoint(format!(
                    "tensor {name} has unsupported dtype {other:?}"
                )))
            }
        };
        Tensor::from_vec(&shape, values)
    }

    /// Raw f64 values (bit-exact for f64 storage).
    pub fn f64_values(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.tensor::<f64>(name)?.into_data())
    }
}
