//! Flat little-endian parameter payloads described by a JSON manifest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub dtype: String,
}

/// Concatenates tensors into one payload and describes each in the manifest.
pub fn pack<'a, T: Scalar>(tensors: impl IntoIterator<Item = (String, &'a Tensor<T>)>) -> (Vec<ManifestEntry>, Vec<u8>) {
    let mut manifest = Vec::new();
    let mut bytes = Vec::new();
    for (name, t) in tensors {
        manifest.push(ManifestEntry { name, shape: t.shape().to_vec(), offset: bytes.len(), dtype: T::DTYPE.into() });
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
    }
    (manifest, bytes)
}

/// Reads the tensor named `name` back out of a payload.
pub fn unpack<T: Scalar>(manifest: &[ManifestEntry], bytes: &[u8], name: &str) -> Result<Tensor<T>> {
    let entry = manifest
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::State(format!("payload has no tensor named {name:?}")))?;
    if entry.dtype != T::DTYPE {
        return Err(Error::State(format!("{name} is stored as {}, expected {}", entry.dtype, T::DTYPE)));
    }
    let count: usize = entry.shape.iter().product();
    let end = entry.offset + count * T::BYTES;
    if end > bytes.len() {
        return Err(Error::State(format!("{name} runs past the end of the payload")));
    }
    let data = bytes[entry.offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(entry.shape.clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn pack_unpack_bit_exact(a in proptest::collection::vec(any::<f32>(), 1..20), b in proptest::collection::vec(-1e6f32..1e6, 6)) {
            let ta = Tensor::new(vec![a.len()], a.clone()).unwrap();
            let tb = Tensor::new(vec![2, 3], b).unwrap();
            let (m, bytes) = pack([("a".to_string(), &ta), ("b".to_string(), &tb)]);
            let ra: Tensor<f32> = unpack(&m, &bytes, "a").unwrap();
            let rb: Tensor<f32> = unpack(&m, &bytes, "b").unwrap();
            prop_assert_eq!(ra.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(rb, tb);
        }
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let t = Tensor::<f64>::zeros(vec![2]);
        let (m, bytes) = pack([("t".to_string(), &t)]);
        assert!(unpack::<f32>(&m, &bytes, "t").is_err());
        assert!(unpack::<f64>(&m, &bytes, "missing").is_err());
    }
}
