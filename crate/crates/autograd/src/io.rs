//! Binary tensor files and tensor directories.
//!
//! A tensor file is: rank as u64 LE, then `rank` dims as u64 LE, then the
//! elements as f32 LE in row-major order. A tensor directory holds one such
//! file per named parameter, `<name>.tensor`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};

use crate::params::ParamStore;
use crate::real::Real;

#[derive(Debug, thiserror::Error)]
pub enum TensorIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed tensor file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("tensor {name}: {reason}")]
    Mismatch { name: String, reason: String },
    #[error("tensor {0} missing from directory")]
    Missing(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TensorIoError + '_ {
    move |source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_tensor<F: Real>(tensor: &ArrayD<F>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 * (1 + tensor.ndim()) + 4 * tensor.len());
    buf.extend_from_slice(&(tensor.ndim() as u64).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.iter() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    buf
}

pub fn decode_tensor<F: Real>(bytes: &[u8], path: &Path) -> Result<ArrayD<F>, TensorIoError> {
    let malformed = |reason: String| TensorIoError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let read_u64 = |at: usize| -> Result<u64, TensorIoError> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| malformed(format!("truncated header at byte {at}")))
    };
    let rank = read_u64(0)? as usize;
    if rank > 16 {
        return Err(malformed(format!("implausible rank {rank}")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| read_u64(8 + 8 * i).map(|d| d as usize))
        .collect::<Result<_, _>>()?;
    let offset = 8 * (1 + rank);
    let count: usize = dims.iter().product();
    let payload = &bytes[offset.min(bytes.len())..];
    if payload.len() != 4 * count {
        return Err(malformed(format!(
            "expected {} payload bytes for shape {dims:?}, found {}",
            4 * count,
            payload.len()
        )));
    }
    let data: Vec<F> = payload
        .chunks_exact(4)
        .map(|c| F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&dims), data).expect("checked element count"))
}

pub fn write_tensor<F: Real>(path: &Path, tensor: &ArrayD<F>) -> Result<(), TensorIoError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode_tensor(tensor)).map_err(io_err(path))
}

pub fn read_tensor<F: Real>(path: &Path) -> Result<ArrayD<F>, TensorIoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_tensor(&bytes, path)
}

pub fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.tensor"))
}

/// Writes every parameter of `store` into `dir` (created if absent).
pub fn save_store<F: Real>(dir: &Path, store: &ParamStore<F>) -> Result<(), TensorIoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, value) in store.iter() {
        write_tensor(&tensor_path(dir, name), value)?;
    }
    Ok(())
}

/// Fills an already-shaped `store` from `dir`. Every parameter must be
/// present with exactly the expected shape.
pub fn load_into_store<F: Real>(dir: &Path, store: &mut ParamStore<F>) -> Result<(), TensorIoError> {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let path = tensor_path(dir, &name);
        if !path.exists() {
            return Err(TensorIoError::Missing(name));
        }
        let value = read_tensor::<F>(&path)?;
        store
            .set(&name, value)
            .map_err(|reason| TensorIoError::Mismatch {
                name: name.clone(),
                reason,
            })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn tensor_bytes_roundtrip(dims in proptest::collection::vec(1usize..5, 0..4), seed in 0u32..1000) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32) * 0.37 - 3.0).collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap();
            let back: ArrayD<f32> = decode_tensor(&encode_tensor(&t), Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn header_layout_is_little_endian_u64() {
        let t = ArrayD::from_shape_vec(IxDyn(&[2, 1]), vec![1.0f32, -2.0]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[0..8], &2u64.to_le_bytes());
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1u64.to_le_bytes());
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut b = encode_tensor(&t);
        b.pop();
        assert!(decode_tensor::<f32>(&b, Path::new("mem")).is_err());
    }

    #[test]
    fn store_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.add("a.weight", ArrayD::from_elem(IxDyn(&[2, 3]), 0.5));
        s.add("b", ArrayD::from_elem(IxDyn(&[4]), -1.25));
        save_store(dir.path(), &s).unwrap();
        let mut t = ParamStore::<f32>::new();
        t.add("a.weight", ArrayD::zeros(IxDyn(&[2, 3])));
        t.add("b", ArrayD::zeros(IxDyn(&[4])));
        load_into_store(dir.path(), &mut t).unwrap();
        assert!(s.identical(&t));

        let mut wrong = ParamStore::<f32>::new();
        wrong.add("b", ArrayD::zeros(IxDyn(&[5])));
        assert!(matches!(
            load_into_store(dir.path(), &mut wrong),
            Err(TensorIoError::Mismatch { .. })
        ));
    }
}
