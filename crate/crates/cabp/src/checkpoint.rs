//! Checkpoint serialization.
//!
//! Layout, all integers little-endian: magic `CABP`, format version (u32),
//! tensor count (u32); then per tensor: name length (u16) + UTF-8 name,
//! rank (u8), each dim (u32), dtype code (u8: 0 = f32, 1 = f64), raw
//! little-endian element data. Tensors round-trip in order, so identical
//! parameter stores serialize to identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tape::ParamStore;
use crate::tensor::{AllocCategory, Tensor};

pub const MAGIC: &[u8; 4] = b"CABP";
pub const FORMAT_VERSION: u32 = 1;

pub fn serialize<S: Scalar>(tensors: &[(String, Tensor<S>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| overflow("tensor count"))?.to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        let len = u16::try_from(name_bytes.len()).map_err(|_| overflow("tensor name"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name_bytes);
        let rank = u8::try_from(tensor.rank()).map_err(|_| overflow("rank"))?;
        out.push(rank);
        for &d in tensor.shape() {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| overflow("dim"))?.to_le_bytes());
        }
        out.push(S::DTYPE.code());
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn overflow(what: &str) -> Error {
    Error::Checkpoint(format!("{what} exceeds format limits"))
}

pub fn deserialize<S: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<S>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
        }
        let code = r.take(1)?[0];
        let dtype = Dtype::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
        if dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' stored as {dtype:?}, expected {:?}",
                S::DTYPE
            )));
        }
        let n: usize = shape.iter().product();
        let width = dtype.size_bytes();
        let raw = r.take(n * width)?;
        let data = raw.chunks_exact(width).map(S::read_le).collect();
        tensors.push((name, Tensor::from_vec(shape, data, AllocCategory::Parameter)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(tensors)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Writes parameters and buffers in registration order.
pub fn save_params<S: Scalar>(path: impl AsRef<Path>, params: &ParamStore<S>) -> Result<()> {
    let tensors: Vec<(String, Tensor<S>)> = params
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.tensor.clone()))
        .collect();
    let bytes = serialize(&tensors)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_tensors<S: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<S>)>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    deserialize(&bytes)
}

/// Loads a checkpoint back into a parameter store; names and shapes must
/// match the store exactly.
pub fn load_params<S: Scalar>(path: impl AsRef<Path>, params: &mut ParamStore<S>) -> Result<()> {
    let tensors = load_tensors::<S>(path)?;
    if tensors.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, store expects {}",
            tensors.len(),
            params.len()
        )));
    }
    for (id, (name, tensor)) in tensors.into_iter().enumerate() {
        let entry = params.entry(id);
        if entry.name != name {
            return Err(Error::Checkpoint(format!(
                "tensor {id} named '{name}', store expects '{}'",
                entry.name
            )));
        }
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!("tensor '{name}' shape mismatch")));
        }
        params.set_value(id, tensor);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_pinned() {
        let t = Tensor::from_vec(vec![2], vec![1.0f32, -2.0], AllocCategory::Parameter);
        let bytes = serialize(&[("w".to_string(), t)]).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"CABP");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u16.to_le_bytes());
        expect.extend_from_slice(b"w");
        expect.push(1); // rank
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.push(0); // f32
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn round_trip_preserves_bits() {
        let tensors = vec![
            ("a.weight".to_string(), Tensor::from_vec(vec![2, 3], vec![0.1f64, -0.2, 1e-30, 3.5e10, 0.0, -0.0], AllocCategory::Parameter)),
            ("scalar".to_string(), Tensor::scalar(7.25f64, AllocCategory::Parameter)),
        ];
        let bytes = serialize(&tensors).unwrap();
        let back = deserialize::<f64>(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in tensors.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let t = Tensor::from_vec(vec![1], vec![1.0f32], AllocCategory::Parameter);
        let bytes = serialize(&[("x".to_string(), t)]).unwrap();
        assert!(deserialize::<f64>(&bytes).is_err());
    }

    #[test]
    fn truncated_data_is_rejected() {
        let t = Tensor::from_vec(vec![4], vec![1.0f32; 4], AllocCategory::Parameter);
        let bytes = serialize(&[("x".to_string(), t)]).unwrap();
        assert!(deserialize::<f32>(&bytes[..bytes.len() - 3]).is_err());
    }
}
