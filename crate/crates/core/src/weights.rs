//! Binary weights file.
//!
//! ```text
//! "LPRW" | version u32 | count u32 | count x tensor
//! tensor: name_len u32 | name (UTF-8) | dtype u32 (0 = f32, 1 = f64)
//!         | ndim u32 | dims u32[ndim] | little-endian data
//! ```
//!
//! All integers are little-endian. Network files hold every parameter
//! followed by the batch-norm running statistics.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{DType, Element, Shape4, Tensor4};

pub const MAGIC: &[u8; 4] = b"LPRW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn from_tensor<T: Element>(name: impl Into<String>, t: &Tensor4<T>) -> Self {
        let dims = t.shape().dims().map(|d| d as u32).to_vec();
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => TensorData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    /// Converts to a tensor of the same dtype; fewer than four dims are
    /// padded with leading ones.
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor4<T>> {
        if self.data.dtype() != T::DTYPE {
            return Err(Error::Config(format!(
                "tensor {}: stored as {:?}, requested {:?}",
                self.name,
                self.data.dtype(),
                T::DTYPE
            )));
        }
        if self.dims.len() > 4 {
            return Err(Error::Config(format!(
                "tensor {}: {} dims, at most 4 supported",
                self.name,
                self.dims.len()
            )));
        }
        let mut d = [1usize; 4];
        for (slot, &v) in d[4 - self.dims.len()..].iter_mut().zip(&self.dims) {
            *slot = v as usize;
        }
        let data: Vec<T> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        };
        Tensor4::from_vec(Shape4::new(d[0], d[1], d[2], d[3]), data)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightsFile {
    pub tensors: Vec<NamedTensor>,
}

impl WeightsFile {
    pub fn from_network<T: Element>(net: &Network<T>) -> Self {
        Self {
            tensors: net
                .state()
                .into_iter()
                .map(|(n, t)| NamedTensor::from_tensor(n, t))
                .collect(),
        }
    }

    /// Overwrites the network state. File and network tensors must match
    /// one-to-one by name, with equal shapes and dtype; order is irrelevant.
    pub fn apply_to<T: Element>(&self, net: &mut Network<T>) -> Result<()> {
        let mut used = vec![false; self.tensors.len()];
        let mut expected = 0;
        net.visit_state_mut(|name, dst| {
            expected += 1;
            let idx = self
                .tensors
                .iter()
                .position(|t| t.name == name)
                .ok_or_else(|| Error::Config(format!("weights file has no tensor {name}")))?;
            used[idx] = true;
            let src = self.tensors[idx].to_tensor::<T>()?;
            if src.shape() != dst.shape() {
                return Err(Error::dim(
                    "shape",
                    format!(
                        "tensor {name}: file {} vs network {}",
                        src.shape(),
                        dst.shape()
                    ),
                ));
            }
            *dst = src;
            Ok(())
        })?;
        if let Some(extra) = used.iter().position(|u| !u) {
            return Err(Error::Config(format!(
                "weights file has tensor {} unknown to the network ({} expected)",
                self.tensors[extra].name, expected
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&t.data.dtype().code().to_le_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                TensorData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected \"LPRW\""),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_at = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format {
                    offset: (name_at + 4) as u64,
                    message: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let dtype_at = r.pos;
            let code = r.u32("dtype")?;
            let dtype = DType::from_code(code).ok_or_else(|| Error::Format {
                offset: dtype_at as u64,
                message: format!("unknown dtype code {code}"),
            })?;
            let ndim = r.u32("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                dims.push(r.u32("dims")?);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| Error::Format {
                    offset: r.pos as u64,
                    message: format!("tensor {name}: element count overflows"),
                })?;
            let nbytes = numel
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format {
                    offset: r.pos as u64,
                    message: format!("tensor {name}: byte size overflows"),
                })?;
            let raw = r.take(nbytes, &format!("data of {name}"))?;
            let data = match dtype {
                DType::F32 => TensorData::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                DType::F64 => TensorData::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
            };
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> WeightsFile {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor4::<f32>::randn(Shape4::new(2, 3, 1, 1), 1.0, &mut rng);
        let b = Tensor4::<f64>::randn(Shape4::new(1, 1, 2, 2), 1.0, &mut rng);
        WeightsFile {
            tensors: vec![
                NamedTensor::from_tensor("a", &a),
                NamedTensor::from_tensor("b.c", &b),
            ],
        }
    }

    #[test]
    fn roundtrip_bytes() {
        let w = sample();
        assert_eq!(WeightsFile::from_bytes(&w.to_bytes()).unwrap(), w);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"LPRW");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], b'a');
        // dtype f32, ndim 4
        assert_eq!(&bytes[17..21], &0u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &4u32.to_le_bytes());
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = sample().to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            WeightsFile::from_bytes(&bad_magic),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad_version = bytes.clone();
        bad_version[4] = 7;
        assert!(matches!(
            WeightsFile::from_bytes(&bad_version),
            Err(Error::UnsupportedVersion {
                found: 7,
                expected: 1
            })
        ));
        for cut in [2, 10, 20, bytes.len() - 1] {
            match WeightsFile::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            WeightsFile::from_bytes(&trailing),
            Err(Error::Format { .. })
        ));
        let mut bad_dtype = bytes;
        bad_dtype[17] = 9;
        assert!(matches!(
            WeightsFile::from_bytes(&bad_dtype),
            Err(Error::Format { offset: 17, .. })
        ));
    }

    #[test]
    fn dtype_mismatch_on_convert() {
        let w = sample();
        assert!(w.tensors[0].to_tensor::<f64>().is_err());
        assert!(w.tensors[0].to_tensor::<f32>().is_ok());
    }
}
