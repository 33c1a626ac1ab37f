//! Reader/writer for the `safetensors` container: an 8-byte little-endian
//! header length, a JSON header mapping names to dtype/shape/byte offsets,
//! then the raw tensor bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::Parameterized;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl StoredTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Values widened to f64. Supports F64, F32, F16 and BF16.
    pub fn to_f64(&self) -> Result<Vec<f64>> {
        let bad = || Error::format("tensor file", format!("unsupported dtype {}", self.dtype));
        let width = match self.dtype.as_str() {
            "F64" => 8,
            "F32" => 4,
            "F16" | "BF16" => 2,
            _ => return Err(bad()),
        };
        if self.data.len() != width * self.numel() {
            return Err(Error::format("tensor file", "byte length does not match shape"));
        }
        let out = match self.dtype.as_str() {
            "F64" => self.data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            "F32" => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            "BF16" => self
                .data
                .chunks_exact(2)
                .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16) as f64)
                .collect(),
            "F16" => self
                .data
                .chunks_exact(2)
                .map(|c| f16_to_f32(u16::from_le_bytes([c[0], c[1]])) as f64)
                .collect(),
            _ => return Err(bad()),
        };
        Ok(out)
    }
}

fn f16_to_f32(h: u16) -> f32 {
    let sign = ((h >> 15) as u32) << 31;
    let exp = ((h >> 10) & 0x1f) as u32;
    let frac = (h & 0x3ff) as u32;
    let bits = match (exp, frac) {
        (0, 0) => sign,
        (0, _) => {
            // subnormal: renormalize
            let mut e = 127 - 15 + 1;
            let mut f = frac;
            while f & 0x400 == 0 {
                f <<= 1;
                e -= 1;
            }
            sign | (e << 23) | ((f & 0x3ff) << 13)
        }
        (0x1f, _) => sign | 0x7f80_0000 | (frac << 13),
        _ => sign | ((exp + 127 - 15) << 23) | (frac << 13),
    };
    f32::from_bits(bits)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, StoredTensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorFile {
    /// Snapshot of every parameter of `module` under `prefix`, stored in `T`'s dtype.
    pub fn add_module<T: Scalar, M: Parameterized<T> + ?Sized>(&mut self, prefix: &str, module: &M) {
        module.visit_params(prefix, &mut |name, shape, values| {
            let mut data = Vec::with_capacity(values.len() * T::DTYPE.size());
            for v in values {
                v.write_le(&mut data);
            }
            self.tensors.insert(
                name.to_string(),
                StoredTensor {
                    dtype: T::DTYPE.as_str().to_string(),
                    shape: shape.to_vec(),
                    data,
                },
            );
        });
    }

    /// Fills every parameter of `module` from the tensor named by the first
    /// candidate `names(param_name)` yields that exists.
    pub fn load_module<T: Scalar, M: Parameterized<T> + ?Sized>(
        &self,
        prefix: &str,
        module: &mut M,
        names: &dyn Fn(&str) -> Vec<String>,
    ) -> Result<()> {
        let mut err = None;
        module.visit_params_mut(prefix, &mut |name, shape, values| {
            if err.is_some() {
                return;
            }
            let found = names(name).into_iter().find_map(|n| self.tensors.get(&n));
            let Some(t) = found else {
                err = Some(Error::format("tensor file", format!("missing tensor {name}")));
                return;
            };
            if t.shape != shape {
                err = Some(Error::format(
                    "tensor file",
                    format!("tensor {name} has shape {:?}, expected {:?}", t.shape, shape),
                ));
                return;
            }
            match t.to_f64() {
                Ok(src) => values.iter_mut().zip(src).for_each(|(d, s)| *d = T::from_f64_lossy(s)),
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        if !self.metadata.is_empty() {
            header.insert("__metadata__".into(), json!(self.metadata));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            header.insert(
                name.clone(),
                json!({"dtype": t.dtype, "shape": t.shape, "data_offsets": [offset, offset + t.data.len()]}),
            );
            offset += t.data.len();
        }
        let mut header = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
        while !header.len().is_multiple_of(8) {
            header.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("tensor file", d.to_string());
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes.get(8 + n..).ok_or_else(|| bad("truncated header"))?;
        let header: Map<String, Value> = serde_json::from_slice(&bytes[8..8 + n])?;
        let mut file = TensorFile::default();
        for (name, v) in header {
            if name == "__metadata__" {
                if let Value::Object(m) = v {
                    for (k, val) in m {
                        file.metadata.insert(k, val.as_str().unwrap_or_default().to_string());
                    }
                }
                continue;
            }
            let dtype = v["dtype"].as_str().ok_or_else(|| bad("missing dtype"))?.to_string();
            let shape = v["shape"]
                .as_array()
                .ok_or_else(|| bad("missing shape"))?
                .iter()
                .map(|d| d.as_u64().map(|d| d as usize).ok_or_else(|| bad("bad shape")))
                .collect::<Result<Vec<_>>>()?;
            let offs = v["data_offsets"].as_array().ok_or_else(|| bad("missing offsets"))?;
            let (start, end) = match offs.as_slice() {
                [a, b] => (
                    a.as_u64().ok_or_else(|| bad("bad offset"))? as usize,
                    b.as_u64().ok_or_else(|| bad("bad offset"))? as usize,
                ),
                _ => return Err(bad("bad offsets")),
            };
            let data = body.get(start..end).ok_or_else(|| bad("offset out of range"))?.to_vec();
            file.tensors.insert(name, StoredTensor { dtype, shape, data });
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::array;

    #[test]
    fn round_trip_across_scalar_types() {
        let lin = Linear {
            weight: array![[1.5f64, -2.0], [0.25, 4.0]],
            bias: array![0.5, -0.125],
        };
        let mut f = TensorFile::default();
        f.add_module("head", &lin);
        f.metadata.insert("kind".into(), "test".into());
        let back = TensorFile::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(back, f);

        let mut as_f32 = Linear {
            weight: ndarray::Array2::<f32>::zeros((2, 2)),
            bias: ndarray::Array1::zeros(2),
        };
        back.load_module("head", &mut as_f32, &|n| vec![n.to_string()]).unwrap();
        assert_eq!(as_f32.weight, array![[1.5f32, -2.0], [0.25, 4.0]]);
    }

    #[test]
    fn shape_mismatch_and_missing_tensor_are_errors() {
        let lin = Linear {
            weight: array![[1.0f32, 2.0]],
            bias: array![0.0],
        };
        let mut f = TensorFile::default();
        f.add_module("a", &lin);
        let mut other = Linear {
            weight: ndarray::Array2::<f32>::zeros((2, 2)),
            bias: ndarray::Array1::zeros(2),
        };
        assert!(f.load_module("a", &mut other, &|n| vec![n.to_string()]).is_err());
        assert!(f.load_module("b", &mut other, &|n| vec![n.to_string()]).is_err());
    }

    #[test]
    fn half_precision_decoding() {
        assert_eq!(f16_to_f32(0x3c00), 1.0);
        assert_eq!(f16_to_f32(0xc000), -2.0);
        assert_eq!(f16_to_f32(0x0000), 0.0);
        assert!((f16_to_f32(0x0001) - 5.960_464_5e-8).abs() < 1e-12);
        let t = StoredTensor {
            dtype: "BF16".into(),
            shape: vec![1],
            data: 0x3f80u16.to_le_bytes().to_vec(),
        };
        assert_eq!(t.to_f64().unwrap(), vec![1.0]);
    }
}
