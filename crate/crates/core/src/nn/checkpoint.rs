//! Checkpoint container: named 2D arrays stored as little-endian `f32`.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic   8 bytes  "EGPOCKPT"
//! version u32      1
//! meta    u32 length + UTF-8 JSON object
//! count   u32      number of arrays
//! repeat count times:
//!   name  u32 length + UTF-8 bytes
//!   rows  u32
//!   cols  u32
//!   data  rows * cols f32, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::params::ParamSet;
use super::Real;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"EGPOCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Array2<f32>)>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            meta: serde_json::Value::Object(Default::default()),
            arrays: Vec::new(),
        }
    }
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            arrays: Vec::new(),
        }
    }

    /// Append every tensor of `params` under `prefix/<name>`.
    pub fn add_params<F: Real>(&mut self, prefix: &str, params: &ParamSet<F>) {
        for (name, t) in params.names().iter().zip(params.tensors()) {
            self.arrays
                .push((format!("{prefix}/{name}"), t.mapv(|v| v.as_f64() as f32)));
        }
    }

    /// Fill `params` from the arrays stored under `prefix`, checking names and shapes.
    pub fn load_params<F: Real>(&self, prefix: &str, params: &mut ParamSet<F>) -> Result<()> {
        let names = params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let key = format!("{prefix}/{name}");
            let arr = self
                .arrays
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, a)| a)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
            if arr.dim() != params.get(i).dim() {
                return Err(Error::Checkpoint(format!(
                    "{key}: stored shape {:?}, expected {:?}",
                    arr.dim(),
                    params.get(i).dim()
                )));
            }
            *params.get_mut(i) = arr.mapv(|v| F::lit(v as f64));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("json value serialises");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(a.ncols() as u32).to_le_bytes());
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("array name is not UTF-8"))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let a = Array2::from_shape_vec((rows, cols), data).map_err(|_| bad("shape"))?;
            arrays.push((name, a));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }
}

fn bad(msg: &str) -> Error {
    Error::Checkpoint(msg.to_string())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, PolicyHead};
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn policy_params_round_trip_bit_exact() {
        let p = PolicyHead::<f32>::new(5, &[7, 3], 2, Activation::Tanh, &mut rng::derive(2, 9));
        let mut ck = Checkpoint::new(serde_json::json!({"kind": "policy"}));
        ck.add_params("policy", &p.params);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let mut q = PolicyHead::<f32>::new(5, &[7, 3], 2, Activation::Tanh, &mut rng::derive(3, 9));
        back.load_params("policy", &mut q.params).unwrap();
        let a: Vec<u32> = p.params.flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = q.params.flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.meta["kind"], "policy");
    }

    #[test]
    fn shape_mismatch_on_load_rejected() {
        let p = PolicyHead::<f32>::new(5, &[7], 2, Activation::Tanh, &mut rng::derive(2, 9));
        let mut ck = Checkpoint::default();
        ck.add_params("policy", &p.params);
        let mut q = PolicyHead::<f32>::new(5, &[8], 2, Activation::Tanh, &mut rng::derive(2, 9));
        assert!(ck.load_params("policy", &mut q.params).is_err());
    }

    #[test]
    fn truncated_bytes_rejected() {
        let mut ck = Checkpoint::default();
        ck.arrays.push(("a".into(), Array2::ones((2, 2))));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_arrays_round_trip(
            rows in 1usize..5, cols in 1usize..5,
            vals in proptest::collection::vec(any::<f32>(), 25),
        ) {
            let data: Vec<f32> = vals.into_iter().take(rows * cols).collect();
            let a = Array2::from_shape_vec((rows, cols), data).unwrap();
            let mut ck = Checkpoint::default();
            ck.arrays.push(("x".into(), a.clone()));
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            let got: Vec<u32> = back.arrays[0].1.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }
}
