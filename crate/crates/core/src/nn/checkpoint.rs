//! Model checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "Z2FM"
//! version      u32
//! count        u32      number of tensor records
//! record*:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rank       u32
//!   extents    rank x u64
//!   payload    product(extents) x f64, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::Array;
use crate::error::{Error, Result};

use super::ffnn::{Activation, Ffnn, Layer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"Z2FM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.tensors.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert_ffnn(&mut self, prefix: &str, net: &Ffnn) {
        for (i, l) in net.layers().iter().enumerate() {
            self.insert(format!("{prefix}.layer{i}.weight"), l.weight.clone());
            self.insert(format!("{prefix}.layer{i}.bias"), l.bias.clone());
            self.insert(
                format!("{prefix}.layer{i}.activation"),
                Array::scalar(l.activation.code() as f64),
            );
        }
    }

    pub fn has_ffnn(&self, prefix: &str) -> bool {
        self.get(&format!("{prefix}.layer0.weight")).is_some()
    }

    pub fn ffnn(&self, prefix: &str) -> Result<Ffnn> {
        let mut layers = Vec::new();
        let missing = |what: String| Error::Config(format!("checkpoint is missing tensor `{what}`"));
        for i in 0.. {
            let wname = format!("{prefix}.layer{i}.weight");
            let Some(weight) = self.get(&wname) else { break };
            let bname = format!("{prefix}.layer{i}.bias");
            let bias = self.get(&bname).ok_or_else(|| missing(bname))?;
            let aname = format!("{prefix}.layer{i}.activation");
            let code = self.get(&aname).ok_or_else(|| missing(aname.clone()))?.item();
            let activation = Activation::from_code(code as u8)
                .filter(|a| a.code() as f64 == code)
                .ok_or_else(|| Error::Config(format!("unknown activation code {code} in `{aname}`")))?;
            layers.push(Layer::new(weight.clone(), bias.clone(), activation)?);
        }
        if layers.is_empty() {
            return Err(missing(format!("{prefix}.layer0.weight")));
        }
        Ffnn::new(layers)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, value) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
            for &e in value.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &x in value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { path: path.into() });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: path.into(),
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format {
                path: path.into(),
                message: "tensor name is not UTF-8".into(),
            })?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Truncated { path: path.into() })?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Truncated { path: path.into() })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            ckpt.tensors.push((name, Array::from_vec(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                path: path.into(),
                message: "trailing bytes after last record".into(),
            });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated {
                path: self.path.into(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::{ffnn_default, init_near_identity};
    use crate::rng::stream_rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = stream_rng(1, 0);
        let net = ffnn_default(&[3, 4, 2], Activation::LeakyRelu, Activation::Sigmoid, &mut rng).unwrap();
        let pn = init_near_identity(4, 1, &mut rng);
        let mut ck = Checkpoint::new();
        ck.insert_ffnn("generator", &net);
        ck.insert_ffnn("protonet", &pn);
        ck.insert("weird", Array::vector(vec![-0.0, f64::MIN_POSITIVE, 1e300]));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.ffnn("generator").unwrap(), net);
        assert_eq!(back.ffnn("protonet").unwrap(), pn);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut ck = Checkpoint::new();
        ck.insert("x", Array::vector(vec![1.0, 2.0]));
        let mut bytes = ck.to_bytes();
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::from_bytes(short, Path::new("m.z2fm")),
            Err(Error::Truncated { .. })
        ));
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes, Path::new("m.z2fm")).unwrap_err();
        assert!(err.to_string().contains("m.z2fm"));
        assert!(matches!(err, Error::BadMagic { .. }));
    }
}
