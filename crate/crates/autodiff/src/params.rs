//! Named parameter collections and the binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic          8 bytes   "TVBFCKPT"
//! format         u32       1
//! store version  u64       update counter of the store
//! count          u32       number of records
//! record × count:
//!   name_len     u32
//!   name         name_len bytes, UTF-8
//!   dtype        u8        1 = f64
//!   rank         u32
//!   dims         u64 × rank
//!   values       f64 × prod(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TVBFCKPT";
pub const CHECKPOINT_FORMAT: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    version: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(AutodiffError::DuplicateName(name));
        }
        self.names.push(name);
        self.values.push(value);
        self.grads.push(None);
        Ok(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.values[i])
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn grad(&self, i: usize) -> Option<&Tensor> {
        self.grads[i].as_ref()
    }

    pub fn set_grad(&mut self, i: usize, g: Tensor) {
        self.grads[i] = Some(g);
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Inserts every parameter into `graph` as a differentiable leaf, in
    /// store order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.values.iter().map(|v| graph.param(v.clone())).collect()
    }

    /// Adds gradients of the bound leaves to the stored gradients. Leaves
    /// that received no gradient contribute zeros.
    pub fn accumulate_grads(&mut self, graph: &Graph, vars: &[Var]) {
        for (i, v) in vars.iter().enumerate() {
            let g = graph
                .grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.values[i].shape()));
            match self.grads[i].as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => self.grads[i] = Some(g),
            }
        }
    }

    /// Multiplies every stored gradient by `k`.
    pub fn scale_grads(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT.to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.names.len() as u32).to_le_bytes());
        for (name, v) in self.names.iter().zip(&self.values) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(v.rank() as u32).to_le_bytes());
            for d in v.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(AutodiffError::MalformedCheckpoint("bad magic".into()));
        }
        let format = r.u32()?;
        if format != CHECKPOINT_FORMAT {
            return Err(AutodiffError::MalformedCheckpoint(format!("unsupported format {}", format)));
        }
        let version = r.u64()?;
        let count = r.u32()? as usize;
        let mut store = ParameterStore {
            version,
            ..Default::default()
        };
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| AutodiffError::MalformedCheckpoint("name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(AutodiffError::MalformedCheckpoint(format!("unknown dtype {}", dtype)));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| AutodiffError::MalformedCheckpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.insert(name, Tensor::new(dims, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(AutodiffError::MalformedCheckpoint("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(AutodiffError::MalformedCheckpoint("unexpected end of data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
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

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParameterStore::new();
        p.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(p.insert("w", Tensor::zeros(&[2])), Err(AutodiffError::DuplicateName(_))));
    }

    #[test]
    fn checkpoint_is_bit_exact() {
        let mut p = ParameterStore::new();
        p.insert("a.weight", Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap())
            .unwrap();
        p.insert("scalar", Tensor::scalar(std::f64::consts::PI)).unwrap();
        p.bump_version();
        let bytes = p.to_bytes();
        let q = ParameterStore::from_bytes(&bytes).unwrap();
        assert_eq!(q.version(), 1);
        assert_eq!(q.names(), p.names());
        for i in 0..p.len() {
            let a: Vec<u64> = p.value(i).data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = q.value(i).data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
            assert_eq!(p.value(i).shape(), q.value(i).shape());
        }
        assert_eq!(q.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let mut p = ParameterStore::new();
        p.insert("x", Tensor::from_vec(vec![2.0])).unwrap();
        let b = p.to_bytes();
        assert_eq!(&b[0..8], b"TVBFCKPT");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(b[20..24].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[24..28].try_into().unwrap()), 1);
        assert_eq!(b[28], b'x');
        assert_eq!(b[29], 1);
        assert_eq!(b.len(), 28 + 1 + 1 + 4 + 8 + 8);
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let mut p = ParameterStore::new();
        p.insert("x", Tensor::from_vec(vec![2.0, 3.0])).unwrap();
        let b = p.to_bytes();
        assert!(ParameterStore::from_bytes(&b[..b.len() - 3]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(ParameterStore::from_bytes(&bad).is_err());
    }
}
