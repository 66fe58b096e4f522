//! Named parameter collections and their on-disk format.
//!
//! File layout: magic `FTAN`, u32 version (= 1), u32 tensor count, then per
//! tensor a u16 name length, the UTF-8 name, u8 ndim, u32 dims, and the
//! little-endian f32 data.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 4] = b"FTAN";
const VERSION: u32 = 1;

/// Gradients keyed by parameter name.
pub type GradMap = IndexMap<String, Tensor<f32>>;

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
}

/// Ordered collection of named learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    tensors: IndexMap<String, Tensor<f32>>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        assert!(t.all_finite(), "non-finite values in parameter {name}");
        let prev = self.tensors.insert(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor<f32> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<f32> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.tensors.iter_mut()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ParamsError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            assert!(nb.len() <= u16::MAX as usize);
            f.write_all(&(nb.len() as u16).to_le_bytes())?;
            f.write_all(nb)?;
            assert!(t.dims().len() <= u8::MAX as usize);
            f.write_all(&[t.dims().len() as u8])?;
            for &d in t.dims() {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ParamsError> {
        let bytes = std::fs::read(path)?;
        let mut r = Cursor { buf: &bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(ParamsError::Corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(ParamsError::UnsupportedVersion(version));
        }
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut out = Self::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| ParamsError::Corrupt("invalid parameter name".into()))?;
            let ndim = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if out.tensors.contains_key(&name) {
                return Err(ParamsError::Corrupt(format!("duplicate tensor {name}")));
            }
            out.tensors.insert(name, Tensor::new(dims, data));
        }
        if r.pos != bytes.len() {
            return Err(ParamsError::Corrupt("trailing bytes".into()));
        }
        Ok(out)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ParamsError> {
        if self.pos + n > self.buf.len() {
            return Err(ParamsError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Dummy Read import guard: keep the trait in scope for BufWriter generics.
#[allow(unused)]
fn _assert_read(_r: &dyn Read) {}
