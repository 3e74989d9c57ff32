//! Flat registry of named parameter arrays and its on-disk container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "XVCKPT\0\0"
//! version      u32       currently 1
//! header_len   u32       length of the JSON header
//! header       bytes     UTF-8 JSON (architecture tag, configs, phase info)
//! count        u32       number of arrays
//! repeated count times:
//!   name_len   u32
//!   name       bytes     UTF-8 canonical parameter name
//!   rows       u32
//!   cols       u32
//!   values     rows*cols f64, row-major
//! ```
//!
//! Arrays are written in name order, so identical stores produce identical bytes.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XVCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named dense parameters, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: BTreeMap<String, Matrix<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<F>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<F>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix<F>> {
        self.params.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix<F>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.values().map(Matrix::len).sum()
    }

    /// Copies every entry of `other` whose name starts with `prefix`.
    pub fn merge_prefix(&mut self, other: &ParamStore<F>, prefix: &str) {
        for (name, value) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.insert(name, value.clone());
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Truncated-normal (σ = 0.02, cut at 2σ) weights. The stream depends only on
    /// `seed` and `name`, so adding or removing other parameters never changes
    /// this one's initial value.
    pub fn init_trunc_normal(&mut self, seed: u64, name: &str, rows: usize, cols: usize) {
        let mut r = rng::stream(seed, &format!("{}/{name}", rng::INIT));
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        let data = (0..rows * cols)
            .map(|_| loop {
                let v: f64 = normal.sample(&mut r);
                if v.abs() <= 0.04 {
                    break F::of(v);
                }
            })
            .collect();
        self.insert(name, Matrix::from_vec(rows, cols, data).expect("sized"));
    }

    /// Uniform `[-limit, limit]` weights from the parameter's own stream.
    pub fn init_uniform(&mut self, seed: u64, name: &str, rows: usize, cols: usize, limit: f64) {
        let mut r = rng::stream(seed, &format!("{}/{name}", rng::INIT));
        let data = (0..rows * cols).map(|_| F::of(r.random_range(-limit..=limit))).collect();
        self.insert(name, Matrix::from_vec(rows, cols, data).expect("sized"));
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Matrix::zeros(rows, cols));
    }

    pub fn init_ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Matrix::filled(rows, cols, F::one()));
    }

    pub fn to_bytes(&self, header: &serde_json::Value) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        out.write_u32::<LittleEndian>(len_u32(header.len())?)?;
        out.extend_from_slice(&header);
        out.write_u32::<LittleEndian>(len_u32(self.params.len())?)?;
        for (name, m) in &self.params {
            out.write_u32::<LittleEndian>(len_u32(name.len())?)?;
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(len_u32(m.rows())?)?;
            out.write_u32::<LittleEndian>(len_u32(m.cols())?)?;
            for &v in m.as_slice() {
                out.write_f64::<LittleEndian>(v.to_f64_lossy())?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(serde_json::Value, Self)> {
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint container"));
        }
        let version = cur.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported container version {version}")));
        }
        let header_len = cur.read_u32::<LittleEndian>()? as usize;
        let mut header = vec![0u8; header_len];
        cur.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        let header: serde_json::Value = serde_json::from_slice(&header)?;
        let count = cur.read_u32::<LittleEndian>()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = cur.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
            let rows = cur.read_u32::<LittleEndian>()? as usize;
            let cols = cur.read_u32::<LittleEndian>()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(F::of(cur.read_f64::<LittleEndian>().map_err(|_| bad("truncated values"))?));
            }
            store.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        Ok((header, store))
    }

    pub fn save(&self, path: &Path, header: &serde_json::Value) -> Result<()> {
        crate::util::write_atomic(path, &self.to_bytes(header)?)
    }

    pub fn load(path: &Path) -> Result<(serde_json::Value, Self)> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Shape(format!("length {n} exceeds u32")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_keyed() {
        let mut a = ParamStore::<f64>::new();
        a.init_trunc_normal(9, "x", 3, 4);
        let mut b = ParamStore::<f64>::new();
        b.init_trunc_normal(9, "other", 2, 2);
        b.init_trunc_normal(9, "x", 3, 4);
        assert_eq!(a.get("x"), b.get("x"));
        assert!(a.get("x").unwrap().as_slice().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn container_round_trip_is_lossless() {
        let mut s = ParamStore::<f64>::new();
        s.init_trunc_normal(1, "enc.w", 3, 5);
        s.insert("bias", Matrix::row_vector(vec![1.0 / 3.0, -0.0, 1e-300]));
        let header = serde_json::json!({"arch": "cvm"});
        let bytes = s.to_bytes(&header).unwrap();
        let (h, back) = ParamStore::<f64>::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(&header).unwrap(), bytes);
    }

    #[test]
    fn rejects_foreign_bytes() {
        assert!(ParamStore::<f32>::from_bytes(b"not a checkpoint", Path::new("x")).is_err());
    }
}
