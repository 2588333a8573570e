//! Versioned binary container of named metadata strings and named `f64`
//! arrays, with a plain-text manifest beside it.
//!
//! Layout, all integers little-endian:
//! `b"SOCMARCH"`, `u32` version, `u32` entry count, then per entry two
//! length-prefixed UTF-8 strings; `u32` array count, then per array a
//! length-prefixed name, `u64` rows, `u64` cols and `rows * cols` `f64`
//! values in row-major order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use socm_core::linalg::Matrix;

use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 8] = b"SOCMARCH";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Matrix)>,
}

impl Archive {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    /// Floats are stored in their shortest exact text form.
    pub fn set_f64(&mut self, key: &str, value: f64) {
        self.set(key, format!("{value:?}"));
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.arrays.push((name.into(), m));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn array(&self, name: &str) -> Option<&Matrix> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Arrays named `{prefix}.0`, `{prefix}.1`, ... in order.
    pub fn indexed(&self, prefix: &str) -> Vec<Matrix> {
        let mut out = Vec::new();
        while let Some(m) = self.array(&format!("{prefix}.{}", out.len())) {
            out.push(m.clone());
        }
        out
    }

    pub fn push_indexed(&mut self, prefix: &str, ms: &[Matrix]) {
        for (i, m) in ms.iter().enumerate() {
            self.push(format!("{prefix}.{i}"), m.clone());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut b, k);
            put_str(&mut b, v);
        }
        b.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, m) in &self.arrays {
            put_str(&mut b, name);
            b.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            b.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let mut a = Archive::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            a.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows.checked_mul(cols).ok_or("array too large")?;
            let raw = r.take(n.checked_mul(8).ok_or("array too large")?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            a.arrays.push((name, Matrix::from_vec(rows, cols, data)));
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(a)
    }

    /// Text listing of metadata and array shapes.
    pub fn manifest(&self) -> String {
        let mut s = format!("format SOCMARCH v{VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (name, m) in &self.arrays {
            let _ = writeln!(s, "array {name} {}x{}", m.rows(), m.cols());
        }
        s
    }

    /// Write the archive and `<path>.manifest.txt`.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(LabError::io(path))?;
        let mpath = manifest_path(path);
        std::fs::write(&mpath, self.manifest()).map_err(LabError::io(mpath))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(LabError::io(path))?;
        Archive::from_bytes(&bytes).map_err(|reason| LabError::Archive {
            path: path.to_path_buf(),
            reason,
        })
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.txt");
    PathBuf::from(s)
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or("truncated")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
}
