//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SPTCKPT1"
//! version  u32      1
//! meta     u32 count, then count × (key: str, value: str)
//! tensors  u32 count, then count × tensor
//! tensor   name: str, trainable: u8 (0|1), rows: u32, cols: u32, rows·cols × f64
//! str      u32 byte length, UTF-8 bytes
//! ```
//!
//! Tensors are written in name order, so identical contents give identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use spectral_peft::Matrix;

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"SPTCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub trainable: bool,
    pub value: Matrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(format_err)? as usize;
    if len > 1 << 20 {
        return Err(HarnessError::Format(format!("string length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(format_err)?;
    String::from_utf8(buf).map_err(|_| HarnessError::Format("string is not UTF-8".into()))
}

fn format_err(e: std::io::Error) -> HarnessError {
    HarnessError::Format(format!("truncated or unreadable: {e}"))
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| HarnessError::Format(format!("missing metadata key {key:?}")))
    }

    pub fn insert(&mut self, name: &str, value: &Matrix<f64>, trainable: bool) {
        self.tensors.insert(
            name.to_string(),
            Tensor {
                trainable,
                value: value.clone(),
            },
        );
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to memory");
        out
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.meta.len() as u32)?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_u8(t.trainable as u8)?;
            w.write_u32::<LittleEndian>(t.value.rows() as u32)?;
            w.write_u32::<LittleEndian>(t.value.cols() as u32)?;
            for &v in t.value.as_slice() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(format_err)?;
        if &magic != MAGIC {
            return Err(HarnessError::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(format_err)?;
        if version != VERSION {
            return Err(HarnessError::Format(format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.read_u32::<LittleEndian>().map_err(format_err)? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.read_u32::<LittleEndian>().map_err(format_err)? {
            let name = read_str(r)?;
            let trainable = match r.read_u8().map_err(format_err)? {
                0 => false,
                1 => true,
                f => return Err(HarnessError::Format(format!("{name}: bad trainable flag {f}"))),
            };
            let rows = r.read_u32::<LittleEndian>().map_err(format_err)? as usize;
            let cols = r.read_u32::<LittleEndian>().map_err(format_err)? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|&l| l <= 1 << 28)
                .ok_or_else(|| HarnessError::Format(format!("{name}: implausible shape {rows}x{cols}")))?;
            let mut data = vec![0.0; len];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(format_err)?;
            let value = Matrix::from_vec(rows, cols, data)?;
            ck.tensors.insert(name, Tensor { trainable, value });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(format_err)? != 0 {
            return Err(HarnessError::Format("trailing bytes".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::read(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("kind".into(), "base".into());
        ck.insert("a", &Matrix::from_fn(2, 3, |i, j| i as f64 - 0.1 * j as f64), false);
        ck.insert("b", &Matrix::from_fn(1, 1, |_, _| f64::MIN_POSITIVE), true);
        ck
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::read(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read(&mut bad.as_slice()).is_err());
        assert!(Checkpoint::read(&mut &bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read(&mut extra.as_slice()).is_err());
    }
}
