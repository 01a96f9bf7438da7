//! Binary checkpoint format shared by every model type.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "THSCKPT\0"
//! version      u32      FORMAT_VERSION
//! header_len   u32      byte length of the header block
//! header       UTF-8    "key=value\n" lines (model config echo + metadata)
//! tensor_count u32
//! per tensor:
//!   name_len   u32, name (UTF-8)
//!   dtype      u8       1 = f64
//!   rank       u32
//!   extents    u64 × rank
//!   payload    f64 × numel, little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Parameters, Tensor};

pub const MAGIC: &[u8; 8] = b"THSCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(header: Vec<(String, String)>) -> Self {
        Checkpoint {
            header,
            tensors: Vec::new(),
        }
    }

    /// Appends every tensor of `params` under `prefix`.
    pub fn push_params<P: Parameters + ?Sized>(&mut self, prefix: &str, params: &P) {
        params.visit(&mut |name, t| {
            let full = if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            };
            self.tensors.push((full, t.clone()));
        });
    }

    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored payloads into `params` (matched by name under `prefix`).
    /// Every parameter must be present with an identical shape.
    pub fn fill_params<P: Parameters + ?Sized>(&self, prefix: &str, params: &mut P) -> Result<()> {
        let mut failure = None;
        params.visit_mut(&mut |name, t| {
            if failure.is_some() {
                return;
            }
            let full = if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            };
            match self.tensor(&full) {
                None => failure = Some(Error::Format(format!("checkpoint lacks tensor {full}"))),
                Some(src) if src.shape() != t.shape() => {
                    failure = Some(Error::Format(format!(
                        "tensor {full}: shape {:?} in checkpoint, {:?} expected",
                        src.shape(),
                        t.shape()
                    )))
                }
                Some(src) => {
                    let frozen = t.is_frozen();
                    t.set_frozen(false);
                    t.data_mut().copy_from_slice(src.data());
                    t.set_frozen(frozen);
                }
            }
        });
        failure.map_or(Ok(()), Err)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let mut header = String::new();
        for (k, v) in &self.header {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::Format(format!(
                    "header entry {k:?} not representable"
                )));
            }
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        write_u32(w, header.len())?;
        w.write_all(header.as_bytes())?;
        write_u32(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F64])?;
            write_u32(w, t.shape().len())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = read_u32(r)? as usize;
        let header_text = read_string(r, header_len)?;
        let mut header = Vec::new();
        for line in header_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = read_string(r, name_len)?;
            let mut dtype = [0u8];
            r.read_exact(&mut dtype).map_err(truncated)?;
            if dtype[0] != DTYPE_F64 {
                return Err(Error::Format(format!(
                    "tensor {name}: unknown dtype tag {}",
                    dtype[0]
                )));
            }
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(truncated)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw).map_err(truncated)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::param(shape, data)?));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        buf
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("length {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kv(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            Checkpoint::read_from(&mut &b"NOTACKPT"[..]),
            Err(Error::Format(_))
        ));
        let mut ck = Checkpoint::new(vec![kv("a", "1")]);
        ck.tensors
            .push(("w".into(), Tensor::param(vec![2], vec![1.0, 2.0]).unwrap()));
        let bytes = ck.to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::read_from(&mut &cut[..]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn layout_is_stable() {
        let mut ck = Checkpoint::new(vec![kv("k", "v")]);
        ck.tensors
            .push(("x".into(), Tensor::param(vec![1], vec![1.0]).unwrap()));
        let bytes = ck.to_bytes();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"THSCKPT\0");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&4u32.to_le_bytes());
        expected.extend_from_slice(b"k=v\n");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(b"x");
        expected.push(1);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shapes in proptest::collection::vec(proptest::collection::vec(0usize..4, 0..3), 0..4),
            seed in any::<u64>(),
            note in "[a-z]{0,8}",
        ) {
            let mut ck = Checkpoint::new(vec![kv("note", &note), kv("seed", &seed.to_string())]);
            let mut bits = seed | 1;
            for (i, s) in shapes.iter().enumerate() {
                let n: usize = s.iter().product();
                let data: Vec<f64> = (0..n).map(|_| {
                    bits ^= bits << 13; bits ^= bits >> 7; bits ^= bits << 17;
                    f64::from_bits(bits)
                }).collect();
                ck.tensors.push((format!("t{i}"), Tensor::param(s.clone(), data).unwrap()));
            }
            let back = Checkpoint::read_from(&mut &ck.to_bytes()[..]).unwrap();
            prop_assert_eq!(back.to_bytes(), ck.to_bytes());
            prop_assert_eq!(back.header, ck.header);
        }
    }
}
