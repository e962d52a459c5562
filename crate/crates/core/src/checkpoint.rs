//! Binary checkpoint format.
//!
//! ```text
//! "ULRN1\n"
//! repeated: name_len u32 | name bytes | rank u32 | dims u32 × rank | f32 payload
//! crc32 u32 over every preceding byte
//! ```
//! All integers and floats are little-endian. Payloads are stored as `f32`,
//! so values round to single precision on save.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"ULRN1\n";

/// Ordered named tensors, as persisted on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(params: &ParameterSet) -> Self {
        Self {
            tensors: params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn to_params(&self) -> Result<ParameterSet> {
        let mut ps = ParameterSet::new();
        for (name, t) in &self.tensors {
            ps.insert(name.clone(), t.clone())?;
        }
        Ok(ps)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        for (name, t) in &self.tensors {
            let len = u32::try_from(name.len())
                .map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Contract(format!("dimension {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(Error::Format {
                offset: bytes.len(),
                msg: "file too short for a checkpoint".into(),
            });
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad checkpoint magic".into(),
            });
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return Err(Error::Format {
                offset: body_end,
                msg: format!("crc mismatch: stored {stored:08x}, computed {actual:08x}"),
            });
        }

        let mut r = Reader {
            bytes: &bytes[..body_end],
            pos: MAGIC.len(),
        };
        let mut tensors = Vec::new();
        while r.pos < body_end {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
                offset: r.pos - name_len,
                msg: "tensor name is not UTF-8".into(),
            })?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let at = r.pos;
            let payload = r.take(n * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Format {
                offset: at,
                msg: e.to_string(),
            })?;
            tensors.push((name, t));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated: wanted {n} bytes, {} remain", self.bytes.len() - self.pos),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                ("l0.w".into(), Tensor::from_rows(&[vec![0.1, -2.5], vec![3.0, 1e-3]])),
                ("l0.b".into(), Tensor::from_rows(&[vec![0.0, 1.0 / 3.0]])),
            ],
        }
    }

    #[test]
    fn resave_is_byte_identical() {
        let bytes = sample().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for ((n0, a), (n1, b)) in sample().tensors.iter().zip(&back.tensors) {
            assert_eq!(n0, n1);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-7 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[12] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { .. })));
        let mut bad_magic = sample().to_bytes().unwrap();
        bad_magic[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad_magic),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(Checkpoint::from_bytes(b"ULRN1").is_err());
    }
}
