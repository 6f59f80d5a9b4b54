//! Binary checkpoint container.
//!
//! Every pipeline stage writes its outputs (model parameters, dataset
//! tensors, scalar bookkeeping) into one file so later stages, re-runs, and
//! post-hoc inspection all read the same bytes.  The format is a flat named
//! map of f64 arrays:
//!
//! ```text
//! magic  b"GSCKPT1"                      7 bytes
//! version u8 = 1
//! count  u32                            number of entries
//! entry* (name_len u32, name utf-8,
//!         ndim u32, dims u64 * ndim,
//!         offset u64, len u64)          offset/len in f64 elements
//! payload_len u64                       total f64 count
//! payload f64 * payload_len             little-endian
//! ```
//!
//! Integers are little-endian.  Entries are sorted by name, offsets are
//! contiguous, and writing the same map twice produces identical bytes, so
//! byte-level file comparison is a valid reproducibility check.

use crate::error::{HarnessError, Result};
use gsc_core::nn::NamedParams;
use gsc_core::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 7] = b"GSCKPT1";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// An in-memory checkpoint: a sorted map from entry name to a shaped f64
/// array.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Store a raw array.  The shape must describe exactly `data.len()`
    /// elements and every value must be finite (a checkpoint holding NaN
    /// could never be restored into a tensor).
    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(HarnessError::Format {
                offset: 0,
                msg: format!(
                    "entry `{name}`: shape {shape:?} describes {expect} elements, got {}",
                    data.len()
                ),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(HarnessError::Format {
                offset: 0,
                msg: format!("entry `{name}`: non-finite value {bad}"),
            });
        }
        self.entries.insert(
            name.to_string(),
            Entry {
                shape: shape.to_vec(),
                data,
            },
        );
        Ok(())
    }

    /// Store a tensor's current values under `name`.
    pub fn insert_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.insert(name, t.shape(), t.to_vec())
    }

    /// Store every parameter of a model under its parameter name.
    pub fn insert_params(&mut self, params: &NamedParams) -> Result<()> {
        for (name, t) in params {
            self.insert_tensor(name, t)?;
        }
        Ok(())
    }

    /// Store a single number as a rank-1 entry of length 1.
    pub fn insert_scalar(&mut self, name: &str, value: f64) -> Result<()> {
        self.insert(name, &[1], vec![value])
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries
            .get(name)
            .map(|e| (e.shape.as_slice(), e.data.as_slice()))
    }

    /// Fetch an entry, erroring with its name when absent.
    pub fn require(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.get(name).ok_or_else(|| HarnessError::Format {
            offset: 0,
            msg: format!("checkpoint has no entry `{name}`"),
        })
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        let (shape, data) = self.require(name)?;
        if data.len() != 1 {
            return Err(HarnessError::Format {
                offset: 0,
                msg: format!("entry `{name}` has shape {shape:?}, expected a scalar"),
            });
        }
        Ok(data[0])
    }

    /// Copy stored values back into a model's parameters in place.  Every
    /// parameter must have an entry of matching shape; errors name the
    /// offending parameter.
    pub fn restore_params(&self, params: &NamedParams) -> Result<()> {
        for (name, t) in params {
            let (shape, data) = self.require(name)?;
            if shape != t.shape() {
                return Err(HarnessError::Format {
                    offset: 0,
                    msg: format!(
                        "entry `{name}` has shape {shape:?} but the parameter is {:?}",
                        t.shape()
                    ),
                });
            }
            t.set_data(data.to_vec())?;
        }
        Ok(())
    }

    /// Serialise to bytes.  Deterministic: same map, same bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(e.data.len() as u64).to_le_bytes());
            offset += e.data.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for e in self.entries.values() {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decode from bytes, reporting the byte offset of any malformation.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor {
            bytes,
            pos: 0,
        };
        let magic = cur.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(cur.fail_at(0, "bad magic; not a checkpoint file"));
        }
        let version = cur.take(1, "version")?[0];
        if version != VERSION {
            return Err(cur.fail_at(cur.pos - 1, &format!("unsupported version {version}")));
        }
        let count = cur.u32("entry count")? as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u32("name length")? as usize;
            let name_at = cur.pos;
            let name_bytes = cur.take(name_len, "entry name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| cur.fail_at(name_at, "entry name is not UTF-8"))?
                .to_string();
            let ndim = cur.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64("dimension")? as usize);
            }
            let offset = cur.u64("entry offset")?;
            let len = cur.u64("entry length")?;
            let expect: usize = shape.iter().product();
            if expect as u64 != len {
                return Err(cur.fail_at(
                    name_at,
                    &format!("entry `{name}`: shape {shape:?} disagrees with length {len}"),
                ));
            }
            headers.push((name, shape, offset, len));
        }
        let payload_len = cur.u64("payload length")?;
        let payload_at = cur.pos;
        let payload_bytes = cur.take(payload_len as usize * 8, "payload")?;
        if cur.pos != bytes.len() {
            return Err(cur.fail_at(cur.pos, "trailing bytes after payload"));
        }
        let mut payload = Vec::with_capacity(payload_len as usize);
        for chunk in payload_bytes.chunks_exact(8) {
            payload.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let mut ck = Checkpoint::new();
        for (name, shape, offset, len) in headers {
            let end = offset.checked_add(len).filter(|e| *e <= payload_len);
            let end = match end {
                Some(e) => e,
                None => {
                    return Err(cur.fail_at(
                        payload_at,
                        &format!("entry `{name}` extends past the payload"),
                    ))
                }
            };
            if ck.contains(&name) {
                return Err(cur.fail_at(payload_at, &format!("duplicate entry `{name}`")));
            }
            let data = payload[offset as usize..end as usize].to_vec();
            ck.insert(&name, &shape, data)?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(HarnessError::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn fail_at(&self, offset: usize, msg: &str) -> HarnessError {
        HarnessError::Format {
            offset: offset as u64,
            msg: msg.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trips_through_bytes_and_disk() {
        let mut ck = Checkpoint::new();
        ck.insert("b/weights", &[2, 3], vec![1.0, -2.5, 3.0, 0.0, 5.5, -6.0])
            .unwrap();
        ck.insert("a/bias", &[3], vec![0.25, 0.5, 0.75]).unwrap();
        ck.insert_scalar("epoch", 42.0).unwrap();

        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        // Serialisation is deterministic.
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn restores_model_parameters_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = gsc_core::nn::DenseLayer::new(3, 2, &mut rng);
        let mut params = NamedParams::new();
        layer.params("dense", &mut params);

        let mut ck = Checkpoint::new();
        ck.insert_params(&params).unwrap();

        // Scramble, then restore.
        let originals: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.to_vec()).collect();
        for (_, t) in &params {
            t.set_data(vec![9.0; t.len()]).unwrap();
        }
        ck.restore_params(&params).unwrap();
        for ((_, t), orig) in params.iter().zip(&originals) {
            assert_eq!(&t.to_vec(), orig);
        }
    }

    #[test]
    fn restore_names_the_missing_parameter() {
        let ck = Checkpoint::new();
        let params = vec![("net.w".to_string(), Tensor::zeros(&[2]))];
        let err = ck.restore_params(&params).unwrap_err();
        assert!(err.to_string().contains("net.w"), "{err}");
    }

    #[test]
    fn restore_rejects_shape_mismatch() {
        let mut ck = Checkpoint::new();
        ck.insert("net.w", &[3], vec![1.0, 2.0, 3.0]).unwrap();
        let params = vec![("net.w".to_string(), Tensor::zeros(&[2]))];
        let err = ck.restore_params(&params).unwrap_err();
        assert!(err.to_string().contains("net.w"), "{err}");
    }

    #[test]
    fn truncation_errors_carry_an_offset() {
        let mut ck = Checkpoint::new();
        ck.insert("x", &[2], vec![1.0, 2.0]).unwrap();
        let bytes = ck.to_bytes();
        for cut in [3, 8, 12, bytes.len() - 4] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            match err {
                HarnessError::Format { offset, .. } => {
                    assert!(offset <= cut as u64, "offset {offset} past cut {cut}")
                }
                other => panic!("expected Format error, got {other}"),
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_shape_lies() {
        let err = Checkpoint::from_bytes(b"NOTACKPT").unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut ck = Checkpoint::new();
        assert!(ck.insert("x", &[3], vec![1.0, 2.0]).is_err());
        assert!(ck.insert("x", &[1], vec![f64::NAN]).is_err());
    }
}
