//! Binary checkpoint holding both networks.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   8 bytes  "GSCKPT\r\n"
//! version u32
//! meta    u32 length + UTF-8 JSON (architecture, counts, Gabor triples)
//! count   u32
//! tensor* u32 name length, name, u32 rank, u32 dims..., f32 payload
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gabor::GaborParams;
use crate::network::{MultiEpochNet, SingleEpochArch, SingleEpochNet};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GSCKPT\r\n";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedKernel {
    pub bank: String,
    pub index: usize,
    #[serde(flatten)]
    pub params: GaborParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: SingleEpochArch,
    /// Trainable scalar count of the single-epoch network; checked on load.
    pub single_param_count: usize,
    pub has_multi: bool,
    /// Readable copy of the Gabor triples (the tensors are authoritative).
    pub gabor_kernels: Vec<NamedKernel>,
    #[serde(default)]
    pub notes: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub single: SingleEpochNet<f32>,
    pub multi: Option<MultiEpochNet<f32>>,
    /// Free-form provenance (seed, iteration, validation kappa, ...).
    pub notes: serde_json::Map<String, serde_json::Value>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint("value exceeds u32".into()))?;
    buf.extend(v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn new(single: SingleEpochNet<f32>) -> Self {
        Checkpoint {
            single,
            multi: None,
            notes: Default::default(),
        }
    }

    fn meta(&self) -> CheckpointMeta {
        let gabor_kernels = self
            .single
            .banks()
            .map(|banks| {
                banks
                    .iter()
                    .flat_map(|b| {
                        b.kernels.iter().enumerate().map(|(index, k)| NamedKernel {
                            bank: b.modality.name().to_lowercase(),
                            index,
                            params: *k,
                        })
                    })
                    .collect()
            })
            .unwrap_or_default();
        CheckpointMeta {
            arch: self.single.arch.clone(),
            single_param_count: self.single.arch.param_count(),
            has_multi: self.multi.is_some(),
            gabor_kernels,
            notes: self.notes.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend(MAGIC);
        buf.extend(VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta())?;
        put_u32(&mut buf, meta.len())?;
        buf.extend(meta);
        let sets: Vec<&ParamSet<f32>> = std::iter::once(&self.single.params)
            .chain(self.multi.as_ref().map(|m| &m.params))
            .collect();
        put_u32(&mut buf, sets.iter().map(|s| s.len()).sum())?;
        for set in sets {
            for (name, t) in set.iter() {
                put_u32(&mut buf, name.len())?;
                buf.extend(name.as_bytes());
                put_u32(&mut buf, t.shape().len())?;
                for &d in t.shape() {
                    put_u32(&mut buf, d)?;
                }
                for v in t.data() {
                    buf.extend(v.to_le_bytes());
                }
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        meta.arch.validate()?;
        if meta.arch.param_count() != meta.single_param_count {
            return Err(Error::Checkpoint(format!(
                "parameter count drift: architecture implies {}, checkpoint records {}",
                meta.arch.param_count(),
                meta.single_param_count
            )));
        }
        let count = r.u32()? as usize;
        let mut all = ParamSet::<f32>::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("tensor `{name}` holds non-finite values")));
            }
            all.insert(name, Tensor::from_vec(&shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }

        let single = SingleEpochNet {
            params: take_layout(&all, meta.arch.layout().into_iter().map(|(n, s, _)| (n, s)))?,
            arch: meta.arch,
        };
        let multi = if meta.has_multi {
            Some(MultiEpochNet {
                params: take_layout(&all, MultiEpochNet::layout())?,
            })
        } else {
            None
        };
        let expected = single.params.len() + multi.as_ref().map_or(0, |m| m.params.len());
        if expected != all.len() {
            return Err(Error::Checkpoint(format!("{} tensors stored, {expected} expected", all.len())));
        }
        Ok(Checkpoint {
            single,
            multi,
            notes: meta.notes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn take_layout(all: &ParamSet<f32>, layout: impl IntoIterator<Item = (String, Vec<usize>)>) -> Result<ParamSet<f32>> {
    let mut out = ParamSet::new();
    for (name, shape) in layout {
        let t = all.get(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
        }
        out.insert(name, t.clone())?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::FrontEnd;

    fn small() -> SingleEpochArch {
        SingleEpochArch {
            front_end: FrontEnd::Gabor,
            eeg_kernels: 3,
            eog_kernels: 2,
            mix_filters: 4,
            block_filters: vec![4, 4],
            conv_kernel: 3,
            pool: 3,
            hidden: vec![6],
            dropout: 0.5,
        }
    }

    #[test]
    fn round_trip() {
        let mut ck = Checkpoint::new(SingleEpochNet::init(small(), 3).unwrap());
        ck.multi = Some(MultiEpochNet::init(4).unwrap());
        ck.notes.insert("seed".into(), 3.into());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corruption_is_detected() {
        let ck = Checkpoint::new(SingleEpochNet::init(small(), 3).unwrap());
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }

    #[test]
    fn gabor_triples_are_listed() {
        let ck = Checkpoint::new(SingleEpochNet::init(small(), 3).unwrap());
        assert_eq!(ck.meta().gabor_kernels.len(), 5);
        assert_eq!(ck.meta().gabor_kernels[3].bank, "eog");
    }
}
