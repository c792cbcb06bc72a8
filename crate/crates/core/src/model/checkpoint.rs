//! Checkpoint file: magic `BSDGCKPT`, u32 header length, JSON header (model
//! spec, seed, step, tensor table), the parameters as little-endian f32, and
//! a CRC32 over header and parameter bytes.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Partition, Tensor};

const MAGIC: &[u8; 8] = b"BSDGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub seed: u64,
    pub step: u64,
    pub params: ParamSet<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    partition: Partition,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    spec: ModelSpec,
    seed: u64,
    step: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: VERSION,
            spec: self.spec.clone(),
            seed: self.seed,
            step: self.step,
            tensors: self
                .params
                .iter()
                .map(|(name, partition, t)| TensorEntry {
                    name: name.to_string(),
                    partition,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.params.numel(&Partition::ALL) + 4);
        out.extend_from_slice(MAGIC);
        let mut buf = [0u8; 4];
        LittleEndian::write_u32(&mut buf, json.len() as u32);
        out.extend_from_slice(&buf);
        let body = out.len();
        out.extend_from_slice(&json);
        for (_, _, t) in self.params.iter() {
            for &v in t.data() {
                LittleEndian::write_f32(&mut buf, v);
                out.extend_from_slice(&buf);
            }
        }
        LittleEndian::write_u32(&mut buf, crc32fast::hash(&out[body..]));
        out.extend_from_slice(&buf);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let perr = |offset: usize, msg: &str| Error::Parse {
            offset: offset as u64,
            msg: msg.to_string(),
        };
        if bytes.len() < 16 {
            return Err(perr(bytes.len(), "file shorter than a checkpoint header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(perr(0, "expected magic \"BSDGCKPT\""));
        }
        let hlen = LittleEndian::read_u32(&bytes[8..12]) as usize;
        let body_end = bytes.len() - 4;
        if 12 + hlen > body_end {
            return Err(perr(8, "header length exceeds file size"));
        }
        let stored = LittleEndian::read_u32(&bytes[body_end..]);
        let computed = crc32fast::hash(&bytes[12..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + hlen])?;
        if header.version != VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: VERSION,
            });
        }
        let mut pos = 12 + hlen;
        let mut params = ParamSet::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if pos + 4 * n > body_end {
                return Err(perr(pos, "parameter blob ends early"));
            }
            let data: Vec<f32> = bytes[pos..pos + 4 * n]
                .chunks_exact(4)
                .map(LittleEndian::read_f32)
                .collect();
            pos += 4 * n;
            params.insert(e.name, e.partition, Tensor::new(e.shape, data)?)?;
        }
        if pos != body_end {
            return Err(perr(pos, "trailing bytes after parameter blob"));
        }
        Ok(Checkpoint {
            spec: header.spec,
            seed: header.seed,
            step: header.step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
