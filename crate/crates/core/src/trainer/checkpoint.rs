//! Binary checkpoint: `LWCKPT01`, a u64-LE length and JSON header, the
//! little-endian f32 payload, then a CRC-64 of everything before it.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::ScheduleState;
use crate::params::{GradStore, ParameterStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LWCKPT01";
pub const FORMAT_VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub schedule: ScheduleState,
    pub vocab: Option<Vocab>,
    pub params: ParameterStore<f32>,
    pub optimizer: Option<Adam<f32>>,
    pub rng: Option<ChaCha8Rng>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    path: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    t: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    schedule: ScheduleState,
    vocab: Option<Vocab>,
    tensors: Vec<TensorEntry>,
    /// When present, first and second moments follow the parameters in the
    /// payload, in the same tensor order.
    optimizer: Option<OptimizerHeader>,
    rng: Option<ChaCha8Rng>,
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            vocab: self.vocab.clone(),
            tensors: self
                .params
                .iter()
                .map(|(_, path, t)| TensorEntry {
                    path: path.to_string(),
                    shape: t.shape(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader { config: o.config, t: o.t }),
            rng: self.rng.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 24 + 12 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.params.iter() {
            put_tensor(&mut out, t);
        }
        if let Some(opt) = &self.optimizer {
            for store in [&opt.m, &opt.v] {
                for id in self.params.ids() {
                    put_tensor(&mut out, store.get(id));
                }
            }
        }
        let sum = CRC64.checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    /// Parse a checkpoint. The checksum is verified before anything else,
    /// so a truncated or altered file never yields a partial result.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 16 {
            return Err(Error::Checksum);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if CRC64.checksum(body) != stored {
            return Err(Error::Checksum);
        }
        if &body[..8] != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes"));
        let hlen = usize::try_from(hlen).map_err(|_| Error::Corrupt("header length overflow".into()))?;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Corrupt("header length exceeds file".into()))?;
        let probe: serde_json::Value = serde_json::from_slice(&body[16..hend])?;
        let version = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(probe)?;
        header.config.validate()?;
        let mut payload = &body[hend..];
        let mut take = |shape: [usize; 2]| -> Result<Tensor<f32>> {
            let n = shape[0]
                .checked_mul(shape[1])
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Corrupt("tensor shape overflow".into()))?;
            if payload.len() < n {
                return Err(Error::Corrupt("payload shorter than header declares".into()));
            }
            let (head, rest) = payload.split_at(n);
            payload = rest;
            let data = head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Ok(Tensor::from_vec(shape[0], shape[1], data))
        };
        let mut params = ParameterStore::new();
        for e in &header.tensors {
            let t = take(e.shape)?;
            params
                .insert(e.path.clone(), t)
                .map_err(|_| Error::Corrupt(format!("duplicate parameter path {}", e.path)))?;
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let mut m = GradStore::zeros_like(&params);
                let mut v = GradStore::zeros_like(&params);
                for store in [&mut m, &mut v] {
                    for (i, e) in header.tensors.iter().enumerate() {
                        let id = params.id(&e.path).expect("just inserted");
                        debug_assert_eq!(id.index(), i);
                        *store.get_mut(id) = take(e.shape)?;
                    }
                }
                Some(Adam {
                    config: o.config,
                    t: o.t,
                    m,
                    v,
                })
            }
            None => None,
        };
        if !payload.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Self {
            config: header.config,
            schedule: header.schedule,
            vocab: header.vocab,
            params,
            optimizer,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    checkpoint.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
