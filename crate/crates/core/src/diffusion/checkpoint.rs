//! Denoiser checkpoints: a JSON header followed by raw little-endian `f32` data.

use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::unet::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, Tensor};

pub const MAGIC: &[u8; 4] = b"MRGC";
pub const VERSION: u32 = 1;

/// Network weights plus everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserCheckpoint {
    pub config: UNetConfig,
    pub schedule: NoiseSchedule,
    pub params: Vec<Tensor<f32>>,
    pub step: u64,
    pub optimizer: Option<AdamState<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    schedule: NoiseSchedule,
    step: u64,
    parameters: Vec<DirEntry>,
    #[serde(default)]
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: u64,
}

/// Moment buffers follow the parameters: all first moments, then all second
/// moments, each in parameter order.
#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
    offset: u64,
}

impl DenoiserCheckpoint {
    /// Freshly initialized weights.
    pub fn init(config: UNetConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        schedule.validate()?;
        let net = UNet::new(config.clone())?;
        let params = net.init_params(seed)?;
        Ok(Self {
            config,
            schedule,
            params,
            step: 0,
            optimizer: None,
        })
    }

    pub fn network(&self) -> Result<UNet> {
        let net = UNet::new(self.config.clone())?;
        net.check_params(&self.params)?;
        Ok(net)
    }

    /// Same weights and config; used to compare checkpoints independently of
    /// optimizer state.
    pub fn weights_bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.bit_eq(b))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let net = self.network()?;
        let mut parameters = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (spec, p) in net.param_specs().iter().zip(&self.params) {
            parameters.push(DirEntry {
                name: spec.name.clone(),
                shape: p.shape().to_vec(),
                offset,
            });
            offset += 4 * p.numel() as u64;
        }
        let optimizer = self.optimizer.as_ref().map(|o| OptimizerHeader {
            config: o.config,
            step: o.step,
            offset,
        });
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            step: self.step,
            parameters,
            optimizer,
        })?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |t: &Tensor<f32>| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        self.params.iter().for_each(&mut put);
        if let Some(o) = &self.optimizer {
            o.m.iter().for_each(&mut put);
            o.v.iter().for_each(&mut put);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut cur, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(MAGIC).into(),
                found: String::from_utf8_lossy(&magic).into(),
            });
        }
        let version = read_u32(&mut cur, "version")?;
        if version != VERSION {
            return Err(Error::Version {
                expected: VERSION,
                found: version,
            });
        }
        let len = read_u32(&mut cur, "header length")? as usize;
        let mut header = vec![0u8; len];
        read_exact(&mut cur, &mut header, "header")?;
        let header: Header = serde_json::from_slice(&header)?;
        header.schedule.validate()?;
        let net = UNet::new(header.config.clone())?;

        let data = &bytes[cur.position() as usize..];
        let read_tensor = |offset: u64, shape: &[usize], what: &str| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            let start = offset as usize;
            let end = start
                .checked_add(4 * n)
                .filter(|&e| e <= data.len())
                .ok_or_else(|| Error::Truncated(format!("checkpoint data for {what}")))?;
            let values = data[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
                .collect();
            Tensor::from_vec(shape, values)
        };

        let specs = net.param_specs();
        if header.parameters.len() != specs.len() {
            return Err(Error::Malformed(format!(
                "checkpoint lists {} parameters, config implies {}",
                header.parameters.len(),
                specs.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        let mut end = 0u64;
        for (entry, spec) in header.parameters.iter().zip(specs) {
            if entry.name != spec.name || entry.shape != spec.shape {
                return Err(Error::Malformed(format!(
                    "checkpoint parameter {} {:?} does not match expected {} {:?}",
                    entry.name, entry.shape, spec.name, spec.shape
                )));
            }
            params.push(read_tensor(entry.offset, &entry.shape, &entry.name)?);
            end = end.max(entry.offset + 4 * spec.shape.iter().product::<usize>() as u64);
        }

        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let mut offset = o.offset;
                let mut moments = || -> Result<Vec<Tensor<f32>>> {
                    specs
                        .iter()
                        .map(|s| {
                            let t = read_tensor(offset, &s.shape, "optimizer moments")?;
                            offset += 4 * t.numel() as u64;
                            Ok(t)
                        })
                        .collect()
                };
                let m = moments()?;
                let v = moments()?;
                end = offset;
                Some(AdamState {
                    config: o.config,
                    step: o.step,
                    m,
                    v,
                })
            }
        };
        if end as usize != data.len() {
            return Err(Error::Malformed(format!(
                "checkpoint has {} trailing bytes",
                data.len() as i64 - end as i64
            )));
        }
        Ok(Self {
            config: header.config,
            schedule: header.schedule,
            params,
            step: header.step,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        // write then rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn read_exact(cur: &mut Cursor<&[u8]>, buf: &mut [u8], what: &str) -> Result<()> {
    cur.read_exact(buf)
        .map_err(|_| Error::Truncated(format!("checkpoint {what}")))
}

fn read_u32(cur: &mut Cursor<&[u8]>, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
