//! Checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "TRJCKPT\0"
//! 8       4     format version, u32 LE
//! 12      8     header length H, u64 LE
//! 20      H     UTF-8 JSON header
//! 20+H    ...   tensor payload, f32 LE, in header table order
//! ```
//!
//! The header records the architecture, the conditioning channel order, the
//! schedule, the training step, coordinate statistics and a table of
//! `{name, shape, offset}` entries (offset in elements). Optimizer moments,
//! when present, are stored as extra tensors named `adam.m/<param>` and
//! `adam.v/<param>`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleSpec;
use crate::error::{Error, Result};
use crate::net::{ArchConfig, ModelParams};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::training::TrainConfig;
use crate::traj::{CoordStats, BASE_CHANNELS, CHANNEL_ORDER_VERSION};

pub const MAGIC: &[u8; 8] = b"TRJCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    channel_order_version: u32,
    channels: Vec<(String, usize)>,
    schedule: ScheduleSpec,
    train_step: usize,
    coords: Option<CoordStats>,
    train_config: Option<TrainConfig>,
    optimizer: Option<(AdamConfig, u64)>,
    tensors: Vec<TensorEntry>,
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub schedule: ScheduleSpec,
    pub train_step: usize,
    pub coords: Option<CoordStats>,
    pub train_config: Option<TrainConfig>,
    pub optimizer: Option<Adam<f32>>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named: Vec<(String, &Tensor<f32>)> = self
            .params
            .names()
            .iter()
            .cloned()
            .zip(self.params.tensors())
            .collect();
        if let Some(opt) = &self.optimizer {
            for (n, m) in self.params.names().iter().zip(&opt.m) {
                named.push((format!("adam.m/{n}"), m));
            }
            for (n, v) in self.params.names().iter().zip(&opt.v) {
                named.push((format!("adam.v/{n}"), v));
            }
        }
        let mut offset = 0;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            arch: self.params.config().clone(),
            channel_order_version: CHANNEL_ORDER_VERSION,
            channels: BASE_CHANNELS.iter().map(|(n, w)| (n.to_string(), *w)).collect(),
            schedule: self.schedule,
            train_step: self.train_step,
            coords: self.coords,
            train_config: self.train_config.clone(),
            optimizer: self.optimizer.as_ref().map(|o| (o.config, o.step)),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("partial");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for (_, t) in &named {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| corrupt("file too short"))?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let hlen = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; hlen];
        r.read_exact(&mut json).map_err(|_| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.channel_order_version != CHANNEL_ORDER_VERSION {
            return Err(corrupt(format!(
                "channel order version {} does not match {}",
                header.channel_order_version, CHANNEL_ORDER_VERSION
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 4 {
            return Err(corrupt(format!(
                "payload holds {} bytes, header describes {}",
                payload.len(),
                total * 4
            )));
        }
        let read = |e: &TensorEntry| -> Result<Tensor<f32>> {
            let n: usize = e.shape.iter().product();
            let bytes = &payload[e.offset * 4..(e.offset + n) * 4];
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::from_vec(&e.shape, data)
        };
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.tensors {
            let t = read(e)?;
            if let Some(n) = e.name.strip_prefix("adam.m/") {
                m.push((n.to_string(), t));
            } else if let Some(n) = e.name.strip_prefix("adam.v/") {
                v.push((n.to_string(), t));
            } else {
                params.push((e.name.clone(), t));
            }
        }
        let params = ModelParams::from_named(&header.arch, params).map_err(|e| corrupt(e.to_string()))?;
        let optimizer = match header.optimizer {
            Some((config, step)) => {
                let order = |list: Vec<(String, Tensor<f32>)>| -> Result<Vec<Tensor<f32>>> {
                    let named = ModelParams::from_named(&header.arch, list).map_err(|e| corrupt(e.to_string()))?;
                    Ok(named.tensors().to_vec())
                };
                Some(Adam {
                    config,
                    step,
                    m: order(m)?,
                    v: order(v)?,
                })
            }
            None => None,
        };
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(Checkpoint {
            params,
            schedule: header.schedule,
            train_step: header.train_step,
            coords: header.coords,
            train_config: header.train_config,
            optimizer,
        })
    }
}
