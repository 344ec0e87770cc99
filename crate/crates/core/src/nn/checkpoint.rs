//! `MRCK` checkpoint files.
//!
//! Layout (little-endian): magic `MRCK`, `u32` version, `u32` byte length and
//! the UTF-8 JSON header (network spec, precision, stored image size,
//! optimizer step), `u32` tensor count, then per tensor: `u16` name length,
//! name, `u8` rank, `u32` extents, raw values at the header's precision.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Network, NetworkSpec};
use crate::error::{format, shape, Result};
use crate::io::{fingerprint, write_atomic, ByteReader, ByteWriter, Fingerprint};
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MRCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkSpec,
    pub precision: Precision,
    /// Side length N of the stored images the network was trained from.
    pub stored_size: usize,
    pub optimizer_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Values widened to f64; narrowing back to the header precision is exact.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_network<T: Scalar>(net: &Network<T>, stored_size: usize, optimizer_step: u64) -> Self {
        let tensors = net
            .named_tensors()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                values: t.to_f64_vec(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                network: net.spec.clone(),
                precision: T::PRECISION,
                stored_size,
                optimizer_step,
            },
            tensors,
        }
    }

    /// Rebuilds a network, checking every stored tensor against the spec.
    pub fn to_network<T: Scalar>(&self) -> Result<Network<T>> {
        let mut net = Network::<T>::init(self.header.network.clone(), 0)?;
        let mut slots = net.named_tensors_mut();
        if slots.len() != self.tensors.len() {
            return Err(shape(format!(
                "checkpoint holds {} tensors, spec needs {}",
                self.tensors.len(),
                slots.len()
            )));
        }
        for ((name, slot), stored) in slots.iter_mut().zip(&self.tensors) {
            if *name != stored.name || slot.shape() != stored.shape.as_slice() {
                return Err(shape(format!(
                    "checkpoint tensor {} {:?} does not match spec slot {} {:?}",
                    stored.name,
                    stored.shape,
                    name,
                    slot.shape()
                )));
            }
            **slot = Tensor::from_f64(&stored.shape, &stored.values)?;
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_string(&self.header)?;
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(json.len() as u32);
        w.bytes(json.as_bytes());
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.u16(t.name.len() as u16);
            w.bytes(t.name.as_bytes());
            w.u8(t.shape.len() as u8);
            for &d in &t.shape {
                w.u32(d as u32);
            }
            for &v in &t.values {
                match self.header.precision {
                    Precision::F32 => w.f32(v as f32),
                    Precision::F64 => w.f64(v),
                }
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let len = r.u32()? as usize;
        let json = std::str::from_utf8(r.take(len)?).map_err(|_| format("checkpoint header is not UTF-8"))?;
        let header: CheckpointHeader = serde_json::from_str(json)?;
        header.network.validate()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| format("tensor name is not UTF-8"))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let values = (0..len)
                .map(|_| match header.precision {
                    Precision::F32 => r.f32().map(f64::from),
                    Precision::F64 => r.f64(),
                })
                .collect::<Result<Vec<_>>>()?;
            tensors.push(NamedTensor { name, shape, values });
        }
        r.finish()?;
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<Fingerprint> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)?;
        Ok(fingerprint(&bytes))
    }

    /// Reads a checkpoint and returns it with the fingerprint of its bytes.
    pub fn load(path: &Path) -> Result<(Self, Fingerprint)> {
        let bytes = crate::io::read_file(path)?;
        Ok((Self::from_bytes(&bytes)?, fingerprint(&bytes)))
    }
}
