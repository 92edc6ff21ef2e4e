//! Binary checkpoint: magic, schema version, JSON header with the network
//! configuration and parameter table, then raw little-endian values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use segcls_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SEGCLSCK";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub dtype: String,
    pub network: NetworkConfig,
    pub params: Vec<ParamEntry>,
    /// Free-form training metadata (epoch, validation scores, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, net: &Network<T>, metadata: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let store = net.store();
    let header = CheckpointHeader {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        dtype: T::NAME.to_string(),
        network: net.config().clone(),
        params: store
            .ids()
            .map(|id| ParamEntry { name: store.name(id).to_string(), shape: store.value(id).shape().to_vec(), trainable: store.is_trainable(id) })
            .collect(),
        metadata,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path).map_err(Error::io(path))?);
    let io = Error::io(path);
    let result = (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_SCHEMA_VERSION)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        for id in store.ids() {
            for &v in store.value(id).data() {
                match T::NAME {
                    "f32" => w.write_f32::<LittleEndian>(v.f64() as f32)?,
                    _ => w.write_f64::<LittleEndian>(v.f64())?,
                }
            }
        }
        w.flush()
    })();
    result.map_err(io)
}

fn read_header(r: &mut impl Read) -> Result<CheckpointHeader> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    if version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!("unsupported schema version {version}")));
    }
    let len = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    let mut json = vec![0u8; usize::try_from(len).map_err(|_| bad("header too large"))?];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("header: {e}")))
}

pub fn read_checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    read_header(&mut BufReader::new(File::open(path).map_err(Error::io(path))?))
}

/// Rebuild the network described by the checkpoint and load its values.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Network<T>, CheckpointHeader)> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(Error::io(path))?);
    let header = read_header(&mut r)?;
    let mut net = Network::<T>::new(header.network.clone(), 0)?;
    let store = net.store_mut();
    if store.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters stored, network has {}",
            header.params.len(),
            store.len()
        )));
    }
    for (id, entry) in store.ids().collect::<Vec<_>>().into_iter().zip(&header.params) {
        if store.name(id) != entry.name || store.value(id).shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!("parameter {} does not match the network", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = match header.dtype.as_str() {
                "f32" => r.read_f32::<LittleEndian>().map(f64::from),
                "f64" => r.read_f64::<LittleEndian>(),
                other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
            }
            .map_err(|_| Error::Checkpoint(format!("truncated data for {}", entry.name)))?;
            data.push(T::of(v));
        }
        store.set(id, Tensor::new(&entry.shape, data));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(Error::io(path))? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
    }
    Ok((net, header))
}
