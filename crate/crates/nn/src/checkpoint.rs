//! Weight checkpoints: a versioned little-endian binary container plus a
//! JSON sidecar (`<path>.json`) describing the layer graph.
//!
//! Binary layout:
//! ```text
//! magic     8 bytes  "UWNNCKPT"
//! version   u32
//! manifest  u32 length + UTF-8 JSON {"graph": .., "meta": ..}
//! count     u32 number of parameter tensors
//! tensor*   u32 rank, u32 extents[rank], f32 values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::network::{Network, NetworkSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"UWNNCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    graph: NetworkSpec,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format: &'static str,
    version: u32,
    parameter_count: usize,
    tensors: Vec<&'a [usize]>,
    graph: &'a NetworkSpec,
    meta: &'a serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(net: &Network<f32>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec(&Manifest {
        graph: net.spec().clone(),
        meta: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(net.parameter_count() * 4 + manifest.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Network<f32>, serde_json::Value)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let mlen = c.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(c.take(mlen)?)?;
    let mut net = Network::<f32>::zeros(manifest.graph)?;
    let count = c.u32()? as usize;
    if count != net.params().len() {
        return Err(NnError::Checkpoint(format!(
            "{count} tensors stored, graph needs {}",
            net.params().len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = c.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        params.push(Tensor::new(&shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    net.set_params(params)
        .map_err(|e| NnError::Checkpoint(e.to_string()))?;
    Ok((net, manifest.meta))
}

/// Write the binary checkpoint and its JSON sidecar.
pub fn save(path: &Path, net: &Network<f32>, meta: &serde_json::Value) -> Result<()> {
    let bytes = encode(net, meta)?;
    fs::File::create(path)?.write_all(&bytes)?;
    let sidecar = Sidecar {
        format: "uwnn-checkpoint",
        version: VERSION,
        parameter_count: net.parameter_count(),
        tensors: net.params().iter().map(|p| p.shape()).collect(),
        graph: net.spec(),
        meta,
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Network<f32>, serde_json::Value)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
