//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `PLTNCKPT`, a little-endian `u32` format version,
//! a `u32` header length, a JSON header, a `u64` parameter count and then the
//! parameters as little-endian `f64`. The header carries everything needed to
//! rebuild the network and its observations, so evaluation does not depend on
//! the run config that produced the file.

use std::io::Write;
use std::path::{Path, PathBuf};

use platoon_core::observe::{GridConfig, StateConfig};
use platoon_core::qmix::{CheckpointSink, CheckpointTag, Encoder, QmixNet};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"PLTNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub net: QmixNet,
    pub grid: GridConfig,
    pub state: StateConfig,
    pub tag: CheckpointTag,
    pub episode: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(net: QmixNet, grid: GridConfig, state: StateConfig, tag: CheckpointTag, episode: usize, params: Vec<f64>) -> Self {
        let tensors = vec![
            TensorEntry { name: "agent".into(), len: net.agent.param_count() },
            TensorEntry { name: "mixer".into(), len: net.mixer.param_count() },
        ];
        Self { header: CheckpointHeader { net, grid, state, tag, episode, tensors }, params }
    }

    pub fn net(&self) -> &QmixNet {
        &self.header.net
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.header.net.agent.encoder, Encoder::Flat { .. })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + header.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    /// Parses a checkpoint. `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let mut rest = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if rest.len() < n {
                return Err(bad(format!("truncated {what}")));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        if take(8, "magic")? != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(take(4, "header length")?.try_into().unwrap()) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(take(header_len, "header")?).map_err(|e| bad(format!("header: {e}")))?;
        let count = u64::from_le_bytes(take(8, "parameter count")?.try_into().unwrap()) as usize;
        let expected = header.net.param_count();
        let listed: usize = header.tensors.iter().map(|t| t.len).sum();
        if count != expected || listed != expected {
            return Err(bad(format!("network needs {expected} parameters, file lists {listed} and stores {count}")));
        }
        let data = take(count.checked_mul(8).ok_or_else(|| bad("parameter count overflows".into()))?, "parameters")?;
        let params = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&self.to_bytes()).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Writes training checkpoints into a directory: `initial.ckpt`,
/// `episode_<n>.ckpt` for periodic saves and `best.ckpt`, overwritten on
/// every improvement.
pub struct DirSink {
    pub dir: PathBuf,
    net: QmixNet,
    grid: GridConfig,
    state: StateConfig,
    pub written: Vec<PathBuf>,
}

impl DirSink {
    pub fn new(dir: &Path, net: QmixNet, grid: GridConfig, state: StateConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self { dir: dir.to_path_buf(), net, grid, state, written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, tag: CheckpointTag, episode: usize, params: &[f64]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        Checkpoint::new(self.net.clone(), self.grid, self.state, tag, episode, params.to_vec()).save(&path)?;
        if !self.written.contains(&path) {
            self.written.push(path.clone());
        }
        Ok(path)
    }
}

impl CheckpointSink for DirSink {
    fn save(&mut self, tag: CheckpointTag, episode: usize, params: &[f64]) -> platoon_core::Result<()> {
        let name = match tag {
            CheckpointTag::Initial => "initial.ckpt".to_string(),
            CheckpointTag::Periodic => format!("episode_{episode}.ckpt"),
            CheckpointTag::Best => "best.ckpt".to_string(),
        };
        // The core error type has no IO variant; report through Training.
        self.write(&name, tag, episode, params)
            .map(|_| ())
            .map_err(|e| platoon_core::Error::Training(e.to_string()))
    }
}
