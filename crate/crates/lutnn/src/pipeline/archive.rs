//! Versioned trained-network archives. JSON with fixed field order, so a
//! given model state always serializes to identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Layer, Network};
use crate::netlist::HardNetlist;
use crate::tensor::Tensor;

use super::config::PipelineConfig;

pub const ARCHIVE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Trained,
    Pruned,
    Expanded,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArchive {
    pub version: u32,
    pub phase: Phase,
    pub seed: u64,
    pub input_shape: Vec<usize>,
    /// Weight snapshots taken just before masking, per pruned compute
    /// layer (network layer index, tensor); expansion reads reconnection
    /// values from here.
    pub pre_prune: Vec<(usize, Tensor)>,
    pub config: PipelineConfig,
    pub network: Network,
}

impl ModelArchive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut archive: ModelArchive = serde_json::from_slice(bytes)?;
        if archive.version != ARCHIVE_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported archive version {}",
                archive.version
            )));
        }
        // grad/cache buffers are not serialized; rebuild them
        for layer in &mut archive.network.layers {
            match layer {
                Layer::Dense(d) => d.restore(),
                Layer::Conv2d(c) => c.restore(),
                Layer::BatchNorm(b) => b.restore(),
                Layer::Lut(l) => l.restore(),
                _ => {}
            }
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetlistArchive {
    pub version: u32,
    pub netlist: HardNetlist,
}

impl NetlistArchive {
    pub fn new(netlist: HardNetlist) -> Self {
        NetlistArchive {
            version: ARCHIVE_FORMAT_VERSION,
            netlist,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive: NetlistArchive = serde_json::from_slice(&std::fs::read(path)?)?;
        if archive.version != ARCHIVE_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported netlist archive version {}",
                archive.version
            )));
        }
        Ok(archive)
    }
}

/// Write via a temporary sibling and rename, so partial files never appear
/// under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "archive".to_string())
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
