//! Model artifact: one file holding a versioned header, the config, the
//! standardizer, and the parameter vector.
//!
//! Byte layout (all integers little-endian):
//!   bytes 0..4    magic "DPLM"
//!   bytes 4..8    format version (u32), currently 1
//!   bytes 8..16   header length in bytes (u64)
//!   ...           header JSON: {"config": ..., "standardizer": ...}
//!   next 8 bytes  parameter count (u64)
//!   ...           parameters as f64 little-endian, layout order

use std::fs;
use std::io::{Read, Write};
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Denoiser, DenoiserConfig, DenoiserError};
use crate::diffusion::Standardizer;

pub const ARTIFACT_MAGIC: [u8; 4] = *b"DPLM";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("artifact io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model artifact (bad magic)")]
    BadMagic,
    #[error("unsupported artifact version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt artifact header: {0}")]
    CorruptHeader(String),
    #[error("corrupt artifact parameters: {0}")]
    CorruptParams(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactHeader {
    config: DenoiserConfig,
    standardizer: Standardizer,
}

impl Denoiser {
    /// Write the model artifact; byte-identical for identical models.
    pub fn save(&self, path: &FsPath) -> Result<(), ArtifactError> {
        let header = serde_json::to_vec(&ArtifactHeader {
            config: *self.config(),
            standardizer: *self.standardizer_ref(),
        })
        .map_err(|e| ArtifactError::CorruptHeader(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 + self.params().len() * 8);
        out.extend_from_slice(&ARTIFACT_MAGIC);
        out.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params().len() as u64).to_le_bytes());
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    /// Read a model artifact, validating magic, version, and shapes.
    pub fn load(path: &FsPath) -> Result<Denoiser, DenoiserError> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(ArtifactError::from)?
            .read_to_end(&mut bytes)
            .map_err(ArtifactError::from)?;
        let take = |range: std::ops::Range<usize>| -> Result<&[u8], ArtifactError> {
            bytes.get(range).ok_or_else(|| {
                ArtifactError::CorruptParams("artifact truncated".into())
            })
        };
        if take(0..4)? != ARTIFACT_MAGIC {
            return Err(ArtifactError::BadMagic.into());
        }
        let version = u32::from_le_bytes(take(4..8)?.try_into().unwrap());
        if version != ARTIFACT_VERSION {
            return Err(ArtifactError::UnsupportedVersion(version).into());
        }
        let header_len = u64::from_le_bytes(take(8..16)?.try_into().unwrap()) as usize;
        let header: ArtifactHeader = serde_json::from_slice(take(16..16 + header_len)?)
            .map_err(|e| ArtifactError::CorruptHeader(e.to_string()))?;
        let count_at = 16 + header_len;
        let count = u64::from_le_bytes(take(count_at..count_at + 8)?.try_into().unwrap()) as usize;
        let data_at = count_at + 8;
        let data = take(data_at..data_at + count * 8)?;
        if bytes.len() != data_at + count * 8 {
            return Err(ArtifactError::CorruptParams(format!(
                "trailing bytes: file has {}, expected {}",
                bytes.len(),
                data_at + count * 8
            ))
            .into());
        }
        let params: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Denoiser::from_parts(header.config, params, header.standardizer)
    }
}
