//! File formats: the PVUH sequence container, the PVUC checkpoint, the run
//! configuration, PLY export, the metrics report and the dataset manifest.
//!
//! Everything here turns values into bytes or text and back; reading and
//! writing files is left to the caller.

mod bytes;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod manifest;
pub mod ply;
pub mod report;

use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, model_digest, Checkpoint};
pub use config::RunConfig;
pub use container::{decode_sequence, encode_sequence, sequence_byte_len, ChannelFlags, PvuhHeader};
pub use manifest::{Manifest, ManifestEntry};
pub use ply::{export_ply, ColorBy, PART_PALETTE};
pub use report::MetricsReport;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IoError {
    #[error("{format}: bad magic {found:?}")]
    BadMagic { format: &'static str, found: [u8; 4] },
    #[error("{format}: unsupported version {version}")]
    UnsupportedVersion { format: &'static str, version: u16 },
    #[error("{format}: truncated, need {expected} bytes, have {got}")]
    Truncated {
        format: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{format}: {extra} unexpected trailing bytes")]
    TrailingBytes { format: &'static str, extra: usize },
    #[error("{format}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum {
        format: &'static str,
        stored: u32,
        computed: u32,
    },
    #[error("{format}: unknown flag bits {flags:#06x}")]
    UnknownFlags { format: &'static str, flags: u16 },
    #[error("{format}: flags disagree with payload: {reason}")]
    FlagMismatch { format: &'static str, reason: String },
    #[error("PVUH: unsupported point dimension {0}")]
    Dimension(u16),
    #[error("{format}: malformed record: {reason}")]
    Malformed { format: &'static str, reason: String },
    #[error("cannot encode: {0}")]
    Unencodable(String),
    #[error("checkpoint was written for a different model (digest {found}, expected {expected})")]
    DigestMismatch { expected: String, found: String },
    #[error("config: {0}")]
    Config(String),
    #[error("metrics report: {0}")]
    Report(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// Lowercase hexadecimal rendering of a digest.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
