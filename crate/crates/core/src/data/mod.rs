//! Procedural GelSight-like tactile sequences.
//!
//! A texture class is a pair of oriented sinusoidal gratings plus a value-noise
//! micro-texture. A sequence renders that surface through a circular contact
//! patch that presses, slips or twists over time, optionally preceded by
//! pre-contact frames that contain only sensor noise.

mod dataset;
mod detect;
mod render;
mod texture;

pub use dataset::{
    build_dataset, load_batch, read_index, read_sequence_file, write_sequence_file, BatchItem, BatchReport, Dataset,
    DatasetManifest, IndexRecord, Split, Window,
};
pub use detect::{detect_first_contact, detect_first_contact_with, frame_energy, CONTACT_BLOCK, DEFAULT_CONTACT_THRESHOLD};
pub use render::{generate_sequence, render_contact_frame, ContactGeometry, Motion, RenderParams, SequenceSample};
pub use texture::{default_classes, generate_texture, TextureClass, TextureField};

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Mixes a base seed with a sub-stream id (splitmix64 finalizer).
pub fn derive_seed(base: u64, id: u64) -> u64 {
    let mut z = base ^ id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
