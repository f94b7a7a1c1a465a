//! `STAM1` checkpoint files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "STAM1"
//! config_len, config bytes (UTF-8 `key=value` lines)
//! tensor_count
//! per tensor: name_len, name bytes, rank, rank × extent, numel × f64 (LE)
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{ModelConfig, StamParams, Variant};
use crate::io::write_atomic;
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"STAM1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a STAM1 checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint manifest mismatch: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn encode_config(c: &ModelConfig) -> String {
    let channels: Vec<String> = c.backbone_channels.iter().map(|v| v.to_string()).collect();
    format!(
        "frame_height={}\nframe_width={}\nbackbone_channels={}\nheads={}\nproj_dim={}\nseq_len={}\nclasses={}\nvariant={}\nclassifier_hidden={}\n",
        c.frame_height,
        c.frame_width,
        channels.join(","),
        c.heads,
        c.proj_dim.map_or("auto".to_string(), |p| p.to_string()),
        c.seq_len,
        c.classes,
        c.variant,
        c.classifier_hidden
    )
}

fn decode_config(text: &str) -> Result<ModelConfig, CheckpointError> {
    let bad = |m: String| CheckpointError::Manifest(m);
    let mut cfg = ModelConfig::default();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("config line {line:?}")))?;
        let num = || value.parse::<usize>().map_err(|_| bad(format!("{key}={value}")));
        match key {
            "frame_height" => cfg.frame_height = num()?,
            "frame_width" => cfg.frame_width = num()?,
            "backbone_channels" => {
                cfg.backbone_channels = value
                    .split(',')
                    .map(|v| v.parse().map_err(|_| bad(format!("{key}={value}"))))
                    .collect::<Result<_, _>>()?
            }
            "heads" => cfg.heads = num()?,
            "proj_dim" => cfg.proj_dim = if value == "auto" { None } else { Some(num()?) },
            "seq_len" => cfg.seq_len = num()?,
            "classes" => cfg.classes = num()?,
            "variant" => cfg.variant = value.parse::<Variant>().map_err(bad)?,
            "classifier_hidden" => cfg.classifier_hidden = num()?,
            _ => return Err(bad(format!("unknown config key {key:?}"))),
        }
    }
    cfg.validate().map_err(|e| bad(e.to_string()))?;
    Ok(cfg)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

/// Serializes parameters to bytes.
pub fn write_checkpoint(params: &StamParams) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let cfg = encode_config(&params.config);
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    let tensors = params.named_tensors();
    put_u32(&mut out, tensors.len());
    for (name, t) in tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

/// Parses checkpoint bytes and checks every tensor against the skeleton
/// implied by the embedded configuration.
pub fn read_checkpoint(bytes: &[u8]) -> Result<StamParams, CheckpointError> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) { CheckpointError::Truncated("magic") } else { CheckpointError::BadMagic });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes: &bytes[MAGIC.len()..] };
    let len = r.u32("config length")?;
    let text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|_| CheckpointError::Manifest("config is not UTF-8".into()))?;
    let config = decode_config(text)?;
    let mut params = StamParams::init(&config, 0).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> =
        params.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();

    let count = r.u32("tensor count")?;
    if count != expected.len() {
        return Err(CheckpointError::Manifest(format!("{count} tensors, config implies {}", expected.len())));
    }
    for ((name, shape), slot) in expected.iter().zip(params.tensors_mut()) {
        let len = r.u32("tensor name length")?;
        let got = r.take(len, "tensor name")?;
        if got != name.as_bytes() {
            return Err(CheckpointError::Manifest(format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(got)
            )));
        }
        let rank = r.u32("tensor rank")?;
        let dims = (0..rank).map(|_| r.u32("tensor shape")).collect::<Result<Vec<_>, _>>()?;
        if &dims != shape {
            return Err(CheckpointError::Manifest(format!("{name}: shape {dims:?}, expected {shape:?}")));
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(numel * 8, "tensor payload")?;
        let values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        *slot = Tensor::new(&dims, values).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    }
    if !r.bytes.is_empty() {
        return Err(CheckpointError::Manifest(format!("{} trailing bytes", r.bytes.len())));
    }
    Ok(params)
}

/// Writes to a sibling temporary file and renames it into place, so a
/// reader never observes a partial checkpoint.
pub fn save_checkpoint(params: &StamParams, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &write_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<StamParams, CheckpointError> {
    read_checkpoint(&fs::read(path)?)
}
