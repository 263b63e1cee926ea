//! Checkpoint archive: a text manifest followed by raw little-endian `f32` data.
//!
//! ```text
//! TEXTSSL-CKPT 1
//! step 56
//! epoch 1
//! rng augment <hex key>:<word position>
//! config alpha = 0.3
//! array online/encoder.conv0.weight 32x3x3x3
//! END <data bytes> <sha256 of data>
//! <data>
//! ```
//!
//! Arrays are stored back to back in manifest order. Scalars use the dimension
//! string `-`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::rng::StreamState;

const MAGIC: &str = "TEXTSSL-CKPT 1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointManifest {
    pub config: Config,
    pub step: u64,
    pub epoch: u64,
    /// Named random-stream positions.
    pub rng: Vec<(String, StreamState)>,
    /// Every array of the run, names prefixed by their role (`online/`, `momentum/`, ...).
    pub arrays: ParamStore,
}

fn dims_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_dims(text: &str) -> Option<Vec<usize>> {
    if text == "-" {
        return Some(Vec::new());
    }
    text.split('x').map(|d| d.parse().ok()).collect()
}

pub fn save_checkpoint(manifest: &CheckpointManifest, path: &Path) -> Result<()> {
    let mut data = Vec::with_capacity(manifest.arrays.numel() * 4);
    let mut head = String::new();
    head.push_str(MAGIC);
    head.push('\n');
    head.push_str(&format!("step {}\nepoch {}\n", manifest.step, manifest.epoch));
    for (label, state) in &manifest.rng {
        head.push_str(&format!("rng {label} {}\n", state.to_text()));
    }
    for line in manifest.config.to_text().lines() {
        head.push_str(&format!("config {line}\n"));
    }
    for (name, shape, values) in manifest.arrays.iter() {
        head.push_str(&format!("array {name} {}\n", dims_text(shape)));
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    head.push_str(&format!("END {} {}\n", data.len(), hex::encode(Sha256::digest(&data))));
    let mut bytes = head.into_bytes();
    bytes.extend_from_slice(&data);

    // Write then rename so a crash never leaves a half-written checkpoint behind.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointManifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |what: String| Error::Integrity(format!("{}: {what}", path.display()));

    let end_marker = b"\nEND ";
    let end_at = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| bad("manifest terminator missing".into()))?;
    let end_line_len = bytes[end_at + 1..]
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| bad("manifest terminator truncated".into()))?;
    let head =
        std::str::from_utf8(&bytes[..end_at + 1 + end_line_len]).map_err(|_| bad("manifest is not utf-8".into()))?;
    let data = &bytes[end_at + 2 + end_line_len..];

    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint (bad magic line)".into()));
    }
    let mut step = None;
    let mut epoch = None;
    let mut rng = Vec::new();
    let mut config_text = String::new();
    let mut arrays: Vec<(String, Vec<usize>)> = Vec::new();
    let mut end = None;
    for line in lines {
        let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
        match kind {
            "step" => step = rest.parse::<u64>().ok(),
            "epoch" => epoch = rest.parse::<u64>().ok(),
            "rng" => {
                let (label, state) = rest
                    .split_once(' ')
                    .ok_or_else(|| bad(format!("bad rng line `{line}`")))?;
                rng.push((label.to_string(), StreamState::from_text(state)?));
            }
            "config" => {
                config_text.push_str(rest);
                config_text.push('\n');
            }
            "array" => {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| bad(format!("bad array line `{line}`")))?;
                let shape = parse_dims(dims).ok_or_else(|| bad(format!("bad dimensions `{dims}`")))?;
                arrays.push((name.to_string(), shape));
            }
            "END" => {
                let (len, sum) = rest.split_once(' ').ok_or_else(|| bad("bad END line".into()))?;
                end = Some((
                    len.parse::<usize>().map_err(|_| bad("bad data length".into()))?,
                    sum.to_string(),
                ));
            }
            other => return Err(bad(format!("unknown manifest entry `{other}`"))),
        }
    }
    let (len, sum) = end.ok_or_else(|| bad("END line missing".into()))?;
    if data.len() != len {
        return Err(bad(format!("expected {len} data bytes, found {}", data.len())));
    }
    if hex::encode(Sha256::digest(data)) != sum {
        return Err(bad("data checksum mismatch".into()));
    }
    let config = Config::parse(&config_text).map_err(|e| bad(format!("embedded config: {e}")))?;

    let mut store = ParamStore::new();
    let mut offset = 0;
    for (name, shape) in arrays {
        let n: usize = shape.iter().product();
        let bytes = data
            .get(offset..offset + 4 * n)
            .ok_or_else(|| bad(format!("array {name} extends past the data")))?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(&name, &shape, values);
        offset += 4 * n;
    }
    if offset != data.len() {
        return Err(bad("trailing data after the last array".into()));
    }
    Ok(CheckpointManifest {
        config,
        step: step.ok_or_else(|| bad("step missing".into()))?,
        epoch: epoch.ok_or_else(|| bad("epoch missing".into()))?,
        rng,
        arrays: store,
    })
}
