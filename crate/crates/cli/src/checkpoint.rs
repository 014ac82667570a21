//! GCK1 checkpoint format.
//!
//! Layout (little-endian): magic `GCK1`, `u32` version, `u64` entry count,
//! then per entry: `u16` name length, UTF-8 name, `u32` rows, `u32` cols,
//! `rows * cols` f32 values. Optimizer moments are stored under `<name>.m`
//! and `<name>.v`, the step count under `optim.t`. After the entries the
//! model configuration follows as a length-prefixed UTF-8 key=value block.

use std::collections::BTreeMap;
use std::path::Path;

use geo_cnn_core::model::{build_model, GeoCnnConfig, Model};
use thiserror::Error;

use crate::train::AdamState;

pub const MAGIC: [u8; 4] = *b"GCK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:02x?}, expected \"GCK1\"")]
    BadMagic { path: String, found: [u8; 4] },
    #[error("{path}: unsupported version {version}")]
    BadVersion { path: String, version: u32 },
    #[error("{path}: truncated at byte {offset}")]
    Truncated { path: String, offset: usize },
    #[error("{path}: missing entry '{name}'")]
    MissingEntry { path: String, name: String },
    #[error("{path}: entry '{name}' has {got} values, expected {expected}")]
    WrongSize {
        path: String,
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("{path}: unknown entries: {names:?}")]
    UnknownEntries { path: String, names: Vec<String> },
    #[error("{path}: bad embedded config: {source}")]
    BadConfig {
        path: String,
        #[source]
        source: geo_cnn_core::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn push_entry(bytes: &mut Vec<u8>, name: &str, rows: usize, cols: usize, data: &[f32]) {
    debug_assert_eq!(rows * cols, data.len());
    bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
    bytes.extend_from_slice(name.as_bytes());
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes parameters, batch-norm running statistics, the embedded model
/// config, and (when given) the optimizer moments.
pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    adam: Option<&AdamState>,
) -> Result<(), CheckpointError> {
    let mut entries: Vec<(String, usize, usize, Vec<f32>)> = Vec::new();
    model.visit(&mut |name, rows, cols, data| {
        entries.push((name.to_string(), rows, cols, data.to_vec()));
    });
    model.visit_buffers(&mut |name, data| {
        entries.push((name.to_string(), 1, data.len(), data.to_vec()));
    });
    if let Some(adam) = adam {
        for (name, m, v) in &adam.moments {
            entries.push((format!("{name}.m"), 1, m.len(), m.clone()));
            entries.push((format!("{name}.v"), 1, v.len(), v.clone()));
        }
        entries.push(("optim.t".to_string(), 1, 1, vec![adam.t as f32]));
    }

    let mut bytes = Vec::new();
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, rows, cols, data) in &entries {
        push_entry(&mut bytes, name, *rows, *cols, data);
    }
    let config_text = model.config.to_text();
    bytes.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    bytes.extend_from_slice(config_text.as_bytes());
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub struct RawCheckpoint {
    pub entries: Vec<(String, u32, u32, Vec<f32>)>,
    pub config_text: String,
}

/// Parses the container without interpreting entries (used by `inspect`).
pub fn read_raw(path: &Path) -> Result<RawCheckpoint, CheckpointError> {
    let p = path.display().to_string();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut at = 0usize;
    let take = |at: &mut usize, len: usize| -> Result<&[u8], CheckpointError> {
        if *at + len > bytes.len() {
            return Err(CheckpointError::Truncated {
                path: p.clone(),
                offset: *at,
            });
        }
        let s = &bytes[*at..*at + len];
        *at += len;
        Ok(s)
    };
    let magic = take(&mut at, 4)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            path: p,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion { path: p, version });
    }
    let count = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8_lossy(take(&mut at, name_len)?).into_owned();
        let rows = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        let cols = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        let len = rows as usize * cols as usize;
        let payload = take(&mut at, len * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, rows, cols, data));
    }
    let config_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let config_text = String::from_utf8_lossy(take(&mut at, config_len)?).into_owned();
    Ok(RawCheckpoint {
        entries,
        config_text,
    })
}

/// Rebuilds the model from the embedded config and loads every parameter
/// and buffer by name; returns the optimizer state when moments are present.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, Option<AdamState>), CheckpointError> {
    let p = path.display().to_string();
    let raw = read_raw(path)?;
    let config = GeoCnnConfig::from_text(&raw.config_text).map_err(|source| {
        CheckpointError::BadConfig {
            path: p.clone(),
            source,
        }
    })?;
    let mut model = build_model::<f32>(&config).map_err(|source| CheckpointError::BadConfig {
        path: p.clone(),
        source,
    })?;

    let mut map: BTreeMap<String, Vec<f32>> = raw
        .entries
        .into_iter()
        .map(|(name, _, _, data)| (name, data))
        .collect();

    let mut missing: Vec<String> = Vec::new();
    let mut wrong: Option<(String, usize, usize)> = None;
    model.visit_mut(&mut |name, slice| match map.remove(name) {
        Some(data) if data.len() == slice.len() => slice.copy_from_slice(&data),
        Some(data) => wrong = Some((name.to_string(), slice.len(), data.len())),
        None => missing.push(name.to_string()),
    });
    model.visit_buffers_mut(&mut |name, slice| match map.remove(name) {
        Some(data) if data.len() == slice.len() => slice.copy_from_slice(&data),
        Some(data) => wrong = Some((name.to_string(), slice.len(), data.len())),
        None => missing.push(name.to_string()),
    });
    if let Some((name, expected, got)) = wrong {
        return Err(CheckpointError::WrongSize {
            path: p,
            name,
            expected,
            got,
        });
    }
    if let Some(name) = missing.into_iter().next() {
        return Err(CheckpointError::MissingEntry { path: p, name });
    }

    // Optimizer moments are all-or-nothing.
    let t = map.remove("optim.t").map(|v| v[0] as u64);
    let adam = if let Some(t) = t {
        let mut moments = Vec::new();
        let mut names = Vec::new();
        model.visit(&mut |name, _, _, _| names.push(name.to_string()));
        for name in names {
            let m = map
                .remove(&format!("{name}.m"))
                .ok_or_else(|| CheckpointError::MissingEntry {
                    path: p.clone(),
                    name: format!("{name}.m"),
                })?;
            let v = map
                .remove(&format!("{name}.v"))
                .ok_or_else(|| CheckpointError::MissingEntry {
                    path: p.clone(),
                    name: format!("{name}.v"),
                })?;
            moments.push((name, m, v));
        }
        Some(AdamState { t, moments })
    } else {
        None
    };

    if !map.is_empty() {
        return Err(CheckpointError::UnknownEntries {
            path: p,
            names: map.into_keys().collect(),
        });
    }
    Ok((model, adam))
}
