//! The GPC1 binary point-cloud format and a plain-text converter.
//!
//! Layout (little-endian): magic `GPC1`, `u32` point count, `u32` channel
//! count, `i32` label (-1 = none), then `n * c` IEEE-754 f32 values in
//! row-major order. Saving and loading round-trip bit-exactly.

use std::path::Path;

use geo_cnn_core::pointcloud::PointCloud;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"GPC1";
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum GpcError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:02x?}, expected \"GPC1\"")]
    BadMagic { path: String, found: [u8; 4] },
    #[error("{path}: truncated payload, byte {got} of {expected}")]
    Truncated { path: String, expected: usize, got: usize },
    #[error("{path}: {extra} trailing bytes after the payload")]
    TrailingBytes { path: String, extra: usize },
    #[error("{path}: unsupported channel count {channels}")]
    UnsupportedChannels { path: String, channels: u32 },
    #[error("{path}: invalid point count {n}")]
    BadPointCount { path: String, n: u32 },
    #[error("{path}: invalid label {label} (must be -1 or >= 0)")]
    BadLabel { path: String, label: i32 },
    #[error("{path}: non-finite value at byte offset {offset} (row {row}, column {col})")]
    NonFinite {
        path: String,
        offset: usize,
        row: usize,
        col: usize,
    },
    #[error("{path}: invalid cloud: {source}")]
    InvalidCloud {
        path: String,
        #[source]
        source: geo_cnn_core::Error,
    },
    #[error("{path}:{line}: {message}")]
    BadText {
        path: String,
        line: usize,
        message: String,
    },
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<(), GpcError> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + cloud.data().len() * 4);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&(cloud.n() as u32).to_le_bytes());
    bytes.extend_from_slice(&(cloud.channels() as u32).to_le_bytes());
    let label = cloud.label().map_or(-1i32, |l| l as i32);
    bytes.extend_from_slice(&label.to_le_bytes());
    for v in cloud.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|source| GpcError::Io {
        path: path_str(path),
        source,
    })
}

pub fn load_cloud(path: &Path) -> Result<PointCloud, GpcError> {
    let p = path_str(path);
    let bytes = std::fs::read(path).map_err(|source| GpcError::Io {
        path: p.clone(),
        source,
    })?;
    if bytes.len() < HEADER_LEN {
        return Err(GpcError::Truncated {
            path: p,
            expected: HEADER_LEN,
            got: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(GpcError::BadMagic {
            path: p,
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let channels = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let label = i32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if n == 0 {
        return Err(GpcError::BadPointCount { path: p, n });
    }
    if channels != 3 && channels != 6 {
        return Err(GpcError::UnsupportedChannels { path: p, channels });
    }
    if label < -1 {
        return Err(GpcError::BadLabel { path: p, label });
    }
    let expected = HEADER_LEN + n as usize * channels as usize * 4;
    if bytes.len() < expected {
        return Err(GpcError::Truncated {
            path: p,
            expected,
            got: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(GpcError::TrailingBytes {
            path: p,
            extra: bytes.len() - expected,
        });
    }
    let mut data = Vec::with_capacity(n as usize * channels as usize);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(GpcError::NonFinite {
                path: p,
                offset: HEADER_LEN + i * 4,
                row: i / channels as usize,
                col: i % channels as usize,
            });
        }
        data.push(v);
    }
    let label = if label == -1 { None } else { Some(label as u32) };
    PointCloud::new(channels as usize, data, label)
        .map_err(|source| GpcError::InvalidCloud { path: p, source })
}

/// Converts whitespace-separated text rows (`x y z` or `x y z nx ny nz`)
/// to GPC1. Normal rows are renormalized to unit length; a zero normal is
/// rejected. Returns (points, channels).
pub fn convert_xyz_text(
    input: &Path,
    output: &Path,
    label: Option<u32>,
) -> Result<(usize, usize), GpcError> {
    let p = path_str(input);
    let text = std::fs::read_to_string(input).map_err(|source| GpcError::Io {
        path: p.clone(),
        source,
    })?;
    let mut channels: Option<usize> = None;
    let mut data: Vec<f32> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let c = fields.len();
        if c != 3 && c != 6 {
            return Err(GpcError::BadText {
                path: p,
                line: lineno + 1,
                message: format!("expected 3 or 6 fields, found {c}"),
            });
        }
        match channels {
            None => channels = Some(c),
            Some(prev) if prev != c => {
                return Err(GpcError::BadText {
                    path: p,
                    line: lineno + 1,
                    message: format!("row has {c} fields, earlier rows had {prev}"),
                });
            }
            _ => {}
        }
        let mut row = Vec::with_capacity(c);
        for f in &fields {
            let v: f32 = f.parse().map_err(|_| GpcError::BadText {
                path: p.clone(),
                line: lineno + 1,
                message: format!("bad number '{f}'"),
            })?;
            row.push(v);
        }
        if c == 6 {
            let norm = (row[3] * row[3] + row[4] * row[4] + row[5] * row[5]).sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(GpcError::BadText {
                    path: p,
                    line: lineno + 1,
                    message: "normal has zero or non-finite length".into(),
                });
            }
            for v in &mut row[3..6] {
                *v /= norm;
            }
        }
        data.extend_from_slice(&row);
    }
    let channels = channels.ok_or_else(|| GpcError::BadText {
        path: p.clone(),
        line: 0,
        message: "no data rows".into(),
    })?;
    let n = data.len() / channels;
    let cloud = PointCloud::new(channels, data, label)
        .map_err(|source| GpcError::InvalidCloud { path: p, source })?;
    save_cloud(&cloud, output)?;
    Ok((n, channels))
}

/// Header fields without the payload, for `inspect`.
pub fn peek_header(path: &Path) -> Result<(u32, u32, i32), GpcError> {
    let cloud = load_cloud(path)?;
    Ok((
        cloud.n() as u32,
        cloud.channels() as u32,
        cloud.label().map_or(-1, |l| l as i32),
    ))
}
