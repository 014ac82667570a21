//! Dataset manifests: a `manifest.csv` with `path,label` rows (paths are
//! relative to the manifest's directory) plus a `classes.txt` sidecar with
//! one class name per line, line index = class id. An optional `# seed=N`
//! comment records the generator seed.

use std::path::{Path, PathBuf};

use geo_cnn_core::pointcloud::PointCloud;
use thiserror::Error;

use crate::gpc1::{self, GpcError};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: entry '{entry}' is not resolvable")]
    MissingFile { path: String, entry: String },
    #[error("{path}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        path: String,
        label: u32,
        classes: usize,
    },
    #[error("{entry}: manifest label {manifest} conflicts with stored label {stored}")]
    LabelConflict {
        entry: String,
        manifest: u32,
        stored: u32,
    },
    #[error(transparent)]
    Cloud(#[from] GpcError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Absolute (resolved) file paths with their class ids.
    pub entries: Vec<(PathBuf, u32)>,
    pub class_names: Vec<String>,
    pub seed: Option<u64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `manifest.csv` and `classes.txt` into `dir`. Entry paths are
/// stored relative to `dir`.
pub fn save_manifest(
    dir: &Path,
    entries: &[(String, u32)],
    class_names: &[String],
    seed: Option<u64>,
) -> Result<(), ManifestError> {
    let mut csv = String::new();
    if let Some(seed) = seed {
        csv.push_str(&format!("# seed={seed}\n"));
    }
    csv.push_str("path,label\n");
    for (path, label) in entries {
        csv.push_str(&format!("{path},{label}\n"));
    }
    let manifest_path = dir.join("manifest.csv");
    std::fs::write(&manifest_path, csv).map_err(io_err(&manifest_path))?;
    let classes_path = dir.join("classes.txt");
    std::fs::write(&classes_path, class_names.join("\n") + "\n").map_err(io_err(&classes_path))?;
    Ok(())
}

/// Loads and validates a manifest: every path must resolve to an existing
/// file and every label must fall inside the class list.
pub fn load_manifest(manifest_path: &Path) -> Result<DatasetManifest, ManifestError> {
    let p = manifest_path.display().to_string();
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let text = std::fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;

    let mut seed = None;
    let mut entries = Vec::new();
    let mut saw_header = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("seed=") {
                seed = v.parse().ok();
            }
            continue;
        }
        if !saw_header {
            if line != "path,label" {
                return Err(ManifestError::Parse {
                    path: p,
                    line: lineno + 1,
                    message: format!("expected header 'path,label', found '{line}'"),
                });
            }
            saw_header = true;
            continue;
        }
        let (path, label) = line.rsplit_once(',').ok_or_else(|| ManifestError::Parse {
            path: p.clone(),
            line: lineno + 1,
            message: "expected 'path,label'".into(),
        })?;
        let label: u32 = label.parse().map_err(|_| ManifestError::Parse {
            path: p.clone(),
            line: lineno + 1,
            message: format!("bad label '{label}'"),
        })?;
        let resolved = base.join(path);
        if !resolved.is_file() {
            return Err(ManifestError::MissingFile {
                path: p,
                entry: resolved.display().to_string(),
            });
        }
        entries.push((resolved, label));
    }
    if !saw_header {
        return Err(ManifestError::Parse {
            path: p,
            line: 0,
            message: "missing 'path,label' header".into(),
        });
    }

    let classes_path = base.join("classes.txt");
    let class_names: Vec<String> = std::fs::read_to_string(&classes_path)
        .map_err(io_err(&classes_path))?
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    for (_, label) in &entries {
        if *label as usize >= class_names.len() {
            return Err(ManifestError::LabelOutOfRange {
                path: p,
                label: *label,
                classes: class_names.len(),
            });
        }
    }
    Ok(DatasetManifest {
        entries,
        class_names,
        seed,
    })
}

/// Loads every cloud of the manifest, stamping the manifest label onto it.
/// A stored label that disagrees with the manifest aborts the load.
pub fn load_clouds(manifest: &DatasetManifest) -> Result<Vec<PointCloud>, ManifestError> {
    let mut out = Vec::with_capacity(manifest.entries.len());
    for (path, label) in &manifest.entries {
        let cloud = gpc1::load_cloud(path)?;
        if let Some(stored) = cloud.label() {
            if stored != *label {
                return Err(ManifestError::LabelConflict {
                    entry: path.display().to_string(),
                    manifest: *label,
                    stored,
                });
            }
        }
        out.push(cloud.with_label(Some(*label)));
    }
    Ok(out)
}
