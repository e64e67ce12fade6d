//! Bulk import of `.ppm` files into an agent.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use coml_agent::{Agent, AgentError};
use coml_core::domain::{Digest, ImageBlob, LabelId, Split};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: AgentError,
    },
}

impl ImportError {
    pub fn is_connectivity(&self) -> bool {
        matches!(self, ImportError::File { source, .. } if source.is_connectivity())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ImportReport {
    pub imported: usize,
    /// Digests of the imported files, in import order.
    pub digests: Vec<Digest>,
    /// Files skipped under continue-on-error, with the reason.
    pub failed: Vec<(PathBuf, String)>,
}

/// The `.ppm` files directly inside `dir`, in lexicographic filename order.
pub fn ppm_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_ppm = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
        if is_ppm && path.is_file() {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Adds one sample per file. A bad file stops the import unless
/// `continue_on_error` is set, in which case it is reported and skipped.
pub fn import_paths(
    agent: &mut Agent,
    files: &[PathBuf],
    label: LabelId,
    split: Split,
    continue_on_error: bool,
) -> Result<ImportReport, ImportError> {
    let mut report = ImportReport::default();
    for path in files {
        let result = fs::read(path)
            .map_err(AgentError::from)
            .and_then(|bytes| Ok(ImageBlob::from_ppm(&bytes)?))
            .and_then(|img| {
                let digest = img.digest();
                agent.capture(label, img, split, Default::default())?;
                Ok(digest)
            });
        match result {
            Ok(d) => {
                report.imported += 1;
                report.digests.push(d);
            }
            Err(e) if continue_on_error && !e.is_connectivity() => {
                log::warn!("skipping {}: {e}", path.display());
                report.failed.push((path.clone(), e.to_string()));
            }
            Err(source) => {
                return Err(ImportError::File {
                    path: path.clone(),
                    source,
                })
            }
        }
    }
    Ok(report)
}

pub fn import_dir(
    agent: &mut Agent,
    dir: &Path,
    label: LabelId,
    split: Split,
    continue_on_error: bool,
) -> Result<ImportReport, ImportError> {
    let files = ppm_files(dir)?;
    import_paths(agent, &files, label, split, continue_on_error)
}
