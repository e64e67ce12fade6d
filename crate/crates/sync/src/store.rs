//! On-disk layout of one project:
//!
//! ```text
//! <data-dir>/<project-id>/meta.json
//! <data-dir>/<project-id>/ops.log        framed JSON ops, seq 1..n
//! <data-dir>/<project-id>/blobs/<hex>.ppm
//! ```
//!
//! An op is fsync'd to `ops.log` before it is acknowledged. A torn final
//! record (crash mid-write) is cut off on open.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use coml_core::domain::{Digest, ProjectId};
use coml_core::replication::DatasetOp;
use coml_core::wire::{read_frame, write_frame};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::Token;

const META: &str = "meta.json";
const OPS: &str = "ops.log";
const BLOBS: &str = "blobs";
/// An op frame is JSON metadata only; anything larger is corruption.
const MAX_OP_FRAME: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("corrupt project store {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectMeta {
    pub project_id: ProjectId,
    pub name: String,
    pub token: Token,
    pub created_at: u64,
}

#[derive(Debug)]
pub struct ProjectStore {
    dir: PathBuf,
    meta: ProjectMeta,
    log: File,
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

impl ProjectStore {
    pub fn create(root: &Path, meta: ProjectMeta) -> Result<Self, StoreError> {
        let dir = root.join(meta.project_id.to_string());
        fs::create_dir_all(dir.join(BLOBS))?;
        let tmp = dir.join("meta.json.tmp");
        let mut f = File::create(&tmp)?;
        f.write_all(&serde_json::to_vec_pretty(&meta).expect("meta serializes"))?;
        f.sync_all()?;
        fs::rename(&tmp, dir.join(META))?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(OPS))?;
        log.sync_all()?;
        sync_dir(&dir)?;
        sync_dir(root)?;
        Ok(ProjectStore { dir, meta, log })
    }

    /// Opens an existing project directory, returning the persisted ops.
    pub fn open(dir: &Path) -> Result<(Self, Vec<DatasetOp>), StoreError> {
        let corrupt = |detail: String| StoreError::Corrupt {
            path: dir.to_path_buf(),
            detail,
        };
        let meta: ProjectMeta = serde_json::from_slice(&fs::read(dir.join(META))?)
            .map_err(|e| corrupt(format!("meta.json: {e}")))?;
        fs::create_dir_all(dir.join(BLOBS))?;
        let path = dir.join(OPS);
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)?;
        let file_len = file.metadata()?.len();
        let mut ops = Vec::new();
        let mut good = 0u64;
        {
            let mut reader = BufReader::new(&mut file);
            loop {
                match read_frame(&mut reader, MAX_OP_FRAME) {
                    Ok(None) => break,
                    Ok(Some(bytes)) => {
                        let end = good + 4 + bytes.len() as u64;
                        match serde_json::from_slice::<DatasetOp>(&bytes) {
                            Ok(op) => {
                                if op.seq != ops.len() as u64 + 1 {
                                    return Err(corrupt(format!(
                                        "op at offset {good} has seq {}, expected {}",
                                        op.seq,
                                        ops.len() + 1
                                    )));
                                }
                                ops.push(op);
                                good = end;
                            }
                            // A garbled last record is a torn write.
                            Err(_) if end == file_len => break,
                            Err(e) => {
                                return Err(corrupt(format!("record at offset {good}: {e}")))
                            }
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                    Err(e) => return Err(corrupt(format!("record at offset {good}: {e}"))),
                }
            }
        }
        if good < file_len {
            log::warn!(
                "{}: dropping {} bytes of torn tail after {} ops",
                path.display(),
                file_len - good,
                ops.len()
            );
            file.set_len(good)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok((
            ProjectStore {
                dir: dir.to_path_buf(),
                meta,
                log: file,
            },
            ops,
        ))
    }

    /// Opens every project under `root`.
    pub fn open_all(root: &Path) -> Result<Vec<(Self, Vec<DatasetOp>)>, StoreError> {
        let mut out = Vec::new();
        if !root.exists() {
            return Ok(out);
        }
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(META).is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            out.push(Self::open(&dir)?);
        }
        Ok(out)
    }

    pub fn meta(&self) -> &ProjectMeta {
        &self.meta
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Durably appends one sequenced op.
    pub fn append(&mut self, op: &DatasetOp) -> io::Result<()> {
        let body = serde_json::to_vec(op).map_err(io::Error::other)?;
        let mut frame = Vec::with_capacity(body.len() + 4);
        write_frame(&mut frame, &body)?;
        let before = self.log.metadata()?.len();
        let res = self.log.write_all(&frame).and_then(|()| self.log.sync_data());
        if res.is_err() {
            // Leave no partial record behind for later appends to follow.
            let _ = self.log.set_len(before);
        }
        res
    }

    pub fn blobs(&self) -> BlobDir {
        BlobDir(self.dir.join(BLOBS))
    }
}

/// Content-addressed blob directory of one project. Cheap to clone; puts
/// and gets do not need the project's sequencing lock.
#[derive(Debug, Clone)]
pub struct BlobDir(PathBuf);

impl BlobDir {
    fn path(&self, digest: &Digest) -> PathBuf {
        self.0.join(format!("{}.ppm", digest.to_hex()))
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.path(digest).is_file()
    }

    /// Stores already-verified PPM bytes under their digest. Returns false
    /// if the blob was already present.
    pub fn put(&self, digest: &Digest, bytes: &[u8]) -> io::Result<bool> {
        let path = self.path(digest);
        if path.is_file() {
            return Ok(false);
        }
        let tmp = self.0.join(format!(
            "{}.tmp{}-{:?}",
            digest.to_hex(),
            std::process::id(),
            std::thread::current().id()
        ));
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, &path)?;
        sync_dir(&self.0)?;
        Ok(true)
    }

    pub fn get(&self, digest: &Digest) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.path(digest)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn remove(&self, digest: &Digest) -> io::Result<()> {
        match fs::remove_file(self.path(digest)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    pub fn count(&self) -> io::Result<usize> {
        Ok(fs::read_dir(&self.0)?
            .filter_map(Result::ok)
            .filter(|e| e.path().extension().is_some_and(|x| x == "ppm"))
            .count())
    }
}
