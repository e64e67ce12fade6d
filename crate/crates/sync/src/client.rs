//! Blocking client for the sync server. A reader thread splits incoming
//! traffic into commit broadcasts (polled by the owner) and replies to the
//! single outstanding request.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, TryRecvError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use coml_core::domain::{DeviceId, Digest, ProjectId};
use coml_core::replication::DatasetOp;
use coml_core::wire::{encode_json, read_frame, write_frame};
use thiserror::Error;

use crate::protocol::{ErrorCode, Message, Token};

/// Largest frame accepted from the server (a catch-up delta can be big).
const MAX_INBOUND_FRAME: usize = 512 << 20;
const DEFAULT_TIMEOUT: Duration = Duration::from_secs(15);

#[derive(Debug, Error)]
pub enum SyncError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("connection closed")]
    Disconnected,
    #[error("no reply within {0:?}")]
    Timeout(Duration),
    #[error("server error {code}: {detail}")]
    Server { code: ErrorCode, detail: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl SyncError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            SyncError::Server { code, .. } => Some(*code),
            _ => None,
        }
    }

    /// True for failures of the connection itself rather than of a request.
    pub fn is_connectivity(&self) -> bool {
        matches!(
            self,
            SyncError::Io(_) | SyncError::Disconnected | SyncError::Timeout(_)
        )
    }
}

enum Reply {
    Message(Message),
    Blob(Digest, Vec<u8>),
}

pub struct SyncClient {
    stream: TcpStream,
    out: BufWriter<TcpStream>,
    replies: Receiver<Reply>,
    commits: Receiver<DatasetOp>,
    alive: Arc<AtomicBool>,
    reader: Option<JoinHandle<()>>,
    timeout: Duration,
}

impl SyncClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, SyncError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let (reply_tx, replies) = mpsc::channel();
        let (commit_tx, commits) = mpsc::channel();
        let alive = Arc::new(AtomicBool::new(true));
        let mut input = BufReader::new(stream.try_clone()?);
        let flag = Arc::clone(&alive);
        let reader = thread::Builder::new()
            .name("coml-client-read".into())
            .spawn(move || {
                let result = (|| -> Result<(), SyncError> {
                    while let Some(frame) = read_frame(&mut input, MAX_INBOUND_FRAME)? {
                        let msg: Message = serde_json::from_slice(&frame)
                            .map_err(|e| SyncError::Protocol(e.to_string()))?;
                        let sent = match msg {
                            Message::OpCommit { op } => commit_tx.send(op).is_ok(),
                            Message::BlobData { digest, len } => {
                                let body = read_frame(&mut input, MAX_INBOUND_FRAME)?
                                    .ok_or(SyncError::Disconnected)?;
                                if body.len() as u64 != len {
                                    return Err(SyncError::Protocol(format!(
                                        "blob announced {len} bytes, got {}",
                                        body.len()
                                    )));
                                }
                                reply_tx.send(Reply::Blob(digest, body)).is_ok()
                            }
                            other => reply_tx.send(Reply::Message(other)).is_ok(),
                        };
                        if !sent {
                            break;
                        }
                    }
                    Ok(())
                })();
                if let Err(e) = result {
                    log::debug!("sync connection reader stopped: {e}");
                }
                flag.store(false, Ordering::SeqCst);
            })?;
        Ok(SyncClient {
            out: BufWriter::new(stream.try_clone()?),
            stream,
            replies,
            commits,
            alive,
            reader: Some(reader),
            timeout: DEFAULT_TIMEOUT,
        })
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn is_connected(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    fn send(&mut self, msg: &Message, payload: Option<&[u8]>) -> Result<(), SyncError> {
        self.out.write_all(&encode_json(msg))?;
        if let Some(p) = payload {
            write_frame(&mut self.out, p)?;
        }
        self.out.flush()?;
        Ok(())
    }

    fn request(&mut self, msg: &Message, payload: Option<&[u8]>) -> Result<Reply, SyncError> {
        if !self.is_connected() {
            return Err(SyncError::Disconnected);
        }
        self.send(msg, payload)?;
        match self.replies.recv_timeout(self.timeout) {
            Ok(Reply::Message(Message::Error { code, detail, .. })) => {
                Err(SyncError::Server { code, detail })
            }
            Ok(r) => Ok(r),
            Err(RecvTimeoutError::Timeout) => {
                // A late reply would be taken for the next request's answer.
                self.close();
                Err(SyncError::Timeout(self.timeout))
            }
            Err(RecvTimeoutError::Disconnected) => Err(SyncError::Disconnected),
        }
    }

    fn unexpected<T>(what: &str) -> Result<T, SyncError> {
        Err(SyncError::Protocol(format!("unexpected reply to {what}")))
    }

    pub fn create_project(&mut self, name: &str) -> Result<(ProjectId, Token), SyncError> {
        match self.request(&Message::CreateProject { name: name.into() }, None)? {
            Reply::Message(Message::ProjectCreated { project_id, token }) => Ok((project_id, token)),
            _ => Self::unexpected("CREATE_PROJECT"),
        }
    }

    /// Joins a project. Returns the ops after `last_seq` and the server head.
    /// From here on, commits arrive through [`SyncClient::poll_commits`].
    pub fn hello(
        &mut self,
        project_id: ProjectId,
        token: &Token,
        device_id: DeviceId,
        last_seq: u64,
    ) -> Result<(Vec<DatasetOp>, u64), SyncError> {
        let msg = Message::Hello {
            project_id,
            token: token.clone(),
            device_id,
            last_seq,
        };
        match self.request(&msg, None)? {
            Reply::Message(Message::Delta { ops, head }) => Ok((ops, head)),
            _ => Self::unexpected("HELLO"),
        }
    }

    /// Submits an op; returns its sequence number and whether the server
    /// had already sequenced it.
    pub fn submit(&mut self, token: &Token, op: &DatasetOp) -> Result<(u64, bool), SyncError> {
        let msg = Message::OpSubmit {
            token: token.clone(),
            op: op.clone(),
        };
        match self.request(&msg, None)? {
            Reply::Message(Message::OpAck {
                op_id,
                seq,
                duplicate,
            }) if op_id == op.op_id => Ok((seq, duplicate)),
            _ => Self::unexpected("OP_SUBMIT"),
        }
    }

    /// Uploads PPM bytes; the digest is computed locally and verified by
    /// the server.
    pub fn put_blob(&mut self, token: &Token, ppm: &[u8]) -> Result<Digest, SyncError> {
        let digest = Digest::of_bytes(ppm);
        let msg = Message::BlobPut {
            token: token.clone(),
            digest,
            len: ppm.len() as u64,
        };
        match self.request(&msg, Some(ppm))? {
            Reply::Message(Message::BlobAck { digest: d }) if d == digest => Ok(digest),
            _ => Self::unexpected("BLOB_PUT"),
        }
    }

    pub fn get_blob(&mut self, token: &Token, digest: &Digest) -> Result<Vec<u8>, SyncError> {
        let msg = Message::BlobGet {
            token: token.clone(),
            digest: *digest,
        };
        match self.request(&msg, None)? {
            Reply::Blob(d, bytes) if d == *digest => {
                if Digest::of_bytes(&bytes) != *digest {
                    return Err(SyncError::Protocol(format!("blob {digest} failed its hash check")));
                }
                Ok(bytes)
            }
            _ => Self::unexpected("BLOB_GET"),
        }
    }

    pub fn ping(&mut self) -> Result<u64, SyncError> {
        match self.request(&Message::Ping, None)? {
            Reply::Message(Message::Pong { head }) => Ok(head),
            _ => Self::unexpected("PING"),
        }
    }

    /// Commits received so far, in sequence order, without blocking.
    pub fn poll_commits(&self) -> Vec<DatasetOp> {
        let mut out = Vec::new();
        loop {
            match self.commits.try_recv() {
                Ok(op) => out.push(op),
                Err(TryRecvError::Empty | TryRecvError::Disconnected) => break,
            }
        }
        out
    }

    /// Blocks until a commit arrives, the timeout passes or the
    /// connection drops.
    pub fn wait_commit(&self, timeout: Duration) -> Option<DatasetOp> {
        self.commits.recv_timeout(timeout).ok()
    }

    pub fn close(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        self.alive.store(false, Ordering::SeqCst);
    }
}

impl Drop for SyncClient {
    fn drop(&mut self) {
        self.close();
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}
