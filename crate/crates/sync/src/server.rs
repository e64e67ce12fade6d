//! Threaded TCP sync server. One thread per connection plus a writer thread
//! that drains the connection's outgoing queue. Sequencing, persistence and
//! broadcast for a project all happen under that project's lock, so every
//! joined connection sees commits in sequence order.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{SystemTime, UNIX_EPOCH};

use coml_core::domain::{Digest, IdGen, ImageBlob, ProjectId};
use coml_core::replication::DatasetOp;
use coml_core::wire::{encode_json, read_frame, write_frame};

use crate::protocol::{ErrorCode, Message, Token};
use crate::sequencer::{Sequenced, SequenceError, Sequencer};
use crate::store::{BlobDir, ProjectMeta, ProjectStore, StoreError};

/// 3 * 4096 * 4096: one full-size RGB image.
pub const DEFAULT_MAX_BLOB_BYTES: usize = 50_331_648;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    pub max_blob_bytes: usize,
}

impl ServerConfig {
    pub fn new(listen: impl Into<String>, data_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            listen: listen.into(),
            data_dir: data_dir.into(),
            max_blob_bytes: DEFAULT_MAX_BLOB_BYTES,
        }
    }
}

type Outgoing = Arc<Vec<u8>>;

struct Live {
    store: ProjectStore,
    sequencer: Sequencer,
    subscribers: Vec<(u64, Sender<Outgoing>)>,
}

struct Project {
    id: ProjectId,
    token: Token,
    blobs: BlobDir,
    live: Mutex<Live>,
}

pub struct Server {
    config: ServerConfig,
    projects: RwLock<HashMap<ProjectId, Arc<Project>>>,
    connections: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
    stopping: AtomicBool,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Server {
    /// Loads every project under the data directory.
    pub fn open(config: ServerConfig) -> Result<Arc<Self>, StoreError> {
        std::fs::create_dir_all(&config.data_dir)?;
        let mut projects = HashMap::new();
        for (store, ops) in ProjectStore::open_all(&config.data_dir)? {
            let meta = store.meta().clone();
            let n = ops.len();
            let sequencer = Sequencer::from_log(ops).map_err(|e| StoreError::Corrupt {
                path: store.dir().to_path_buf(),
                detail: e.to_string(),
            })?;
            log::info!("loaded project {} ({n} ops)", meta.project_id);
            projects.insert(
                meta.project_id,
                Arc::new(Project {
                    id: meta.project_id,
                    token: meta.token,
                    blobs: store.blobs(),
                    live: Mutex::new(Live {
                        store,
                        sequencer,
                        subscribers: Vec::new(),
                    }),
                }),
            );
        }
        Ok(Arc::new(Server {
            config,
            projects: RwLock::new(projects),
            connections: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(1),
            stopping: AtomicBool::new(false),
        }))
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn create_project(&self, name: &str) -> Result<(ProjectId, Token), StoreError> {
        let project_id = IdGen::from_entropy().project();
        let token = Token::generate();
        let store = ProjectStore::create(
            &self.config.data_dir,
            ProjectMeta {
                project_id,
                name: name.to_string(),
                token: token.clone(),
                created_at: now_ms(),
            },
        )?;
        log::info!("created project {project_id} ({name:?})");
        self.projects.write().expect("projects lock").insert(
            project_id,
            Arc::new(Project {
                id: project_id,
                token: token.clone(),
                blobs: store.blobs(),
                live: Mutex::new(Live {
                    store,
                    sequencer: Sequencer::new(),
                    subscribers: Vec::new(),
                }),
            }),
        );
        Ok((project_id, token))
    }

    fn project(&self, id: &ProjectId) -> Option<Arc<Project>> {
        self.projects.read().expect("projects lock").get(id).cloned()
    }

    /// Sequenced log of a project, for inspection and tests.
    pub fn ops(&self, id: &ProjectId) -> Option<Vec<DatasetOp>> {
        self.project(id)
            .map(|p| p.live.lock().expect("project lock").sequencer.log().to_vec())
    }

    /// Binds the configured address and serves on a background thread.
    pub fn spawn(self: &Arc<Self>) -> io::Result<ServerHandle> {
        let listener = TcpListener::bind(&self.config.listen)?;
        let addr = listener.local_addr()?;
        let server = Arc::clone(self);
        let thread = thread::Builder::new()
            .name("coml-accept".into())
            .spawn(move || server.serve(listener))?;
        Ok(ServerHandle {
            addr,
            server: Arc::clone(self),
            thread: Some(thread),
        })
    }

    /// Accept loop; returns once [`ServerHandle::shutdown`] is called.
    pub fn serve(self: &Arc<Self>, listener: TcpListener) {
        for stream in listener.incoming() {
            if self.stopping.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let id = self.next_conn.fetch_add(1, Ordering::SeqCst);
            if let Ok(clone) = stream.try_clone() {
                self.connections
                    .lock()
                    .expect("connections lock")
                    .insert(id, clone);
            }
            let server = Arc::clone(self);
            let spawned = thread::Builder::new()
                .name(format!("coml-conn-{id}"))
                .spawn(move || {
                    let peer = stream.peer_addr().ok();
                    if let Err(e) = server.handle(id, stream) {
                        log::debug!("connection {id} ({peer:?}) ended: {e}");
                    }
                    server
                        .connections
                        .lock()
                        .expect("connections lock")
                        .remove(&id);
                });
            if let Err(e) = spawned {
                log::error!("cannot spawn connection thread: {e}");
            }
        }
    }

    fn handle(&self, conn: u64, stream: TcpStream) -> io::Result<()> {
        stream.set_nodelay(true)?;
        let (tx, rx) = mpsc::channel::<Outgoing>();
        let mut out = BufWriter::new(stream.try_clone()?);
        let writer = thread::Builder::new()
            .name(format!("coml-write-{conn}"))
            .spawn(move || {
                while let Ok(bytes) = rx.recv() {
                    if out.write_all(&bytes).is_err() {
                        break;
                    }
                    // Coalesce whatever is already queued before flushing.
                    while let Ok(more) = rx.try_recv() {
                        if out.write_all(&more).is_err() {
                            return;
                        }
                    }
                    if out.flush().is_err() {
                        break;
                    }
                }
            })?;
        let mut session = Session {
            conn,
            tx,
            project: None,
        };
        let result = self.read_loop(&mut session, BufReader::new(&stream));
        if let Some(p) = session.project.take() {
            p.live
                .lock()
                .expect("project lock")
                .subscribers
                .retain(|(c, _)| *c != conn);
        }
        drop(session);
        // The peer is gone or misbehaving; unblock the writer before joining.
        let _ = stream.shutdown(Shutdown::Both);
        let _ = writer.join();
        result
    }

    fn frame_limit(&self) -> usize {
        self.config.max_blob_bytes.max(1 << 20)
    }

    fn read_loop(&self, session: &mut Session, mut input: BufReader<&TcpStream>) -> io::Result<()> {
        while let Some(frame) = read_frame(&mut input, self.frame_limit())? {
            let msg: Message = match serde_json::from_slice(&frame) {
                Ok(m) => m,
                Err(e) => {
                    session.send(&Message::error(ErrorCode::BadRequest, e.to_string()));
                    continue;
                }
            };
            // Blob bodies travel in the frame right after the header.
            let payload = match &msg {
                Message::BlobPut { .. } => Some(
                    read_frame(&mut input, self.frame_limit())?
                        .ok_or(io::ErrorKind::UnexpectedEof)?,
                ),
                _ => None,
            };
            self.dispatch(session, msg, payload);
        }
        Ok(())
    }

    fn dispatch(&self, session: &mut Session, msg: Message, payload: Option<Vec<u8>>) {
        let reply = match msg {
            Message::CreateProject { name } => match self.create_project(&name) {
                Ok((project_id, token)) => Message::ProjectCreated { project_id, token },
                Err(e) => Message::error(ErrorCode::Storage, e.to_string()),
            },
            Message::Hello {
                project_id,
                token,
                device_id,
                last_seq,
            } => match self.hello(session, project_id, &token, last_seq) {
                Ok(()) => {
                    log::debug!("device {device_id} joined {project_id} at seq {last_seq}");
                    return;
                }
                Err(e) => e,
            },
            Message::OpSubmit { token, op } => self.submit(session, &token, op),
            Message::BlobPut { token, digest, len } => {
                self.put_blob(session, &token, digest, len, payload.unwrap_or_default())
            }
            Message::BlobGet { token, digest } => match self.get_blob(session, &token, &digest) {
                Ok(bytes) => {
                    let mut framed = encode_json(&Message::BlobData {
                        digest,
                        len: bytes.len() as u64,
                    });
                    write_frame(&mut framed, &bytes).expect("vec write");
                    session.send_raw(framed);
                    return;
                }
                Err(e) => e,
            },
            Message::Ping => Message::Pong {
                head: session
                    .project
                    .as_ref()
                    .map(|p| p.live.lock().expect("project lock").sequencer.head())
                    .unwrap_or(0),
            },
            other => Message::error(
                ErrorCode::BadRequest,
                format!("unexpected message {}", type_name(&other)),
            ),
        };
        session.send(&reply);
    }

    fn joined(&self, session: &Session, token: &Token) -> Result<Arc<Project>, Message> {
        let p = session
            .project
            .clone()
            .ok_or_else(|| Message::error(ErrorCode::NotJoined, "send HELLO first"))?;
        if !p.token.matches(token) {
            return Err(Message::error(ErrorCode::AuthFailure, "token does not open this project"));
        }
        Ok(p)
    }

    fn hello(
        &self,
        session: &mut Session,
        project_id: ProjectId,
        token: &Token,
        last_seq: u64,
    ) -> Result<(), Message> {
        let p = self
            .project(&project_id)
            .ok_or_else(|| Message::error(ErrorCode::UnknownProject, project_id.to_string()))?;
        if !p.token.matches(token) {
            return Err(Message::error(ErrorCode::AuthFailure, "token does not open this project"));
        }
        if let Some(old) = session.project.take() {
            old.live
                .lock()
                .expect("project lock")
                .subscribers
                .retain(|(c, _)| *c != session.conn);
        }
        let mut live = p.live.lock().expect("project lock");
        let delta = live.sequencer.delta_since(last_seq).map_err(|e| {
            Message::error(ErrorCode::SeqTooHigh, e.to_string())
        })?;
        // Reply and subscribe under the lock: nothing can slip between the
        // delta and the first broadcast.
        session.send(&Message::Delta {
            ops: delta.to_vec(),
            head: live.sequencer.head(),
        });
        live.subscribers.push((session.conn, session.tx.clone()));
        drop(live);
        session.project = Some(p);
        Ok(())
    }

    fn submit(&self, session: &Session, token: &Token, op: DatasetOp) -> Message {
        let op_id = op.op_id;
        let with_op = |mut m: Message| {
            if let Message::Error { op_id: o, .. } = &mut m {
                *o = Some(op_id);
            }
            m
        };
        let p = match self.joined(session, token) {
            Ok(p) => p,
            Err(e) => return with_op(e),
        };
        let mut live = p.live.lock().expect("project lock");
        let prepared = live.sequencer.prepare(&op, |d| p.blobs.contains(d));
        let op = match prepared {
            Ok(Sequenced::Duplicate(seq)) => {
                return Message::OpAck {
                    op_id,
                    seq,
                    duplicate: true,
                }
            }
            Ok(Sequenced::New(op)) => op,
            Err(SequenceError::MissingBlob(d)) => {
                return with_op(Message::error(ErrorCode::MissingBlob, d.to_hex()))
            }
            Err(SequenceError::MalformedOp(m)) => {
                return with_op(Message::error(ErrorCode::MalformedOp, m))
            }
        };
        if let Err(e) = live.store.append(&op) {
            log::error!("project {}: cannot persist op: {e}", p.id);
            return with_op(Message::error(ErrorCode::Storage, e.to_string()));
        }
        let seq = op.seq;
        let commit = Arc::new(encode_json(&Message::OpCommit { op: op.clone() }));
        let released = match live.sequencer.commit(op) {
            Ok(r) => r,
            Err(e) => {
                // prepare() checked everything apply() checks.
                log::error!("project {}: commit after prepare failed: {e}", p.id);
                return with_op(Message::error(ErrorCode::MalformedOp, e.to_string()));
            }
        };
        for d in released {
            if let Err(e) = p.blobs.remove(&d) {
                log::warn!("project {}: cannot drop blob {d}: {e}", p.id);
            }
        }
        live.subscribers
            .retain(|(_, tx)| tx.send(Arc::clone(&commit)).is_ok());
        Message::OpAck {
            op_id,
            seq,
            duplicate: false,
        }
    }

    fn put_blob(
        &self,
        session: &Session,
        token: &Token,
        digest: Digest,
        len: u64,
        bytes: Vec<u8>,
    ) -> Message {
        let p = match self.joined(session, token) {
            Ok(p) => p,
            Err(e) => return e,
        };
        if bytes.len() as u64 != len {
            return Message::error(
                ErrorCode::BadRequest,
                format!("announced {len} bytes, got {}", bytes.len()),
            );
        }
        if bytes.len() > self.config.max_blob_bytes {
            return Message::error(
                ErrorCode::BlobTooLarge,
                format!("{} bytes exceeds {}", bytes.len(), self.config.max_blob_bytes),
            );
        }
        let image = match ImageBlob::from_ppm(&bytes) {
            Ok(i) => i,
            Err(e) => return Message::error(ErrorCode::MalformedImage, e.to_string()),
        };
        if image.digest() != digest {
            return Message::error(
                ErrorCode::DigestMismatch,
                format!("content hashes to {}", image.digest()),
            );
        }
        match p.blobs.put(&digest, &bytes) {
            Ok(_) => Message::BlobAck { digest },
            Err(e) => Message::error(ErrorCode::Storage, e.to_string()),
        }
    }

    fn get_blob(&self, session: &Session, token: &Token, digest: &Digest) -> Result<Vec<u8>, Message> {
        let p = self.joined(session, token)?;
        match p.blobs.get(digest) {
            Ok(Some(b)) => Ok(b),
            Ok(None) => Err(Message::error(ErrorCode::UnknownDigest, digest.to_hex())),
            Err(e) => Err(Message::error(ErrorCode::Storage, e.to_string())),
        }
    }
}

fn type_name(m: &Message) -> String {
    serde_json::to_value(m)
        .ok()
        .and_then(|v| v.get("type").and_then(|t| t.as_str()).map(String::from))
        .unwrap_or_default()
}

struct Session {
    conn: u64,
    tx: Sender<Outgoing>,
    project: Option<Arc<Project>>,
}

impl Session {
    fn send(&self, msg: &Message) {
        self.send_raw(encode_json(msg));
    }

    fn send_raw(&self, bytes: Vec<u8>) {
        let _ = self.tx.send(Arc::new(bytes));
    }
}

/// A server running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    server: Arc<Server>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn server(&self) -> &Arc<Server> {
        &self.server
    }

    /// Drops every client connection without stopping the listener.
    pub fn disconnect_all(&self) {
        for s in self
            .server
            .connections
            .lock()
            .expect("connections lock")
            .values()
        {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    /// Stops accepting, closes all connections and joins the accept thread.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(t) = self.thread.take() {
            self.server.stopping.store(true, Ordering::SeqCst);
            // Wake the blocking accept.
            let mut wake = self.addr;
            if wake.ip().is_unspecified() {
                wake.set_ip(std::net::Ipv4Addr::LOCALHOST.into());
            }
            let _ = TcpStream::connect(wake);
            let _ = t.join();
            self.disconnect_all();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}
