//! Local API: the same 4-byte length + JSON framing as the sync server, one
//! request and one reply at a time per connection. A connection that sends
//! `SUBSCRIBE` turns into a one-way stream of [`Event`]s (live results and
//! sync notifications) and accepts nothing further.
//!
//! Images travel as base64-encoded PPM bytes.

use std::collections::BTreeSet;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use coml_core::domain::{Digest, ImageBlob, LabelId, SampleId, Split};
use coml_core::evaluation::GameExport;
use coml_core::wire::{read_json, write_json, MAX_FRAME_BYTES};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentError, DashboardPage, PhotoResult, RetrainOutcome, RoundResult, Stats};

/// How often the pump applies incoming commits when nobody is asking.
const PUMP_INTERVAL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Request {
    AddLabel {
        name: String,
    },
    RenameLabel {
        label: String,
        name: String,
    },
    DeleteLabel {
        label: String,
    },
    /// `label` is a live label name or id; a new name creates the label.
    Capture {
        label: String,
        split: Split,
        #[serde(default)]
        tags: BTreeSet<String>,
        image: String,
    },
    DeleteSample {
        sample: SampleId,
    },
    Relabel {
        sample: SampleId,
        label: String,
    },
    Retrain {
        seed: u64,
    },
    TestPhoto {
        image: String,
    },
    LiveStart,
    LiveStop,
    LiveFrame {
        image: String,
    },
    GameStart {
        seed: u64,
    },
    GameRound {
        image: String,
    },
    GameEnd,
    DashboardQuery {
        split: Split,
        page: usize,
    },
    StatsQuery,
    ExportModel,
    GetBlob {
        digest: Digest,
    },
    Subscribe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Response {
    Ok,
    LabelAdded { label: LabelId },
    Captured { sample: SampleId, digest: Digest },
    Retrained(RetrainOutcome),
    Photo(PhotoResult),
    /// A live frame dropped by the rate cap.
    Throttled,
    GameStarted { target: LabelId },
    Round(RoundResult),
    GameOver(GameExport),
    Dashboard(DashboardPage),
    Stats(Stats),
    Model { text: String },
    Blob { image: String },
    Subscribed,
    Error { kind: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Event {
    Live(PhotoResult),
    Synced { applied_seq: u64, digest: String },
    Disconnected,
}

impl Request {
    /// Whether the request can change what the agent persists.
    pub fn mutates(&self) -> bool {
        !matches!(
            self,
            Request::TestPhoto { .. }
                | Request::LiveStart
                | Request::LiveStop
                | Request::LiveFrame { .. }
                | Request::GameStart { .. }
                | Request::GameRound { .. }
                | Request::DashboardQuery { .. }
                | Request::StatsQuery
                | Request::ExportModel
                | Request::GetBlob { .. }
                | Request::Subscribe
        )
    }
}

pub fn encode_image(image: &ImageBlob) -> String {
    B64.encode(image.to_ppm())
}

pub fn decode_image(b64: &str) -> Result<ImageBlob, AgentError> {
    let bytes = B64
        .decode(b64.trim())
        .map_err(|e| AgentError::Encoding(e.to_string()))?;
    Ok(ImageBlob::from_ppm(&bytes)?)
}

fn error(e: AgentError) -> Response {
    Response::Error {
        kind: e.kind().to_string(),
        detail: e.to_string(),
    }
}

/// Runs one request against the agent. Used by the socket server and
/// in-process callers alike.
pub fn handle(agent: &mut Agent, req: Request) -> (Response, Option<Event>) {
    match dispatch(agent, req) {
        Ok(r) => r,
        Err(e) => (error(e), None),
    }
}

fn dispatch(agent: &mut Agent, req: Request) -> Result<(Response, Option<Event>), AgentError> {
    let plain = |r: Response| Ok((r, None));
    match req {
        Request::AddLabel { name } => plain(Response::LabelAdded {
            label: agent.add_label(&name)?,
        }),
        Request::RenameLabel { label, name } => {
            let id = agent.find_label(&label)?;
            agent.rename_label(id, &name)?;
            plain(Response::Ok)
        }
        Request::DeleteLabel { label } => {
            let id = agent.find_label(&label)?;
            agent.delete_label(id)?;
            plain(Response::Ok)
        }
        Request::Capture {
            label,
            split,
            tags,
            image,
        } => {
            let image = decode_image(&image)?;
            let digest = image.digest();
            let label = agent.ensure_label(&label)?;
            let sample = agent.capture(label, image, split, tags)?;
            plain(Response::Captured { sample, digest })
        }
        Request::DeleteSample { sample } => {
            agent.delete_sample(sample)?;
            plain(Response::Ok)
        }
        Request::Relabel { sample, label } => {
            let id = agent.find_label(&label)?;
            agent.relabel_sample(sample, id)?;
            plain(Response::Ok)
        }
        Request::Retrain { seed } => plain(Response::Retrained(agent.retrain(seed)?)),
        Request::TestPhoto { image } => {
            plain(Response::Photo(agent.test_photo(&decode_image(&image)?)?))
        }
        Request::LiveStart => {
            agent.live_start()?;
            plain(Response::Ok)
        }
        Request::LiveStop => {
            agent.live_stop();
            plain(Response::Ok)
        }
        Request::LiveFrame { image } => match agent.live_frame(&decode_image(&image)?)? {
            Some(r) => Ok((Response::Photo(r.clone()), Some(Event::Live(r)))),
            None => plain(Response::Throttled),
        },
        Request::GameStart { seed } => plain(Response::GameStarted {
            target: agent.game_start(seed)?,
        }),
        Request::GameRound { image } => {
            plain(Response::Round(agent.game_round(&decode_image(&image)?)?))
        }
        Request::GameEnd => plain(Response::GameOver(agent.game_end()?.export())),
        Request::DashboardQuery { split, page } => {
            agent.sync();
            plain(Response::Dashboard(agent.dashboard(split, page)))
        }
        Request::StatsQuery => {
            agent.sync();
            plain(Response::Stats(agent.stats()))
        }
        Request::ExportModel => plain(Response::Model {
            text: agent.export_model()?,
        }),
        Request::GetBlob { digest } => match agent.image(&digest) {
            Some(img) => plain(Response::Blob {
                image: encode_image(&img),
            }),
            None => Err(coml_core::training::TrainError::MissingBlob(digest).into()),
        },
        Request::Subscribe => plain(Response::Subscribed),
    }
}

struct Shared {
    agent: Arc<Mutex<Agent>>,
    subscribers: Mutex<Vec<TcpStream>>,
    stop: AtomicBool,
}

impl Shared {
    fn agent(&self) -> MutexGuard<'_, Agent> {
        self.agent.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn publish(&self, event: &Event) {
        let mut subs = self.subscribers.lock().unwrap_or_else(|p| p.into_inner());
        subs.retain_mut(|s| write_json(s, event).and_then(|_| s.flush()).is_ok());
    }
}

/// Serves the local API for one agent.
pub struct ApiServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl ApiServer {
    pub fn spawn(agent: Arc<Mutex<Agent>>, listen: impl ToSocketAddrs) -> io::Result<Self> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            agent,
            subscribers: Mutex::new(Vec::new()),
            stop: AtomicBool::new(false),
        });
        let accept = {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name("coml-api-accept".into())
                .spawn(move || {
                    for stream in listener.incoming() {
                        if shared.stop.load(Ordering::SeqCst) {
                            break;
                        }
                        let Ok(stream) = stream else { continue };
                        let shared = Arc::clone(&shared);
                        let _ = thread::Builder::new()
                            .name("coml-api-conn".into())
                            .spawn(move || {
                                if let Err(e) = serve_conn(&shared, stream) {
                                    log::debug!("api connection ended: {e}");
                                }
                            });
                    }
                })?
        };
        let pump = {
            let shared = Arc::clone(&shared);
            thread::Builder::new().name("coml-api-pump".into()).spawn(move || {
                let mut was_live = true;
                while !shared.stop.load(Ordering::SeqCst) {
                    thread::sleep(PUMP_INTERVAL);
                    let (synced, live) = {
                        let mut agent = shared.agent();
                        let synced = (agent.sync() > 0).then(|| Event::Synced {
                            applied_seq: agent.replica().applied_seq(),
                            digest: crate::hex_digest(&agent.canonical_digest()),
                        });
                        (synced, agent.connection() != crate::Connection::Offline)
                    };
                    if let Some(ev) = synced {
                        shared.publish(&ev);
                    }
                    if was_live && !live {
                        shared.publish(&Event::Disconnected);
                    }
                    was_live = live;
                }
            })?
        };
        Ok(ApiServer {
            addr,
            shared,
            threads: vec![accept, pump],
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn agent(&self) -> Arc<Mutex<Agent>> {
        Arc::clone(&self.shared.agent)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(std::net::Ipv4Addr::LOCALHOST.into());
        }
        let _ = TcpStream::connect_timeout(&wake, Duration::from_secs(1));
        for s in self.shared.subscribers.lock().unwrap_or_else(|p| p.into_inner()).drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ApiServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve_conn(shared: &Shared, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut input = BufReader::new(stream.try_clone()?);
    let mut out = BufWriter::new(stream.try_clone()?);
    while let Some(req) = read_json::<_, Request>(&mut input, MAX_FRAME_BYTES * 2)? {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        if req == Request::Subscribe {
            write_json(&mut out, &Response::Subscribed)?;
            out.flush()?;
            shared
                .subscribers
                .lock()
                .unwrap_or_else(|p| p.into_inner())
                .push(stream);
            return Ok(());
        }
        let (resp, event) = {
            let mut agent = shared.agent();
            let persist = req.mutates();
            let r = handle(&mut agent, req);
            if persist {
                if let Err(e) = agent.save() {
                    log::warn!("could not save agent state: {e}");
                }
            }
            r
        };
        write_json(&mut out, &resp)?;
        out.flush()?;
        if let Some(ev) = event {
            shared.publish(&ev);
        }
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("agent closed the connection")]
    Closed,
    #[error("{kind}: {detail}")]
    Agent { kind: String, detail: String },
}

/// Blocking client for the local API.
pub struct ApiClient {
    input: BufReader<TcpStream>,
    out: BufWriter<TcpStream>,
}

impl ApiClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ApiError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(ApiClient {
            input: BufReader::new(stream.try_clone()?),
            out: BufWriter::new(stream),
        })
    }

    /// Sends one request. Agent-side failures come back as
    /// [`ApiError::Agent`].
    pub fn call(&mut self, req: &Request) -> Result<Response, ApiError> {
        write_json(&mut self.out, req)?;
        self.out.flush()?;
        match read_json(&mut self.input, MAX_FRAME_BYTES * 2)? {
            Some(Response::Error { kind, detail }) => Err(ApiError::Agent { kind, detail }),
            Some(r) => Ok(r),
            None => Err(ApiError::Closed),
        }
    }

    /// Turns this connection into an event stream.
    pub fn subscribe(mut self) -> Result<EventStream, ApiError> {
        self.call(&Request::Subscribe)?;
        Ok(EventStream { input: self.input })
    }
}

pub struct EventStream {
    input: BufReader<TcpStream>,
}

impl EventStream {
    /// Waits up to `timeout` for the next event; `Ok(None)` on timeout.
    pub fn next(&mut self, timeout: Duration) -> Result<Option<Event>, ApiError> {
        self.input.get_ref().set_read_timeout(Some(timeout))?;
        match read_json(&mut self.input, MAX_FRAME_BYTES * 2) {
            Ok(Some(ev)) => Ok(Some(ev)),
            Ok(None) => Err(ApiError::Closed),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requests_use_screaming_tags() {
        let j = serde_json::to_value(Request::DashboardQuery {
            split: Split::Testing,
            page: 2,
        })
        .unwrap();
        assert_eq!(j["type"], "DASHBOARD_QUERY");
        assert_eq!(j["page"], 2);
        let back: Request = serde_json::from_value(j).unwrap();
        assert_eq!(
            back,
            Request::DashboardQuery {
                split: Split::Testing,
                page: 2
            }
        );
        let j = serde_json::to_value(Request::LiveStart).unwrap();
        assert_eq!(j, serde_json::json!({"type": "LIVE_START"}));
    }

    #[test]
    fn images_round_trip_through_base64() {
        let img = ImageBlob::solid(3, 2, [9, 8, 7]).unwrap();
        assert_eq!(decode_image(&encode_image(&img)).unwrap(), img);
        assert!(matches!(decode_image("@@@"), Err(AgentError::Encoding(_))));
    }
}
