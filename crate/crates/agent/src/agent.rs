use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use coml_core::domain::{
    DeviceId, Digest, IdGen, ImageBlob, ImageError, LabelId, ProjectId, ProjectState, SampleId,
    Split,
};
use coml_core::evaluation::{
    dashboard_order, evaluate_all, micro_accuracy, weighted_accuracy, ClassificationRecord,
    EvalError, GameError, GameExport, GameRound, GameRunner, GameSession,
};
use coml_core::replication::{Applied, ApplyError, DatasetOp, Intent, OpKind, ReplicatedProject, ValidationError};
use coml_core::telemetry::{retrain_stats, ActivityEvent, ActivityLog, EventKind, RetrainStats};
use coml_core::training::{ClassifyError, ConfidenceVector, Hyper, TrainError, TrainedModel, TrainingEngine};
use coml_sync::{ErrorCode, SyncClient, SyncError, Token};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, SystemClock};

/// Items per dashboard page.
pub const PAGE_SIZE: usize = 25;
/// Live classification is capped at this many evaluations per second.
pub const LIVE_MAX_PER_SEC: u64 = 10;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("image is not valid base64: {0}")]
    Encoding(String),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Apply(#[from] ApplyError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("no model has been trained on this device yet")]
    NoModel,
    #[error("no game in progress")]
    NoGame,
    #[error("a game is already in progress")]
    GameInProgress,
    #[error("live classification is not running")]
    LiveStopped,
    #[error("not connected to a server")]
    Offline,
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("corrupt agent state: {0}")]
    State(String),
}

impl AgentError {
    /// Stable short name for API error replies.
    pub fn kind(&self) -> &'static str {
        match self {
            AgentError::Validation(_) => "validation",
            AgentError::Sync(e) if e.is_connectivity() => "connectivity",
            AgentError::Sync(_) => "server",
            AgentError::Train(TrainError::InsufficientData(_)) => "insufficient_data",
            AgentError::Train(_) => "training",
            AgentError::Eval(_) => "evaluation",
            AgentError::Game(_) => "game",
            AgentError::Image(_) | AgentError::Encoding(_) => "malformed_image",
            AgentError::Classify(_) => "classify",
            AgentError::Apply(_) => "replication",
            AgentError::Io(_) => "io",
            AgentError::NoModel => "no_model",
            AgentError::NoGame => "no_game",
            AgentError::GameInProgress => "game_in_progress",
            AgentError::LiveStopped => "live_stopped",
            AgentError::Offline => "offline",
            AgentError::UnknownLabel(_) => "unknown_label",
            AgentError::State(_) => "state",
        }
    }

    pub fn is_connectivity(&self) -> bool {
        matches!(self, AgentError::Offline) || matches!(self, AgentError::Sync(e) if e.is_connectivity())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connection {
    Offline,
    Syncing,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Remote {
    pub addr: String,
    pub token: Token,
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub device: DeviceId,
    /// Seeds id generation; `None` draws from the OS.
    pub seed: Option<u64>,
    pub hyper: Hyper,
    /// Where to keep the replica, blobs, model and activity log between runs.
    pub state_dir: Option<PathBuf>,
}

impl AgentConfig {
    pub fn new(device: DeviceId) -> Self {
        AgentConfig {
            device,
            seed: None,
            hyper: Hyper::default(),
            state_dir: None,
        }
    }

    pub fn seeded(device: DeviceId, seed: u64) -> Self {
        AgentConfig {
            seed: Some(seed),
            ..Self::new(device)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainOutcome {
    pub model_version: u64,
    pub labels: Vec<LabelId>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub correct: usize,
    /// `None` when there is no test data.
    pub weighted_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelConfidence {
    pub label: LabelId,
    pub name: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotoResult {
    pub model_version: u64,
    pub predicted: LabelId,
    pub predicted_name: String,
    /// One entry per model label, in the model's label order.
    pub confidences: Vec<LabelConfidence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub target: LabelId,
    pub confidence: f64,
    pub score: f64,
    pub total_score: f64,
    /// Target for the following round; `None` when time is up.
    pub next_target: Option<LabelId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordView {
    pub model_version: u64,
    pub predicted: LabelId,
    pub correct: bool,
    pub confidence: ConfidenceVector,
    pub user_corrected_label: Option<LabelId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DashboardItem {
    pub sample_id: SampleId,
    pub label: LabelId,
    pub label_name: String,
    pub split: Split,
    pub blob: Digest,
    pub created_by: DeviceId,
    pub created_at: u64,
    pub seq: u64,
    pub tags: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<RecordView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DashboardPage {
    pub split: Split,
    /// 1-based.
    pub page: usize,
    pub pages: usize,
    pub total: usize,
    pub items: Vec<DashboardItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub id: LabelId,
    pub name: String,
    pub train: usize,
    pub test: usize,
    pub train_pct: f64,
    pub test_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub project: ProjectId,
    pub device: DeviceId,
    pub connection: Connection,
    pub applied_seq: u64,
    pub pending: usize,
    pub digest: String,
    pub labels: Vec<LabelStats>,
    pub train_total: usize,
    pub test_total: usize,
    pub model_version: Option<u64>,
    /// Over the test images the current model has evaluated.
    pub weighted_accuracy: Option<f64>,
    pub micro_accuracy: Option<f64>,
    pub retrain: RetrainStats,
    pub high_score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Saved {
    project: ProjectId,
    device: DeviceId,
    remote: Option<Remote>,
    high_score: f64,
    log: Vec<DatasetOp>,
    pending: Vec<DatasetOp>,
    records: Vec<ClassificationRecord>,
}

const SAVED: &str = "agent.json";
const MODEL: &str = "model.coml";
const ACTIVITY: &str = "activity.ndjson";
const BLOBS: &str = "blobs";

struct Live {
    active: bool,
    last_eval_ms: Option<u64>,
}

/// One device's view of one project.
pub struct Agent {
    config: AgentConfig,
    replica: ReplicatedProject,
    ids: IdGen,
    engine: TrainingEngine,
    model: Option<TrainedModel>,
    records: Vec<ClassificationRecord>,
    log: ActivityLog,
    blobs: HashMap<Digest, ImageBlob>,
    remote: Option<Remote>,
    client: Option<SyncClient>,
    connection: Connection,
    clock: Arc<dyn Clock>,
    high_score: f64,
    game: Option<GameRunner>,
    live: Live,
}

impl Agent {
    /// A fresh, offline agent for `project`.
    pub fn new(project: ProjectId, config: AgentConfig) -> Result<Self, AgentError> {
        Self::with_clock(project, config, Arc::new(SystemClock))
    }

    pub fn with_clock(
        project: ProjectId,
        config: AgentConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, AgentError> {
        let log = match &config.state_dir {
            Some(dir) => {
                fs::create_dir_all(dir.join(BLOBS))?;
                ActivityLog::open(&dir.join(ACTIVITY))?
            }
            None => ActivityLog::new(),
        };
        let ids = match config.seed {
            Some(s) => IdGen::seeded(s),
            None => IdGen::from_entropy(),
        };
        Ok(Agent {
            replica: ReplicatedProject::new(project, config.device),
            engine: TrainingEngine::new(config.device).with_hyper(config.hyper.clone()),
            ids,
            model: None,
            records: Vec::new(),
            log,
            blobs: HashMap::new(),
            remote: None,
            client: None,
            connection: Connection::Offline,
            clock,
            high_score: 0.0,
            game: None,
            live: Live {
                active: false,
                last_eval_ms: None,
            },
            config,
        })
    }

    /// Reloads an agent saved in `state_dir`. The device id and project come
    /// from the saved state.
    pub fn open(state_dir: &Path, seed: Option<u64>, hyper: Hyper) -> Result<Self, AgentError> {
        let saved: Saved = serde_json::from_slice(&fs::read(state_dir.join(SAVED))?)
            .map_err(|e| AgentError::State(format!("{SAVED}: {e}")))?;
        let config = AgentConfig {
            device: saved.device,
            seed: None,
            hyper,
            state_dir: Some(state_dir.to_path_buf()),
        };
        let mut agent = Self::new(saved.project, config)?;
        agent.replica =
            ReplicatedProject::restore(saved.project, saved.device, &saved.log, saved.pending)?;
        // A reopened agent must never replay ids it already issued.
        agent.ids = match seed {
            Some(s) => IdGen::seeded(s ^ agent.replica.clock().rotate_left(32) ^ saved.log.len() as u64),
            None => IdGen::from_entropy(),
        };
        agent.config.seed = seed;
        agent.remote = saved.remote;
        agent.high_score = saved.high_score;
        agent.records = saved.records;
        let model_path = state_dir.join(MODEL);
        if model_path.is_file() {
            let model = TrainedModel::from_file_str(&fs::read_to_string(&model_path)?)
                .map_err(|e| AgentError::State(format!("{MODEL}: {e}")))?;
            agent.engine = TrainingEngine::new(saved.device)
                .with_hyper(agent.config.hyper.clone())
                .resume_after(model.version);
            agent.model = Some(model);
        }
        Ok(agent)
    }

    /// Writes replica, records and settings to the state directory, if any.
    pub fn save(&self) -> Result<(), AgentError> {
        let Some(dir) = &self.config.state_dir else {
            return Ok(());
        };
        let saved = Saved {
            project: self.replica.id(),
            device: self.config.device,
            remote: self.remote.clone(),
            high_score: self.high_score,
            log: self.replica.delta_since(0).expect("0 is never ahead").to_vec(),
            pending: self.replica.pending().to_vec(),
            records: self.records.clone(),
        };
        let tmp = dir.join(format!("{SAVED}.tmp"));
        fs::write(&tmp, serde_json::to_vec(&saved).map_err(io::Error::other)?)?;
        fs::rename(&tmp, dir.join(SAVED))?;
        Ok(())
    }

    pub fn device(&self) -> DeviceId {
        self.config.device
    }

    pub fn project(&self) -> ProjectId {
        self.replica.id()
    }

    pub fn replica(&self) -> &ReplicatedProject {
        &self.replica
    }

    pub fn state(&self) -> &ProjectState {
        self.replica.state()
    }

    pub fn canonical_digest(&self) -> [u8; 32] {
        self.replica.canonical_digest()
    }

    pub fn connection(&self) -> Connection {
        self.connection
    }

    pub fn remote(&self) -> Option<&Remote> {
        self.remote.as_ref()
    }

    pub fn model(&self) -> Option<&TrainedModel> {
        self.model.as_ref()
    }

    pub fn records(&self) -> &[ClassificationRecord] {
        &self.records
    }

    pub fn activity(&self) -> &ActivityLog {
        &self.log
    }

    pub fn high_score(&self) -> f64 {
        self.high_score
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn record_event(&mut self, kind: EventKind) -> Result<(), AgentError> {
        let event = ActivityEvent {
            event_id: self.ids.event(),
            project: self.replica.id(),
            device: self.config.device,
            ts: self.clock.now_ms(),
            kind,
        };
        self.log.record(event)?;
        Ok(())
    }

    // ---- connection ----

    /// Connects to `addr`, catches up and pushes any queued local ops.
    pub fn connect(&mut self, addr: &str, token: Token) -> Result<(), AgentError> {
        self.remote = Some(Remote {
            addr: addr.to_string(),
            token,
        });
        self.reconnect()
    }

    /// Reconnects to the last server.
    pub fn reconnect(&mut self) -> Result<(), AgentError> {
        let remote = self.remote.clone().ok_or(AgentError::Offline)?;
        self.client = None;
        self.connection = Connection::Syncing;
        let result = (|| {
            let mut client = SyncClient::connect(remote.addr.as_str())?;
            let (ops, _head) = client.hello(
                self.replica.id(),
                &remote.token,
                self.config.device,
                self.replica.applied_seq(),
            )?;
            self.replica.apply_batch(&ops)?;
            self.client = Some(client);
            self.flush_pending()
        })();
        match result {
            Ok(()) => {
                self.connection = Connection::Live;
                self.sync();
                Ok(())
            }
            Err(e) => {
                self.client = None;
                self.connection = Connection::Offline;
                Err(e)
            }
        }
    }

    pub fn disconnect(&mut self) {
        self.client = None;
        self.connection = Connection::Offline;
    }

    fn go_offline(&mut self, why: &dyn std::fmt::Display) {
        log::warn!("device {}: lost connection: {why}", self.config.device.short());
        self.client = None;
        self.connection = Connection::Offline;
    }

    /// Resends every pending op, uploading blobs first.
    fn flush_pending(&mut self) -> Result<(), AgentError> {
        let pending = self.replica.pending().to_vec();
        for op in &pending {
            self.push(op)?;
        }
        Ok(())
    }

    fn put_blob(&mut self, digest: &Digest) -> Result<(), AgentError> {
        let ppm = match self.blob(digest) {
            Some(b) => b.to_ppm(),
            None => return Err(TrainError::MissingBlob(*digest).into()),
        };
        let token = self.remote.as_ref().ok_or(AgentError::Offline)?.token.clone();
        let client = self.client.as_mut().ok_or(AgentError::Offline)?;
        client.put_blob(&token, &ppm)?;
        Ok(())
    }

    /// Sends one op to the server. A missing blob is uploaded and the op
    /// retried once.
    fn push(&mut self, op: &DatasetOp) -> Result<(), AgentError> {
        let token = self.remote.as_ref().ok_or(AgentError::Offline)?.token.clone();
        let client = self.client.as_mut().ok_or(AgentError::Offline)?;
        match client.submit(&token, op) {
            Ok(_) => {}
            Err(e) if e.code() == Some(ErrorCode::MissingBlob) => {
                let blob = op.blob().expect("only AddSample needs a blob");
                self.put_blob(&blob)?;
                let client = self.client.as_mut().ok_or(AgentError::Offline)?;
                client.submit(&token, op)?;
            }
            Err(e) => return Err(e.into()),
        }
        // Our commit is queued ahead of the ack; apply it now.
        self.sync();
        Ok(())
    }

    /// Applies commits that have arrived. Returns how many were new.
    pub fn sync(&mut self) -> usize {
        let Some(client) = &self.client else {
            return 0;
        };
        let ops = client.poll_commits();
        let alive = client.is_connected();
        let n = match self.replica.apply_batch(&ops) {
            Ok(n) => n,
            Err(e) => {
                self.go_offline(&e);
                return 0;
            }
        };
        if !alive {
            self.go_offline(&"server closed the connection");
        }
        if n > 0 {
            self.prefetch();
        }
        n
    }

    /// Downloads images of newly synced samples so the device can keep
    /// training if it goes offline.
    fn prefetch(&mut self) {
        if let Err(e) = self.ensure_blobs() {
            log::warn!("prefetch: {e}");
        }
    }

    /// Waits until every op the server had sequenced when called has been
    /// applied here.
    pub fn settle(&mut self, timeout: Duration) -> Result<(), AgentError> {
        let client = self.client.as_mut().ok_or(AgentError::Offline)?;
        let head = match client.ping() {
            Ok(h) => h,
            Err(e) => {
                self.go_offline(&e);
                return Err(e.into());
            }
        };
        let deadline = Instant::now() + timeout;
        loop {
            self.sync();
            if self.replica.applied_seq() >= head {
                return Ok(());
            }
            let client = self.client.as_ref().ok_or(AgentError::Offline)?;
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(SyncError::Timeout(timeout).into());
            }
            if let Some(op) = client.wait_commit(left.min(Duration::from_millis(50))) {
                if self.replica.apply(&op)? == Applied::New {
                    self.prefetch();
                }
            }
        }
    }

    /// Applies an intent locally and sends it if connected. Offline, the op
    /// waits in the pending queue.
    fn submit(&mut self, intent: Intent) -> Result<DatasetOp, AgentError> {
        self.sync();
        let op = self.replica.local_submit(intent, &mut self.ids)?;
        if self.client.is_some() {
            match self.push(&op) {
                Ok(()) => {}
                Err(e) if e.is_connectivity() => self.go_offline(&e),
                Err(e) => return Err(e),
            }
        }
        Ok(op)
    }

    // ---- dataset ----

    /// Resolves a label by live name, or by id.
    pub fn find_label(&self, name_or_id: &str) -> Result<LabelId, AgentError> {
        let state = self.replica.state();
        if let Some(l) = state.live_label_named(name_or_id) {
            return Ok(l.id);
        }
        match name_or_id.parse::<LabelId>() {
            Ok(id) if state.is_live_label(id) => Ok(id),
            _ => Err(AgentError::UnknownLabel(name_or_id.to_string())),
        }
    }

    pub fn label_name(&self, id: LabelId) -> String {
        self.replica
            .state()
            .display_names()
            .remove(&id)
            .unwrap_or_else(|| id.short())
    }

    pub fn add_label(&mut self, name: &str) -> Result<LabelId, AgentError> {
        let op = self.submit(Intent::AddLabel { name: name.into() })?;
        match op.kind {
            OpKind::AddLabel { label_id, .. } => Ok(label_id),
            _ => unreachable!("AddLabel intent yields AddLabel op"),
        }
    }

    /// Returns the live label with this name, creating it if needed.
    pub fn ensure_label(&mut self, name: &str) -> Result<LabelId, AgentError> {
        match self.replica.state().live_label_named(name.trim()) {
            Some(l) => Ok(l.id),
            None => self.add_label(name),
        }
    }

    pub fn rename_label(&mut self, label: LabelId, name: &str) -> Result<(), AgentError> {
        self.submit(Intent::RenameLabel {
            label,
            name: name.into(),
        })?;
        Ok(())
    }

    pub fn delete_label(&mut self, label: LabelId) -> Result<(), AgentError> {
        self.submit(Intent::DeleteLabel { label })?;
        Ok(())
    }

    /// Stores the image, uploads it, then adds the sample.
    pub fn capture(
        &mut self,
        label: LabelId,
        image: ImageBlob,
        split: Split,
        tags: BTreeSet<String>,
    ) -> Result<SampleId, AgentError> {
        let digest = image.digest();
        self.store_blob(image)?;
        if self.client.is_some() {
            match self.put_blob(&digest) {
                Ok(()) => {}
                Err(e) if e.is_connectivity() => self.go_offline(&e),
                Err(e) => return Err(e),
            }
        }
        let op = self.submit(Intent::AddSample {
            label,
            split,
            blob: digest,
            created_at: self.clock.now_ms(),
            tags,
        })?;
        let OpKind::AddSample { sample } = op.kind else {
            unreachable!("AddSample intent yields AddSample op")
        };
        self.record_event(EventKind::SampleAdded {
            sample_id: sample.id,
            label,
            split,
            blob: Some(digest),
        })?;
        Ok(sample.id)
    }

    pub fn capture_ppm(
        &mut self,
        label: LabelId,
        ppm: &[u8],
        split: Split,
        tags: BTreeSet<String>,
    ) -> Result<SampleId, AgentError> {
        let image = ImageBlob::from_ppm(ppm)?;
        self.capture(label, image, split, tags)
    }

    pub fn delete_sample(&mut self, sample: SampleId) -> Result<(), AgentError> {
        self.submit(Intent::DeleteSample { sample })?;
        self.record_event(EventKind::SampleDeleted { sample_id: sample })
    }

    pub fn tag_sample(&mut self, sample: SampleId, tags: BTreeSet<String>) -> Result<(), AgentError> {
        self.submit(Intent::TagSample { sample, tags })?;
        Ok(())
    }

    /// Moves a sample to another label, e.g. to correct a test image the
    /// model got wrong. Correctness is recomputed on the next evaluation.
    pub fn relabel_sample(&mut self, sample: SampleId, label: LabelId) -> Result<(), AgentError> {
        self.submit(Intent::RelabelSample { sample, label })?;
        if let Some(r) = self.records.iter_mut().find(|r| r.sample_id == sample) {
            r.user_corrected_label = Some(label);
        }
        Ok(())
    }

    // ---- blobs ----

    fn blob_path(&self, digest: &Digest) -> Option<PathBuf> {
        self.config
            .state_dir
            .as_ref()
            .map(|d| d.join(BLOBS).join(format!("{}.ppm", digest.to_hex())))
    }

    fn store_blob(&mut self, image: ImageBlob) -> Result<(), AgentError> {
        let digest = image.digest();
        if let Some(path) = self.blob_path(&digest) {
            if !path.is_file() {
                fs::write(&path, image.to_ppm())?;
            }
        }
        self.blobs.insert(digest, image);
        Ok(())
    }

    fn blob(&mut self, digest: &Digest) -> Option<&ImageBlob> {
        if !self.blobs.contains_key(digest) {
            let bytes = fs::read(self.blob_path(digest)?).ok()?;
            let image = ImageBlob::from_ppm(&bytes).ok()?;
            self.blobs.insert(*digest, image);
        }
        self.blobs.get(digest)
    }

    /// Loads or downloads the image of every live sample.
    pub fn ensure_blobs(&mut self) -> Result<(), AgentError> {
        let wanted: BTreeSet<Digest> = self
            .replica
            .state()
            .live_samples()
            .map(|s| s.blob)
            .collect();
        for d in wanted {
            if self.blob(&d).is_some() {
                continue;
            }
            let (Some(client), Some(remote)) = (self.client.as_mut(), self.remote.as_ref()) else {
                continue;
            };
            match client.get_blob(&remote.token, &d) {
                Ok(bytes) => {
                    let image = ImageBlob::from_ppm(&bytes)?;
                    self.store_blob(image)?;
                }
                Err(e) if e.is_connectivity() => {
                    self.go_offline(&e);
                    break;
                }
                // Deleted elsewhere in the meantime; training will notice.
                Err(e) => log::warn!("blob {d}: {e}"),
            }
        }
        Ok(())
    }

    pub fn image(&mut self, digest: &Digest) -> Option<ImageBlob> {
        if self.blob(digest).is_none() {
            let _ = self.ensure_blobs();
        }
        self.blob(digest).cloned()
    }

    // ---- model ----

    /// Trains a new local model on the current dataset and re-evaluates every
    /// test image with it.
    pub fn retrain(&mut self, seed: u64) -> Result<RetrainOutcome, AgentError> {
        self.sync();
        self.ensure_blobs()?;
        let now = self.clock.now_ms();
        let state = self.replica.state();
        let model = self.engine.train(state, &self.blobs, seed, now)?;
        let records = evaluate_all(state, &model, &self.blobs, now)?;
        let mut per_label: BTreeMap<LabelId, (usize, usize)> = BTreeMap::new();
        for r in &records {
            let e = per_label.entry(r.actual).or_default();
            e.1 += 1;
            if r.correct {
                e.0 += 1;
            }
        }
        let outcome = RetrainOutcome {
            model_version: model.version,
            labels: model.label_order.clone(),
            train_samples: model.train_sample_count,
            test_samples: records.len(),
            correct: records.iter().filter(|r| r.correct).count(),
            weighted_accuracy: accuracy(&records).map(|(w, _)| w),
        };
        if let Some(dir) = &self.config.state_dir {
            fs::write(dir.join(MODEL), model.to_file_string())?;
        }
        // Swap model and verdicts together.
        self.model = Some(model);
        self.records = records;
        self.record_event(EventKind::ModelTrained {
            version: outcome.model_version,
            per_label_test_correct: per_label,
        })?;
        Ok(outcome)
    }

    /// Re-runs the current model over the current test images.
    pub fn evaluate(&mut self) -> Result<&[ClassificationRecord], AgentError> {
        self.sync();
        self.ensure_blobs()?;
        let model = self.model.as_ref().ok_or(AgentError::NoModel)?;
        let now = self.clock.now_ms();
        self.records = evaluate_all(self.replica.state(), model, &self.blobs, now)?;
        Ok(&self.records)
    }

    fn photo_result(&self, model: &TrainedModel, conf: &ConfidenceVector) -> PhotoResult {
        let names = self.replica.state().display_names();
        let name = |id: LabelId| names.get(&id).cloned().unwrap_or_else(|| id.short());
        let predicted = model.label_at(conf.top1());
        PhotoResult {
            model_version: model.version,
            predicted,
            predicted_name: name(predicted),
            confidences: model
                .label_order
                .iter()
                .zip(conf.probs())
                .map(|(&label, &confidence)| LabelConfidence {
                    label,
                    name: name(label),
                    confidence,
                })
                .collect(),
        }
    }

    /// Classifies one photo without storing it.
    pub fn test_photo(&self, image: &ImageBlob) -> Result<PhotoResult, AgentError> {
        let model = self.model.as_ref().ok_or(AgentError::NoModel)?;
        let conf = model.classify(image)?;
        Ok(self.photo_result(model, &conf))
    }

    pub fn export_model(&self) -> Result<String, AgentError> {
        Ok(self
            .model
            .as_ref()
            .ok_or(AgentError::NoModel)?
            .to_file_string())
    }

    // ---- live classification ----

    pub fn live_start(&mut self) -> Result<(), AgentError> {
        if self.model.is_none() {
            return Err(AgentError::NoModel);
        }
        if !self.live.active {
            self.live = Live {
                active: true,
                last_eval_ms: None,
            };
            self.record_event(EventKind::LiveClassificationStarted)?;
        }
        Ok(())
    }

    pub fn live_stop(&mut self) {
        self.live.active = false;
    }

    pub fn live_active(&self) -> bool {
        self.live.active
    }

    /// Classifies a streamed frame, or returns `None` when the frame arrives
    /// sooner than the rate cap allows.
    pub fn live_frame(&mut self, image: &ImageBlob) -> Result<Option<PhotoResult>, AgentError> {
        if !self.live.active {
            return Err(AgentError::LiveStopped);
        }
        let now = self.clock.now_ms();
        let min_gap = 1000 / LIVE_MAX_PER_SEC;
        if let Some(last) = self.live.last_eval_ms {
            if now < last + min_gap {
                return Ok(None);
            }
        }
        self.live.last_eval_ms = Some(now);
        self.test_photo(image).map(Some)
    }

    // ---- game ----

    /// Starts a game over the current model's labels; returns the first
    /// target.
    pub fn game_start(&mut self, seed: u64) -> Result<LabelId, AgentError> {
        if self.game.is_some() {
            return Err(AgentError::GameInProgress);
        }
        let model = self.model.as_ref().ok_or(AgentError::NoModel)?;
        let mut runner = GameRunner::new(model.label_order.clone(), seed, self.high_score)?;
        let first = runner.next_target().expect("a new game has time left");
        self.game = Some(runner);
        self.record_event(EventKind::GameStarted { seed })?;
        Ok(first)
    }

    pub fn game_target(&self) -> Option<LabelId> {
        self.game.as_ref().and_then(|g| g.current_target())
    }

    pub fn game_in_progress(&self) -> bool {
        self.game.is_some()
    }

    /// Ends the current round with `image` as the frame on screen.
    pub fn game_round(&mut self, image: &ImageBlob) -> Result<RoundResult, AgentError> {
        let model = self.model.as_ref().ok_or(AgentError::NoModel)?;
        let game = self.game.as_mut().ok_or(AgentError::NoGame)?;
        let Some(target) = game.current_target().or_else(|| game.next_target()) else {
            return Err(AgentError::NoGame);
        };
        let conf = model.classify(image)?;
        let pos = model.position(target).expect("targets come from the model");
        let round: GameRound = game
            .finish_round(conf.probs()[pos])
            .expect("target was set")
            .clone();
        Ok(RoundResult {
            round: game.rounds().len(),
            target,
            confidence: round.final_confidence,
            score: round.score,
            total_score: game.total_score(),
            next_target: game.next_target(),
        })
    }

    pub fn game_end(&mut self) -> Result<GameSession, AgentError> {
        let game = self.game.take().ok_or(AgentError::NoGame)?;
        let session = game.finish();
        self.high_score = self.high_score.max(session.high_score);
        self.record_event(EventKind::GameEnded {
            total_score: session.total_score,
        })?;
        Ok(session)
    }

    /// Plays a whole game headlessly: each image is the frame at the end of
    /// one round.
    pub fn play_game(
        &mut self,
        seed: u64,
        feed: impl IntoIterator<Item = ImageBlob>,
    ) -> Result<GameExport, AgentError> {
        self.game_start(seed)?;
        for image in feed {
            match self.game_round(&image) {
                Ok(r) if r.next_target.is_none() => break,
                Ok(_) => {}
                Err(e) => {
                    self.game = None;
                    return Err(e);
                }
            }
        }
        Ok(self.game_end()?.export())
    }

    // ---- queries ----

    fn item(&self, s: &coml_core::domain::Sample, names: &BTreeMap<LabelId, String>) -> DashboardItem {
        DashboardItem {
            sample_id: s.id,
            label: s.label,
            label_name: names.get(&s.label).cloned().unwrap_or_default(),
            split: s.split,
            blob: s.blob,
            created_by: s.created_by,
            created_at: s.created_at,
            seq: s.seq,
            tags: s.tags.clone(),
            record: None,
        }
    }

    /// One page of the training or testing dashboard. Training images are
    /// newest first; testing images follow the evaluation order, with images
    /// not yet evaluated at the end.
    pub fn dashboard(&self, split: Split, page: usize) -> DashboardPage {
        let state = self.replica.state();
        let names = state.display_names();
        let mut items: Vec<DashboardItem> = Vec::new();
        let newest_first = |a: &&coml_core::domain::Sample, b: &&coml_core::domain::Sample| {
            // Unsequenced (seq 0) local captures are the newest.
            let key = |s: &coml_core::domain::Sample| if s.seq == 0 { u64::MAX } else { s.seq };
            key(b).cmp(&key(a)).then(a.id.cmp(&b.id))
        };
        match split {
            Split::Training => {
                let mut samples: Vec<_> = state
                    .live_samples()
                    .filter(|s| s.split == Split::Training)
                    .collect();
                samples.sort_by(newest_first);
                items.extend(samples.into_iter().map(|s| self.item(s, &names)));
            }
            Split::Testing => {
                let live: Vec<ClassificationRecord> = self
                    .records
                    .iter()
                    .filter(|r| state.is_live_sample(r.sample_id))
                    .cloned()
                    .collect();
                let mut seen = BTreeSet::new();
                for r in dashboard_order(&live) {
                    let s = &state.samples[&r.sample_id];
                    seen.insert(s.id);
                    let mut item = self.item(s, &names);
                    item.record = Some(RecordView {
                        model_version: r.model_version,
                        predicted: r.predicted,
                        correct: r.correct,
                        confidence: r.confidence,
                        user_corrected_label: r.user_corrected_label,
                    });
                    items.push(item);
                }
                let mut rest: Vec<_> = state
                    .live_samples()
                    .filter(|s| s.split == Split::Testing && !seen.contains(&s.id))
                    .collect();
                rest.sort_by(newest_first);
                items.extend(rest.into_iter().map(|s| self.item(s, &names)));
            }
        }
        let total = items.len();
        let pages = total.div_ceil(PAGE_SIZE).max(1);
        let page = page.max(1);
        let items = items
            .into_iter()
            .skip((page - 1) * PAGE_SIZE)
            .take(PAGE_SIZE)
            .collect();
        DashboardPage {
            split,
            page,
            pages,
            total,
            items,
        }
    }

    pub fn stats(&self) -> Stats {
        let state = self.replica.state();
        let names = state.display_names();
        let counts = state.live_counts();
        let train_total: usize = counts.values().map(|c| c.0).sum();
        let test_total: usize = counts.values().map(|c| c.1).sum();
        let pct = |n: usize, t: usize| if t == 0 { 0.0 } else { 100.0 * n as f64 / t as f64 };
        let labels = counts
            .iter()
            .map(|(&id, &(train, test))| LabelStats {
                id,
                name: names.get(&id).cloned().unwrap_or_default(),
                train,
                test,
                train_pct: pct(train, train_total),
                test_pct: pct(test, test_total),
            })
            .collect();
        let live_records: Vec<ClassificationRecord> = self
            .records
            .iter()
            .filter(|r| state.is_live_sample(r.sample_id))
            .cloned()
            .collect();
        let acc = accuracy(&live_records);
        Stats {
            project: self.replica.id(),
            device: self.config.device,
            connection: self.connection,
            applied_seq: self.replica.applied_seq(),
            pending: self.replica.pending().len(),
            digest: hex_digest(&self.replica.canonical_digest()),
            labels,
            train_total,
            test_total,
            model_version: self.model.as_ref().map(|m| m.version),
            weighted_accuracy: acc.map(|a| a.0),
            micro_accuracy: acc.map(|a| a.1),
            retrain: retrain_stats(self.log.events()),
            high_score: self.high_score,
        }
    }
}

/// (weighted, micro) accuracy of a record set, counting each record's label
/// as one test image.
fn accuracy(records: &[ClassificationRecord]) -> Option<(f64, f64)> {
    let mut counts: BTreeMap<LabelId, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.actual).or_default() += 1;
    }
    let w = weighted_accuracy(records, &counts).ok()?;
    let m = micro_accuracy(records, &counts).ok()?;
    Some((w, m))
}

pub fn hex_digest(d: &[u8; 32]) -> String {
    Digest(*d).to_hex()
}
