//! Session scripts: NDJSON directives, one per line, each with a virtual
//! time, the device that acts, and what it does. Blank lines and lines
//! starting with `#` are ignored.
//!
//! ```text
//! {"at_ms": 0, "device": "p1", "directive": "join"}
//! {"at_ms": 500, "device": "p1", "directive": "capture", "label": "apple",
//!  "from": {"synth": {"rgb": [200, 40, 40]}}, "count": 5, "seed": 1}
//! {"at_ms": 9000, "device": "p1", "directive": "retrain"}
//! ```
//!
//! Directives run in file order against in-process agents that share one
//! virtual clock. Before each directive the acting device catches up with
//! the server, so a script always produces the same ops in the same order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use coml_agent::{hex_digest, Agent, AgentConfig, AgentError, Connection, ManualClock};
use coml_core::domain::{DeviceId, ImageBlob, LabelId, ProjectId, ProjectState, Split};
use coml_core::synth::SynthSpec;
use coml_core::telemetry::{retrain_stats, ActivityEvent};
use coml_core::training::Hyper;
use coml_sync::{Server, ServerConfig, ServerHandle, SyncClient, Token};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::import::ppm_files;

const SETTLE: Duration = Duration::from_secs(30);
const LIVE_FRAME_GAP_MS: u64 = 100;

#[derive(Debug, Error)]
#[error("line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("line {line}: {source}")]
    Agent {
        line: usize,
        #[source]
        source: AgentError,
    },
    #[error("server: {0}")]
    Server(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synth(SynthSpec),
    File(PathBuf),
    Dir(PathBuf),
}

fn training() -> Split {
    Split::Training
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "directive", rename_all = "snake_case")]
pub enum Directive {
    /// Declares the device and connects it to the project.
    Join,
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
    /// Adds images; an unknown label name is created first.
    Capture {
        label: String,
        #[serde(default = "training")]
        split: Split,
        #[serde(default)]
        tags: BTreeSet<String>,
        from: Source,
        /// Number of synthetic images to render.
        #[serde(default = "one")]
        count: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Deletes the `count` most recently sequenced live samples of a label.
    DeleteLatest {
        label: String,
        #[serde(default = "one")]
        count: usize,
        #[serde(default)]
        split: Option<Split>,
    },
    Retrain {
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Captures test images, then re-evaluates if the device has a model.
    Test {
        label: String,
        #[serde(default)]
        tags: BTreeSet<String>,
        from: Source,
        #[serde(default = "one")]
        count: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Streams frames to live classification, one per 100 ms of virtual time.
    Live {
        from: Source,
        #[serde(default = "one")]
        count: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Plays a full game, showing a training image of each target.
    Game {
        #[serde(default)]
        seed: u64,
    },
    Disconnect,
    Reconnect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub at_ms: u64,
    pub device: String,
    #[serde(flatten)]
    pub directive: Directive,
    #[serde(skip)]
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionScript {
    pub steps: Vec<Step>,
    /// Relative file and dir sources resolve against this.
    pub base_dir: PathBuf,
}

impl SessionScript {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ScriptError> {
        let mut steps: Vec<Step> = Vec::new();
        let mut declared = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut step: Step = serde_json::from_str(trimmed).map_err(|e| ScriptError {
                line,
                message: e.to_string(),
            })?;
            step.line = line;
            if let Some(prev) = steps.last() {
                if step.at_ms < prev.at_ms {
                    return Err(ScriptError {
                        line,
                        message: format!("at_ms {} goes back from {}", step.at_ms, prev.at_ms),
                    });
                }
            }
            if step.directive == Directive::Join {
                if !declared.insert(step.device.clone()) {
                    return Err(ScriptError {
                        line,
                        message: format!("device {:?} joins twice", step.device),
                    });
                }
            } else if !declared.contains(&step.device) {
                return Err(ScriptError {
                    line,
                    message: format!("device {:?} used before its join", step.device),
                });
            }
            steps.push(step);
        }
        Ok(SessionScript {
            steps,
            base_dir: base_dir.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = fs::read_to_string(path).map_err(|e| ScriptError {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Devices in the order they join.
    pub fn devices(&self) -> Vec<&str> {
        self.steps
            .iter()
            .filter(|s| s.directive == Directive::Join)
            .map(|s| s.device.as_str())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    /// Existing server; `None` starts one in a temporary directory.
    pub server: Option<String>,
    pub hyper: Hyper,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: 0,
            server: None,
            hyper: Hyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub name: String,
    pub training: usize,
    pub testing: usize,
}

/// The headline numbers of a project: labels, image counts and the
/// weighted accuracy of the most recently trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectRow {
    pub labels: usize,
    pub training_images: usize,
    pub testing_images: usize,
    pub weighted_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalModel {
    pub device: String,
    pub version: u64,
    pub weighted_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSummary {
    pub digest: String,
    pub applied_seq: u64,
    pub pending: usize,
    pub connection: Connection,
    pub retrains: u64,
    pub model_version: Option<u64>,
    pub high_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainSummary {
    pub per_device: BTreeMap<String, u64>,
    pub total: u64,
    pub device_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSummary {
    pub device: String,
    pub seed: u64,
    pub rounds: usize,
    pub total_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub row: ProjectRow,
    pub labels: Vec<LabelRow>,
    pub final_model: Option<FinalModel>,
    pub retrains: RetrainSummary,
    pub games: Vec<GameSummary>,
    pub devices: BTreeMap<String, DeviceSummary>,
    /// Every device ended on the same canonical digest.
    pub converged: bool,
    pub events: usize,
}

pub struct RunOutput {
    pub summary: Summary,
    /// Every device's events, ordered by time then device.
    pub telemetry: Vec<ActivityEvent>,
    pub project: ProjectId,
}

struct Device {
    name: String,
    agent: Agent,
}

struct Runner<'a> {
    script: &'a SessionScript,
    opts: &'a RunOptions,
    addr: String,
    project: ProjectId,
    token: Token,
    clock: ManualClock,
    devices: Vec<Device>,
    last_trained: Option<usize>,
    games: Vec<GameSummary>,
    retrain_count: u64,
}

impl Runner<'_> {
    fn device(&mut self, name: &str) -> usize {
        self.devices
            .iter()
            .position(|d| d.name == name)
            .expect("parse checked devices are declared")
    }

    fn images(&self, line: usize, from: &Source, count: usize, seed: u64) -> Result<Vec<ImageBlob>, RunError> {
        let data_err = |source: AgentError| RunError::Agent { line, source };
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                self.script.base_dir.join(p)
            }
        };
        match from {
            Source::Synth(spec) => Ok((0..count as u64)
                .map(|i| spec.render(seed.wrapping_mul(1_000_003).wrapping_add(i)))
                .collect()),
            Source::File(p) => {
                let bytes = fs::read(resolve(p)).map_err(|e| data_err(e.into()))?;
                Ok(vec![ImageBlob::from_ppm(&bytes).map_err(|e| data_err(e.into()))?])
            }
            Source::Dir(p) => {
                let files = ppm_files(&resolve(p)).map_err(|e| data_err(e.into()))?;
                files
                    .iter()
                    .map(|f| {
                        let bytes = fs::read(f).map_err(|e| data_err(e.into()))?;
                        ImageBlob::from_ppm(&bytes).map_err(|e| data_err(e.into()))
                    })
                    .collect()
            }
        }
    }

    fn step(&mut self, step: &Step) -> Result<(), RunError> {
        let line = step.line;
        let wrap = |source: AgentError| RunError::Agent { line, source };
        self.clock.set(self.clock_now().max(step.at_ms));
        if step.directive == Directive::Join {
            let i = self.devices.len();
            let cfg = AgentConfig {
                hyper: self.opts.hyper.clone(),
                ..AgentConfig::seeded(
                    DeviceId::from_u128(i as u128 + 1),
                    self.opts.seed ^ ((i as u64 + 1) << 40),
                )
            };
            let mut agent = Agent::with_clock(self.project, cfg, Arc::new(self.clock.clone()))
                .map_err(wrap)?;
            agent.connect(&self.addr, self.token.clone()).map_err(wrap)?;
            agent.settle(SETTLE).map_err(wrap)?;
            self.devices.push(Device {
                name: step.device.clone(),
                agent,
            });
            return Ok(());
        }
        let d = self.device(&step.device);
        if self.devices[d].agent.connection() != Connection::Offline {
            self.devices[d].agent.settle(SETTLE).map_err(wrap)?;
        }
        match &step.directive {
            Directive::Join => unreachable!("handled above"),
            Directive::AddLabel { name } => {
                self.devices[d].agent.add_label(name).map_err(wrap)?;
            }
            Directive::RenameLabel { label, name } => {
                let agent = &mut self.devices[d].agent;
                let id = agent.find_label(label).map_err(wrap)?;
                agent.rename_label(id, name).map_err(wrap)?;
            }
            Directive::DeleteLabel { label } => {
                let agent = &mut self.devices[d].agent;
                let id = agent.find_label(label).map_err(wrap)?;
                agent.delete_label(id).map_err(wrap)?;
            }
            Directive::Capture {
                label,
                split,
                tags,
                from,
                count,
                seed,
            } => {
                let images = self.images(line, from, *count, *seed)?;
                let agent = &mut self.devices[d].agent;
                let id = agent.ensure_label(label).map_err(wrap)?;
                for img in images {
                    agent.capture(id, img, *split, tags.clone()).map_err(wrap)?;
                }
            }
            Directive::DeleteLatest {
                label,
                count,
                split,
            } => {
                let agent = &mut self.devices[d].agent;
                let id = agent.find_label(label).map_err(wrap)?;
                let mut victims: Vec<_> = agent
                    .state()
                    .live_samples()
                    .filter(|s| s.label == id && split.is_none_or(|sp| s.split == sp))
                    .map(|s| (if s.seq == 0 { u64::MAX } else { s.seq }, s.id))
                    .collect();
                victims.sort_by(|a, b| b.cmp(a));
                for (_, sample) in victims.into_iter().take(*count) {
                    agent.delete_sample(sample).map_err(wrap)?;
                }
            }
            Directive::Retrain { seed } => {
                self.retrain_count += 1;
                let seed = seed.unwrap_or(self.opts.seed.wrapping_add(self.retrain_count));
                self.devices[d].agent.retrain(seed).map_err(wrap)?;
                self.last_trained = Some(d);
            }
            Directive::Test {
                label,
                tags,
                from,
                count,
                seed,
            } => {
                let images = self.images(line, from, *count, *seed)?;
                let agent = &mut self.devices[d].agent;
                let id = agent.ensure_label(label).map_err(wrap)?;
                for img in images {
                    agent.capture(id, img, Split::Testing, tags.clone()).map_err(wrap)?;
                }
                if agent.model().is_some() {
                    agent.evaluate().map_err(wrap)?;
                }
            }
            Directive::Live { from, count, seed } => {
                let images = self.images(line, from, *count, *seed)?;
                let agent = &mut self.devices[d].agent;
                agent.live_start().map_err(wrap)?;
                for img in images {
                    agent.live_frame(&img).map_err(wrap)?;
                    self.clock.advance(LIVE_FRAME_GAP_MS);
                }
                agent.live_stop();
            }
            Directive::Game { seed } => {
                let summary = self.play(d, *seed).map_err(wrap)?;
                self.games.push(summary);
            }
            Directive::Disconnect => self.devices[d].agent.disconnect(),
            Directive::Reconnect => self.devices[d].agent.reconnect().map_err(wrap)?,
        }
        Ok(())
    }

    fn clock_now(&self) -> u64 {
        use coml_agent::Clock;
        self.clock.now_ms()
    }

    fn play(&mut self, d: usize, seed: u64) -> Result<GameSummary, AgentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agent = &mut self.devices[d].agent;
        let mut target = Some(agent.game_start(seed)?);
        while let Some(t) = target {
            let pool: Vec<_> = training_blobs(agent.state(), t);
            let image = match pool.choose(&mut rng) {
                Some(digest) => agent.image(digest),
                None => None,
            };
            // A label with no images left: show a blank frame.
            let image = image.unwrap_or_else(|| ImageBlob::solid(8, 8, [0, 0, 0]).expect("8x8"));
            self.clock.advance(coml_core::evaluation::ROUND_LENGTH_MS);
            target = agent.game_round(&image)?.next_target;
        }
        let session = agent.game_end()?;
        Ok(GameSummary {
            device: self.devices[d].name.clone(),
            seed,
            rounds: session.rounds.len(),
            total_score: session.total_score,
        })
    }

    fn finish(mut self) -> Result<RunOutput, RunError> {
        let wrap = |source: AgentError| RunError::Agent { line: 0, source };
        for dev in &mut self.devices {
            if dev.agent.connection() != Connection::Offline {
                dev.agent.settle(SETTLE).map_err(wrap)?;
            }
        }
        // A second pass picks up ops the first settles raced with.
        for dev in &mut self.devices {
            if dev.agent.connection() != Connection::Offline {
                dev.agent.settle(SETTLE).map_err(wrap)?;
            }
        }
        let final_model = match self.last_trained {
            Some(d) => {
                let agent = &mut self.devices[d].agent;
                agent.evaluate().map_err(wrap)?;
                let stats = agent.stats();
                Some(FinalModel {
                    device: self.devices[d].name.clone(),
                    version: stats.model_version.expect("device trained"),
                    weighted_accuracy: stats.weighted_accuracy,
                })
            }
            None => None,
        };
        let mut telemetry: Vec<ActivityEvent> = self
            .devices
            .iter()
            .flat_map(|d| d.agent.activity().events().iter().cloned())
            .collect();
        telemetry.sort_by_key(|e| (e.ts, e.device));
        let stats = retrain_stats(&telemetry);
        let per_device: BTreeMap<String, u64> = self
            .devices
            .iter()
            .map(|d| {
                let n = stats.per_device_totals.get(&d.agent.device()).copied().unwrap_or(0);
                (d.name.clone(), n)
            })
            .collect();
        let devices: BTreeMap<String, DeviceSummary> = self
            .devices
            .iter()
            .map(|d| {
                let a = &d.agent;
                let summary = DeviceSummary {
                    digest: hex_digest(&a.canonical_digest()),
                    applied_seq: a.replica().applied_seq(),
                    pending: a.replica().pending().len(),
                    connection: a.connection(),
                    retrains: per_device[&d.name],
                    model_version: a.model().map(|m| m.version),
                    high_score: a.high_score(),
                };
                (d.name.clone(), summary)
            })
            .collect();
        let converged = devices
            .values()
            .all(|s| Some(&s.digest) == devices.values().next().map(|f| &f.digest));
        let reference = self.devices.first().map(|d| d.agent.state());
        let labels = reference.map(label_rows).unwrap_or_default();
        let row = ProjectRow {
            labels: labels.len(),
            training_images: labels.iter().map(|l| l.training).sum(),
            testing_images: labels.iter().map(|l| l.testing).sum(),
            weighted_accuracy: final_model.as_ref().and_then(|m| m.weighted_accuracy),
        };
        let total = per_device.values().sum();
        let device_mean = if per_device.is_empty() {
            0.0
        } else {
            total as f64 / per_device.len() as f64
        };
        Ok(RunOutput {
            summary: Summary {
                row,
                labels,
                final_model,
                retrains: RetrainSummary {
                    per_device,
                    total,
                    device_mean,
                },
                games: self.games,
                devices,
                converged,
                events: telemetry.len(),
            },
            telemetry,
            project: self.project,
        })
    }
}

fn training_blobs(state: &ProjectState, label: LabelId) -> Vec<coml_core::domain::Digest> {
    state
        .live_samples()
        .filter(|s| s.label == label && s.split == Split::Training)
        .map(|s| s.blob)
        .collect()
}

fn label_rows(state: &ProjectState) -> Vec<LabelRow> {
    let names = state.display_names();
    let mut rows: Vec<LabelRow> = state
        .live_counts()
        .into_iter()
        .map(|(id, (training, testing))| LabelRow {
            name: names.get(&id).cloned().unwrap_or_default(),
            training,
            testing,
        })
        .collect();
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    rows
}

/// Runs a script to the end and reports what every device ended up with.
pub fn run_script(script: &SessionScript, opts: &RunOptions) -> Result<RunOutput, RunError> {
    let mut _local: Option<(tempfile::TempDir, ServerHandle)> = None;
    let addr = match &opts.server {
        Some(a) => a.clone(),
        None => {
            let dir = tempfile::tempdir().map_err(|e| RunError::Server(e.to_string()))?;
            let handle = Server::open(ServerConfig::new("127.0.0.1:0", dir.path()))
                .map_err(|e| RunError::Server(e.to_string()))?
                .spawn()
                .map_err(|e| RunError::Server(e.to_string()))?;
            let addr = handle.addr().to_string();
            _local = Some((dir, handle));
            addr
        }
    };
    let (project, token) = SyncClient::connect(addr.as_str())
        .and_then(|mut c| c.create_project("script"))
        .map_err(|e| RunError::Agent {
            line: 0,
            source: e.into(),
        })?;
    let mut runner = Runner {
        script,
        opts,
        addr,
        project,
        token,
        clock: ManualClock::new(0),
        devices: Vec::new(),
        last_trained: None,
        games: Vec::new(),
        retrain_count: 0,
    };
    for step in &script.steps {
        runner.step(step)?;
    }
    runner.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = SessionScript::parse(
            "# comment\n{\"at_ms\":0,\"device\":\"a\",\"directive\":\"join\"}\n\n{\"at_ms\":1,\"device\":\"b\",\"directive\":\"retrain\"}\n",
            ".",
        )
        .unwrap_err();
        assert_eq!(err.line, 4);
        assert!(err.message.contains("before its join"));

        let err = SessionScript::parse(
            "{\"at_ms\":5,\"device\":\"a\",\"directive\":\"join\"}\n{\"at_ms\":1,\"device\":\"a\",\"directive\":\"retrain\"}",
            ".",
        )
        .unwrap_err();
        assert_eq!(err.line, 2);

        let err = SessionScript::parse("{\"at_ms\":0,\"device\":\"a\",\"directive\":\"dance\"}", ".")
            .unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn capture_line_parses_with_defaults() {
        let s = SessionScript::parse(
            r#"{"at_ms":0,"device":"a","directive":"join"}
{"at_ms":10,"device":"a","directive":"capture","label":"apple","from":{"synth":{"rgb":[1,2,3]}}}"#,
            ".",
        )
        .unwrap();
        match &s.steps[1].directive {
            Directive::Capture {
                split, count, from, ..
            } => {
                assert_eq!(*split, Split::Training);
                assert_eq!(*count, 1);
                assert!(matches!(from, Source::Synth(spec) if spec.size == 64));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(s.devices(), vec!["a"]);
    }
}
