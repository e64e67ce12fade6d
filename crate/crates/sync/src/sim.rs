//! Deterministic in-memory simulation of several replicas talking to one
//! sequencer through an unreliable network: random local edits, delayed
//! delivery, partitions that drop in-flight commits, and reconnects that
//! catch up by delta and resubmit pending ops. Everything is driven by one
//! seed, so a failing seed replays exactly.

use std::collections::{BTreeSet, VecDeque};

use coml_core::domain::{DeviceId, Digest, IdGen, ProjectId, Split};
use coml_core::replication::{DatasetOp, Intent, OpKind, ReplicatedProject};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sequencer::{Sequenced, Sequencer};

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub clients: usize,
    /// Keep going until at least this many ops have been sequenced.
    pub min_ops: usize,
    /// Record a human-readable trace of every step.
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            clients: 5,
            min_ops: 1000,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimReport {
    pub seed: u64,
    pub sequenced: usize,
    pub duplicates: usize,
    pub partitions: usize,
    pub reconnects: usize,
    pub label_deletes: usize,
    /// Live samples removed by label deletes.
    pub cascaded_samples: usize,
    pub renames: usize,
    pub server_digest: [u8; 32],
    pub client_digests: Vec<[u8; 32]>,
    /// Whether every client's optimistic view matched its confirmed state
    /// at the end.
    pub views_settled: bool,
    pub live_samples: usize,
    pub trace: Vec<String>,
}

impl SimReport {
    pub fn converged(&self) -> bool {
        self.views_settled && self.client_digests.iter().all(|d| *d == self.server_digest)
    }
}

struct Client {
    replica: ReplicatedProject,
    ids: IdGen,
    online: bool,
    /// Ops not yet handed to the sequencer.
    outbox: VecDeque<DatasetOp>,
    /// Commits broadcast to this client but not yet applied.
    inbox: VecDeque<DatasetOp>,
}

const NAMES: [&str; 8] = [
    "apple", "mango", "orange", "grapefruit", "avocado", "onion", "kiwi", "lime",
];
const TAGS: [&str; 5] = [
    "context:hand",
    "context:dark",
    "state:sliced",
    "angle:top",
    "background:soil",
];

struct Sim {
    rng: ChaCha8Rng,
    server: Sequencer,
    clients: Vec<Client>,
    report: SimReport,
    trace: bool,
}

impl Sim {
    fn log(&mut self, line: impl FnOnce() -> String) {
        if self.trace {
            self.report.trace.push(line());
        }
    }

    fn random_intent(&mut self, c: usize) -> Option<Intent> {
        let view = self.clients[c].replica.state();
        let labels: Vec<_> = view.live_labels().map(|l| l.id).collect();
        let roll = self.rng.random_range(0..100);
        if labels.is_empty() || roll < 8 {
            let name = NAMES.choose(&mut self.rng).expect("names");
            return Some(Intent::AddLabel {
                name: format!("{name}{}", self.rng.random_range(0..4)),
            });
        }
        let label = *labels.choose(&mut self.rng).expect("non-empty");
        let samples: Vec<_> = view.live_samples().map(|s| s.id).collect();
        Some(match roll {
            8..=11 => Intent::RenameLabel {
                label,
                name: format!(
                    "{}{}",
                    NAMES.choose(&mut self.rng).expect("names"),
                    self.rng.random_range(0..4)
                ),
            },
            12..=14 => Intent::DeleteLabel { label },
            15..=64 => {
                let mut blob = [0u8; 32];
                self.rng.fill(&mut blob);
                let tags = if self.rng.random_bool(0.3) {
                    BTreeSet::from([TAGS.choose(&mut self.rng).expect("tags").to_string()])
                } else {
                    BTreeSet::new()
                };
                Intent::AddSample {
                    label,
                    split: if self.rng.random_bool(0.75) {
                        Split::Training
                    } else {
                        Split::Testing
                    },
                    blob: Digest(blob),
                    created_at: self.rng.random_range(0..1_000_000),
                    tags,
                }
            }
            _ if samples.is_empty() => return None,
            65..=82 => Intent::DeleteSample {
                sample: *samples.choose(&mut self.rng).expect("non-empty"),
            },
            83..=90 => Intent::TagSample {
                sample: *samples.choose(&mut self.rng).expect("non-empty"),
                tags: BTreeSet::from([TAGS.choose(&mut self.rng).expect("tags").to_string()]),
            },
            _ => Intent::RelabelSample {
                sample: *samples.choose(&mut self.rng).expect("non-empty"),
                label,
            },
        })
    }

    fn local_edit(&mut self, c: usize) {
        let Some(intent) = self.random_intent(c) else {
            return;
        };
        let client = &mut self.clients[c];
        // Validation failures (e.g. a name already taken locally) are fine.
        if let Ok(op) = client.replica.local_submit(intent, &mut client.ids) {
            self.log(|| format!("c{c} edit {:?} lamport={}", op.kind, op.lamport));
            self.clients[c].outbox.push_back(op);
        }
    }

    fn deliver(&mut self, c: usize) {
        if !self.clients[c].online {
            return;
        }
        let Some(op) = self.clients[c].outbox.pop_front() else {
            return;
        };
        match self.server.prepare(&op, |_| true) {
            Ok(Sequenced::New(op)) => {
                match &op.kind {
                    OpKind::DeleteLabel { label_id } => {
                        self.report.label_deletes += 1;
                        self.report.cascaded_samples += self
                            .server
                            .state()
                            .live_samples()
                            .filter(|s| s.label == *label_id)
                            .count();
                    }
                    OpKind::RenameLabel { .. } => self.report.renames += 1,
                    _ => {}
                }
                self.log(|| format!("seq {} <- c{c} {}", op.seq, op.op_id.short()));
                self.server.commit(op.clone()).expect("prepared op applies");
                for client in self.clients.iter_mut().filter(|k| k.online) {
                    client.inbox.push_back(op.clone());
                }
            }
            Ok(Sequenced::Duplicate(seq)) => {
                self.report.duplicates += 1;
                self.log(|| format!("c{c} resubmit {} already seq {seq}", op.op_id.short()));
            }
            Err(e) => panic!("sequencer rejected a locally valid op: {e}"),
        }
    }

    fn receive(&mut self, c: usize, max: usize) {
        let client = &mut self.clients[c];
        let n = max.min(client.inbox.len());
        let batch: Vec<DatasetOp> = client.inbox.drain(..n).collect();
        client
            .replica
            .apply_batch(&batch)
            .expect("in-order commits apply");
    }

    fn partition(&mut self, c: usize) {
        let client = &mut self.clients[c];
        if client.online {
            client.online = false;
            // Commits in flight are lost with the connection.
            client.inbox.clear();
            self.report.partitions += 1;
            self.log(|| format!("c{c} partitioned"));
        }
    }

    fn reconnect(&mut self, c: usize) {
        let client = &mut self.clients[c];
        if client.online {
            return;
        }
        client.online = true;
        let delta = self
            .server
            .delta_since(client.replica.applied_seq())
            .expect("client never ahead of server");
        client.replica.apply_batch(delta).expect("delta applies");
        // Everything still pending goes out again; the sequencer drops
        // the ones it has already seen.
        client.outbox = client.replica.pending().iter().cloned().collect();
        self.report.reconnects += 1;
        let (seq, pending) = (client.replica.applied_seq(), client.outbox.len());
        self.log(|| format!("c{c} reconnected at seq {seq}, resubmitting {pending}"));
    }

    fn step(&mut self) {
        let c = self.rng.random_range(0..self.clients.len());
        match self.rng.random_range(0..100) {
            0..=39 => self.local_edit(c),
            40..=69 => self.deliver(c),
            70..=94 => {
                let max = self.rng.random_range(1..=8);
                self.receive(c, max);
            }
            95..=97 => self.partition(c),
            _ => self.reconnect(c),
        }
    }

    fn drain(&mut self) {
        for c in 0..self.clients.len() {
            self.reconnect(c);
        }
        loop {
            let mut busy = false;
            for c in 0..self.clients.len() {
                while !self.clients[c].outbox.is_empty() {
                    self.deliver(c);
                    busy = true;
                }
            }
            for c in 0..self.clients.len() {
                if !self.clients[c].inbox.is_empty() {
                    self.receive(c, usize::MAX);
                    busy = true;
                }
            }
            if !busy {
                break;
            }
        }
    }
}

/// Runs one seeded schedule to quiescence and reports the digests.
pub fn run(seed: u64, config: &SimConfig) -> SimReport {
    let project = ProjectId::from_u128(0x5eed);
    let clients = (0..config.clients)
        .map(|i| Client {
            replica: ReplicatedProject::new(project, DeviceId::from_u128(i as u128 + 1)),
            ids: IdGen::seeded(seed ^ ((i as u64 + 1) << 48)),
            online: true,
            outbox: VecDeque::new(),
            inbox: VecDeque::new(),
        })
        .collect();
    let mut sim = Sim {
        rng: ChaCha8Rng::seed_from_u64(seed),
        server: Sequencer::new(),
        clients,
        report: SimReport {
            seed,
            ..SimReport::default()
        },
        trace: config.trace,
    };
    while (sim.server.head() as usize) < config.min_ops {
        sim.step();
    }
    sim.drain();
    let mut report = sim.report;
    report.sequenced = sim.server.head() as usize;
    report.server_digest = sim.server.state().canonical_digest();
    report.live_samples = sim.server.state().live_samples().count();
    report.client_digests = sim
        .clients
        .iter()
        .map(|c| c.replica.canonical_digest())
        .collect();
    report.views_settled = sim
        .clients
        .iter()
        .all(|c| c.replica.pending().is_empty() && c.replica.state() == c.replica.confirmed());
    report
}
