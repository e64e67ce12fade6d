use std::collections::BTreeSet;

use thiserror::Error;

use crate::domain::{
    validate_label_name, validate_tags, DeviceId, Digest, IdGen, LabelId, ProjectId, ProjectState,
    SampleId, Split,
};

use super::apply::{apply, transition, ApplyError};
use super::op::{DatasetOp, NewSample, OpKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValidationError {
    #[error("unknown or deleted label {0}")]
    UnknownLabel(LabelId),
    #[error("unknown or deleted sample {0}")]
    UnknownSample(SampleId),
    #[error("invalid label name: {0}")]
    InvalidName(&'static str),
    #[error("a live label is already named {0:?}")]
    DuplicateName(String),
    #[error("invalid tags: {0}")]
    InvalidTags(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("requested seq {requested} is beyond applied seq {applied}")]
pub struct SeqTooHigh {
    pub requested: u64,
    pub applied: u64,
}

/// A user action, before it becomes an op.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Intent {
    AddLabel {
        name: String,
    },
    RenameLabel {
        label: LabelId,
        name: String,
    },
    DeleteLabel {
        label: LabelId,
    },
    AddSample {
        label: LabelId,
        split: Split,
        blob: Digest,
        created_at: u64,
        tags: BTreeSet<String>,
    },
    DeleteSample {
        sample: SampleId,
    },
    TagSample {
        sample: SampleId,
        tags: BTreeSet<String>,
    },
    RelabelSample {
        sample: SampleId,
        label: LabelId,
    },
}

/// Result of feeding a sequenced op to a replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Applied {
    New,
    /// Already applied earlier (catch-up overlap or a retried delivery).
    Duplicate,
}

/// One device's copy of a project.
///
/// `confirmed` holds exactly the sequenced ops; `pending` holds local ops
/// the sequencer has not acknowledged yet. What the user sees is `view`:
/// the confirmed state with pending ops replayed on top. When a pending op
/// comes back sequenced, the view is recomputed from the confirmed state, so
/// it always equals what a replica that never saw the optimistic op would
/// hold plus the remaining pending ops.
#[derive(Debug, Clone)]
pub struct ReplicatedProject {
    id: ProjectId,
    device: DeviceId,
    confirmed: ProjectState,
    log: Vec<DatasetOp>,
    pending: Vec<DatasetOp>,
    view: ProjectState,
    clock: u64,
}

impl ReplicatedProject {
    pub fn new(id: ProjectId, device: DeviceId) -> Self {
        ReplicatedProject {
            id,
            device,
            confirmed: ProjectState::default(),
            log: Vec::new(),
            pending: Vec::new(),
            view: ProjectState::default(),
            clock: 0,
        }
    }

    /// Rebuilds a replica from its saved sequenced log and the local ops
    /// that were still waiting for the server. Pending ops that already
    /// appear in the log are dropped.
    pub fn restore(
        id: ProjectId,
        device: DeviceId,
        log: &[DatasetOp],
        pending: Vec<DatasetOp>,
    ) -> Result<Self, ApplyError> {
        let mut r = Self::new(id, device);
        for op in log {
            r.apply_confirmed(op)?;
        }
        let sequenced: std::collections::HashSet<_> = r.log.iter().map(|o| o.op_id).collect();
        r.pending = pending
            .into_iter()
            .filter(|p| !sequenced.contains(&p.op_id))
            .collect();
        for p in &r.pending {
            r.clock = r.clock.max(p.lamport);
        }
        r.rebuild_view();
        Ok(r)
    }

    pub fn id(&self) -> ProjectId {
        self.id
    }

    pub fn device(&self) -> DeviceId {
        self.device
    }

    /// The optimistic state shown to the user.
    pub fn state(&self) -> &ProjectState {
        &self.view
    }

    /// The state determined by sequenced ops only.
    pub fn confirmed(&self) -> &ProjectState {
        &self.confirmed
    }

    pub fn applied_seq(&self) -> u64 {
        self.confirmed.applied_seq
    }

    pub fn pending(&self) -> &[DatasetOp] {
        &self.pending
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        self.confirmed.canonical_bytes()
    }

    pub fn canonical_digest(&self) -> [u8; 32] {
        self.confirmed.canonical_digest()
    }

    /// Sequenced ops with seq in `(seq, applied_seq]`, in order.
    pub fn delta_since(&self, seq: u64) -> Result<&[DatasetOp], SeqTooHigh> {
        if seq > self.applied_seq() {
            return Err(SeqTooHigh {
                requested: seq,
                applied: self.applied_seq(),
            });
        }
        Ok(&self.log[seq as usize..])
    }

    /// Validates an intent against the current view, turns it into an op,
    /// applies it optimistically and queues it for sequencing.
    pub fn local_submit(
        &mut self,
        intent: Intent,
        ids: &mut IdGen,
    ) -> Result<DatasetOp, ValidationError> {
        let kind = self.validate(intent, ids)?;
        self.clock += 1;
        let op = DatasetOp {
            op_id: ids.op(),
            device: self.device,
            lamport: self.clock,
            kind,
            seq: 0,
        };
        transition(&mut self.view, &op);
        self.pending.push(op.clone());
        Ok(op)
    }

    fn validate(&self, intent: Intent, ids: &mut IdGen) -> Result<OpKind, ValidationError> {
        let view = &self.view;
        let live_label = |id: LabelId| {
            if view.is_live_label(id) {
                Ok(())
            } else {
                Err(ValidationError::UnknownLabel(id))
            }
        };
        let live_sample = |id: SampleId| {
            if view.is_live_sample(id) {
                Ok(())
            } else {
                Err(ValidationError::UnknownSample(id))
            }
        };
        let free_name = |name: &str, except: Option<LabelId>| {
            validate_label_name(name).map_err(ValidationError::InvalidName)?;
            match view.live_label_named(name) {
                Some(l) if Some(l.id) != except => Err(ValidationError::DuplicateName(name.into())),
                _ => Ok(()),
            }
        };
        Ok(match intent {
            Intent::AddLabel { name } => {
                let name = name.trim().to_string();
                free_name(&name, None)?;
                OpKind::AddLabel {
                    label_id: ids.label(),
                    name,
                }
            }
            Intent::RenameLabel { label, name } => {
                live_label(label)?;
                let name = name.trim().to_string();
                free_name(&name, Some(label))?;
                OpKind::RenameLabel {
                    label_id: label,
                    name,
                    name_stamp: crate::domain::Stamp {
                        lamport: self.clock + 1,
                        device: self.device,
                    },
                }
            }
            Intent::DeleteLabel { label } => {
                live_label(label)?;
                OpKind::DeleteLabel { label_id: label }
            }
            Intent::AddSample {
                label,
                split,
                blob,
                created_at,
                tags,
            } => {
                live_label(label)?;
                validate_tags(&tags).map_err(ValidationError::InvalidTags)?;
                OpKind::AddSample {
                    sample: NewSample {
                        id: ids.sample(),
                        label,
                        split,
                        blob,
                        created_by: self.device,
                        created_at,
                        tags,
                    },
                }
            }
            Intent::DeleteSample { sample } => {
                live_sample(sample)?;
                OpKind::DeleteSample { sample_id: sample }
            }
            Intent::TagSample { sample, tags } => {
                live_sample(sample)?;
                validate_tags(&tags).map_err(ValidationError::InvalidTags)?;
                OpKind::TagSample {
                    sample_id: sample,
                    tags,
                }
            }
            Intent::RelabelSample { sample, label } => {
                live_sample(sample)?;
                live_label(label)?;
                OpKind::RelabelSample {
                    sample_id: sample,
                    label_id: label,
                }
            }
        })
    }

    /// Applies one sequenced op.
    pub fn apply(&mut self, op: &DatasetOp) -> Result<Applied, ApplyError> {
        let outcome = self.apply_confirmed(op)?;
        if outcome == Applied::New {
            self.settle_view(std::slice::from_ref(op));
        }
        Ok(outcome)
    }

    /// Applies a run of sequenced ops, recomputing the view once at the end.
    /// Stops at the first error; ops before it stay applied.
    pub fn apply_batch(&mut self, ops: &[DatasetOp]) -> Result<usize, ApplyError> {
        let mut fresh = Vec::new();
        let mut result = Ok(());
        for op in ops {
            match self.apply_confirmed(op) {
                Ok(Applied::New) => fresh.push(op.clone()),
                Ok(Applied::Duplicate) => {}
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        if !fresh.is_empty() {
            self.settle_view(&fresh);
        }
        result.map(|()| fresh.len())
    }

    fn apply_confirmed(&mut self, op: &DatasetOp) -> Result<Applied, ApplyError> {
        if op.seq >= 1 && op.seq <= self.applied_seq() {
            let known = &self.log[op.seq as usize - 1];
            return if known.op_id == op.op_id {
                Ok(Applied::Duplicate)
            } else {
                Err(ApplyError::MalformedOp(format!(
                    "seq {} already holds a different op",
                    op.seq
                )))
            };
        }
        apply(&mut self.confirmed, op)?;
        self.log.push(op.clone());
        // An echo of our own op was counted when it was issued; only news
        // from other devices ticks the clock. Keeps stamps independent of
        // whether ops were sent live or queued offline.
        self.clock = if op.device == self.device {
            self.clock.max(op.lamport)
        } else {
            self.clock.max(op.lamport) + 1
        };
        Ok(Applied::New)
    }

    /// Brings `view` back in line after `fresh` ops were confirmed.
    fn settle_view(&mut self, fresh: &[DatasetOp]) {
        let mut rebuild = false;
        for op in fresh {
            if self.pending.is_empty() {
                if !rebuild {
                    // View equals confirmed-before-op; follow along.
                    transition(&mut self.view, op);
                    self.view.applied_seq = self.confirmed.applied_seq;
                }
            } else if self.pending[0].op_id == op.op_id {
                // Own op echoed in order: the view already contains it and
                // differs only in the sample's sequence number.
                self.pending.remove(0);
                if !rebuild {
                    if let OpKind::AddSample { sample } = &op.kind {
                        if let Some(s) = self.view.samples.get_mut(&sample.id) {
                            s.seq = op.seq;
                        }
                    }
                    self.view.applied_seq = self.confirmed.applied_seq;
                }
            } else {
                self.pending.retain(|p| p.op_id != op.op_id);
                rebuild = true;
            }
        }
        if rebuild {
            self.rebuild_view();
        }
    }

    fn rebuild_view(&mut self) {
        self.view = self.confirmed.clone();
        for op in &self.pending {
            transition(&mut self.view, op);
        }
    }

    /// Drops the optimistic view and recomputes it from scratch.
    #[doc(hidden)]
    pub fn recomputed_view(&self) -> ProjectState {
        let mut v = self.confirmed.clone();
        for op in &self.pending {
            transition(&mut v, op);
        }
        v
    }
}
