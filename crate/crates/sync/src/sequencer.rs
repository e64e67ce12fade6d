//! Pure per-project sequencer: assigns the next sequence number, keeps the
//! op log and the server's copy of the project state. No I/O; the server
//! persists between [`Sequencer::prepare`] and [`Sequencer::commit`].

use std::collections::{BTreeSet, HashMap};

use coml_core::domain::{Digest, OpId, ProjectState, SampleId};
use coml_core::replication::{apply, ApplyError, DatasetOp, OpKind, SeqTooHigh};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SequenceError {
    #[error("malformed op: {0}")]
    MalformedOp(String),
    #[error("blob {0} has not been uploaded")]
    MissingBlob(Digest),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sequenced {
    /// Not seen before; carries the op with its sequence number filled in.
    New(DatasetOp),
    /// Already sequenced under this seq.
    Duplicate(u64),
}

#[derive(Debug, Default, Clone)]
pub struct Sequencer {
    log: Vec<DatasetOp>,
    by_op: HashMap<OpId, u64>,
    state: ProjectState,
}

impl Sequencer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds from a persisted log (seqs must run 1..n).
    pub fn from_log(ops: Vec<DatasetOp>) -> Result<Self, ApplyError> {
        let mut s = Self::new();
        for op in ops {
            s.commit(op)?;
        }
        Ok(s)
    }

    pub fn head(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn log(&self) -> &[DatasetOp] {
        &self.log
    }

    pub fn state(&self) -> &ProjectState {
        &self.state
    }

    pub fn delta_since(&self, seq: u64) -> Result<&[DatasetOp], SeqTooHigh> {
        if seq > self.head() {
            return Err(SeqTooHigh {
                requested: seq,
                applied: self.head(),
            });
        }
        Ok(&self.log[seq as usize..])
    }

    /// Decides what submitting `op` would do without changing anything.
    /// `has_blob` reports whether a digest is in the project's blob store.
    pub fn prepare(
        &self,
        op: &DatasetOp,
        has_blob: impl Fn(&Digest) -> bool,
    ) -> Result<Sequenced, SequenceError> {
        if let Some(&seq) = self.by_op.get(&op.op_id) {
            return Ok(Sequenced::Duplicate(seq));
        }
        op.check_schema().map_err(SequenceError::MalformedOp)?;
        if let Some(blob) = op.blob() {
            if !has_blob(&blob) {
                return Err(SequenceError::MissingBlob(blob));
            }
        }
        let mut op = op.clone();
        op.seq = self.head() + 1;
        Ok(Sequenced::New(op))
    }

    /// Appends a prepared op. Returns the digests no live sample refers to
    /// any more because of it; their bytes may be dropped.
    pub fn commit(&mut self, op: DatasetOp) -> Result<Vec<Digest>, ApplyError> {
        let touched = self.touched_samples(&op);
        apply(&mut self.state, &op)?;
        self.by_op.insert(op.op_id, op.seq);
        self.log.push(op);
        if touched.is_empty() {
            return Ok(Vec::new());
        }
        let candidates: BTreeSet<Digest> = touched
            .iter()
            .filter(|id| !self.state.is_live_sample(**id))
            .filter_map(|id| self.state.samples.get(id).map(|s| s.blob))
            .collect();
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let in_use: BTreeSet<Digest> = self.state.live_samples().map(|s| s.blob).collect();
        Ok(candidates.difference(&in_use).copied().collect())
    }

    /// Samples whose liveness this op may end.
    fn touched_samples(&self, op: &DatasetOp) -> Vec<SampleId> {
        match &op.kind {
            OpKind::AddSample { sample } => vec![sample.id],
            OpKind::DeleteSample { sample_id } | OpKind::RelabelSample { sample_id, .. } => {
                vec![*sample_id]
            }
            OpKind::DeleteLabel { label_id } => self
                .state
                .live_samples()
                .filter(|s| s.label == *label_id)
                .map(|s| s.id)
                .collect(),
            _ => Vec::new(),
        }
    }
}
