//! The deterministic state transition for one sequenced op.
//!
//! Conflict rules, all decided purely by sequence order:
//! - delete-wins for samples: a delete for an unseen sample is remembered and
//!   the later add becomes a no-op;
//! - cascade-wins for labels: deleting a label tombstones its samples, and a
//!   later add (or relabel) onto a tombstoned label lands tombstoned;
//! - last-writer-wins for label names, by `(lamport, device)`.

use thiserror::Error;

use crate::domain::{Label, ProjectState, Sample};

use super::op::{DatasetOp, OpKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApplyError {
    #[error("sequence gap: expected seq {expected}, got {got}")]
    Gap { expected: u64, got: u64 },
    #[error("malformed op: {0}")]
    MalformedOp(String),
}

/// Applies a sequenced op. `op.seq` must be exactly `applied_seq + 1`.
pub fn apply(state: &mut ProjectState, op: &DatasetOp) -> Result<(), ApplyError> {
    let expected = state.applied_seq + 1;
    if op.seq != expected {
        return Err(ApplyError::Gap {
            expected,
            got: op.seq,
        });
    }
    op.check_schema().map_err(ApplyError::MalformedOp)?;
    transition(state, op);
    state.applied_seq = op.seq;
    Ok(())
}

/// The transition itself, without sequence bookkeeping. Also used to replay
/// unconfirmed local ops (seq 0) on top of the confirmed state.
pub(crate) fn transition(state: &mut ProjectState, op: &DatasetOp) {
    match &op.kind {
        OpKind::AddLabel { label_id, name } => {
            if state.label_tombstones.contains(label_id) || state.labels.contains_key(label_id) {
                return;
            }
            state.labels.insert(
                *label_id,
                Label {
                    id: *label_id,
                    name: name.clone(),
                    name_stamp: op.stamp(),
                    deleted: false,
                },
            );
        }
        OpKind::RenameLabel {
            label_id,
            name,
            name_stamp,
        } => {
            if let Some(label) = state.labels.get_mut(label_id) {
                if *name_stamp > label.name_stamp {
                    label.name = name.clone();
                    label.name_stamp = *name_stamp;
                }
            }
        }
        OpKind::DeleteLabel { label_id } => match state.labels.get_mut(label_id) {
            Some(label) => {
                label.deleted = true;
                for s in state.samples.values_mut() {
                    if s.label == *label_id {
                        s.deleted = true;
                    }
                }
            }
            None => {
                state.label_tombstones.insert(*label_id);
            }
        },
        OpKind::AddSample { sample } => {
            if state.sample_tombstones.contains(&sample.id) || state.samples.contains_key(&sample.id)
            {
                return;
            }
            let label_live = state.is_live_label(sample.label);
            state.samples.insert(
                sample.id,
                Sample {
                    id: sample.id,
                    label: sample.label,
                    split: sample.split,
                    blob: sample.blob,
                    created_by: sample.created_by,
                    created_at: sample.created_at,
                    seq: op.seq,
                    tags: sample.tags.clone(),
                    deleted: !label_live,
                },
            );
        }
        OpKind::DeleteSample { sample_id } => match state.samples.get_mut(sample_id) {
            Some(s) => s.deleted = true,
            None => {
                state.sample_tombstones.insert(*sample_id);
            }
        },
        OpKind::TagSample { sample_id, tags } => {
            if let Some(s) = state.samples.get_mut(sample_id) {
                if !s.deleted {
                    s.tags = tags.clone();
                }
            }
        }
        OpKind::RelabelSample {
            sample_id,
            label_id,
        } => {
            let label_live = state.is_live_label(*label_id);
            if let Some(s) = state.samples.get_mut(sample_id) {
                if !s.deleted {
                    s.label = *label_id;
                    s.deleted = !label_live;
                }
            }
        }
    }
}
