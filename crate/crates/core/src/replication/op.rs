use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::domain::{
    validate_label_name, validate_tags, DeviceId, Digest, LabelId, OpId, SampleId, Split, Stamp,
};

/// Payload of an `AddSample` op. The image travels separately, by digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewSample {
    pub id: SampleId,
    pub label: LabelId,
    pub split: Split,
    pub blob: Digest,
    pub created_by: DeviceId,
    pub created_at: u64,
    #[serde(default)]
    pub tags: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum OpKind {
    AddLabel {
        label_id: LabelId,
        name: String,
    },
    RenameLabel {
        label_id: LabelId,
        name: String,
        name_stamp: Stamp,
    },
    DeleteLabel {
        label_id: LabelId,
    },
    AddSample {
        sample: NewSample,
    },
    DeleteSample {
        sample_id: SampleId,
    },
    /// Replaces the sample's tag set.
    TagSample {
        sample_id: SampleId,
        tags: BTreeSet<String>,
    },
    /// Moves a sample to another label (user correction from the testing
    /// dashboard). The split never changes.
    RelabelSample {
        sample_id: SampleId,
        label_id: LabelId,
    },
}

/// The unit of replication.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetOp {
    pub op_id: OpId,
    pub device: DeviceId,
    pub lamport: u64,
    pub kind: OpKind,
    /// Assigned by the sequencer; 0 until then.
    #[serde(default)]
    pub seq: u64,
}

impl DatasetOp {
    pub fn stamp(&self) -> Stamp {
        Stamp {
            lamport: self.lamport,
            device: self.device,
        }
    }

    /// Structural checks that do not depend on replica state. The sequencer
    /// refuses ops that fail these, so every replica accepts what it is sent.
    pub fn check_schema(&self) -> Result<(), String> {
        if self.op_id == OpId::NIL {
            return Err("op_id is nil".into());
        }
        if self.device == DeviceId::NIL {
            return Err("device is nil".into());
        }
        if self.lamport == 0 {
            return Err("lamport must be >= 1".into());
        }
        match &self.kind {
            OpKind::AddLabel { label_id, name } => {
                nonnil(label_id.as_u128(), "label_id")?;
                validate_label_name(name)?;
            }
            OpKind::RenameLabel {
                label_id,
                name,
                name_stamp,
            } => {
                nonnil(label_id.as_u128(), "label_id")?;
                validate_label_name(name)?;
                if *name_stamp != self.stamp() {
                    return Err("name_stamp must equal (lamport, device)".into());
                }
            }
            OpKind::DeleteLabel { label_id } => nonnil(label_id.as_u128(), "label_id")?,
            OpKind::AddSample { sample } => {
                nonnil(sample.id.as_u128(), "sample.id")?;
                nonnil(sample.label.as_u128(), "sample.label")?;
                if sample.created_by != self.device {
                    return Err("sample.created_by must equal op device".into());
                }
                validate_tags(&sample.tags)?;
            }
            OpKind::DeleteSample { sample_id } => nonnil(sample_id.as_u128(), "sample_id")?,
            OpKind::TagSample { sample_id, tags } => {
                nonnil(sample_id.as_u128(), "sample_id")?;
                validate_tags(tags)?;
            }
            OpKind::RelabelSample {
                sample_id,
                label_id,
            } => {
                nonnil(sample_id.as_u128(), "sample_id")?;
                nonnil(label_id.as_u128(), "label_id")?;
            }
        }
        Ok(())
    }

    /// Blob this op depends on, if any.
    pub fn blob(&self) -> Option<Digest> {
        match &self.kind {
            OpKind::AddSample { sample } => Some(sample.blob),
            _ => None,
        }
    }
}

fn nonnil(v: u128, what: &str) -> Result<(), String> {
    if v == 0 {
        Err(format!("{what} is nil"))
    } else {
        Ok(())
    }
}
