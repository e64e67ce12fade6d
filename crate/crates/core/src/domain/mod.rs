//! Core dataset types shared by every other module. No I/O lives here.

mod ids;
mod image;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

pub use ids::{DeviceId, EventId, IdGen, LabelId, OpId, ProjectId, SampleId};
pub use image::{parse_ppm_header, Digest, ImageBlob, ImageError, MAX_DIMENSION};

pub const MAX_LABEL_NAME_CHARS: usize = 64;
pub const MAX_TAG_CHARS: usize = 64;
pub const MAX_TAGS: usize = 32;

/// Last-writer-wins stamp for label names, ordered lexicographically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stamp {
    pub lamport: u64,
    pub device: DeviceId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Training,
    Testing,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Training => 0,
            Split::Testing => 1,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Training => "training",
            Split::Testing => "testing",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "training" | "train" => Ok(Split::Training),
            "testing" | "test" => Ok(Split::Testing),
            other => Err(format!("unknown split {other:?} (expected training or testing)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub id: LabelId,
    pub name: String,
    pub name_stamp: Stamp,
    pub deleted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub label: LabelId,
    pub split: Split,
    pub blob: Digest,
    pub created_by: DeviceId,
    /// Wall-clock milliseconds at capture.
    pub created_at: u64,
    /// Server sequence number of the AddSample op; 0 while unconfirmed.
    pub seq: u64,
    pub tags: BTreeSet<String>,
    pub deleted: bool,
}

/// Checks a label name: non-empty, at most 64 chars, no surrounding whitespace.
pub fn validate_label_name(name: &str) -> Result<(), &'static str> {
    if name.trim().is_empty() {
        return Err("label name is empty");
    }
    if name.trim() != name {
        return Err("label name has surrounding whitespace");
    }
    if name.chars().count() > MAX_LABEL_NAME_CHARS {
        return Err("label name longer than 64 characters");
    }
    Ok(())
}

pub fn validate_tags(tags: &BTreeSet<String>) -> Result<(), &'static str> {
    if tags.len() > MAX_TAGS {
        return Err("too many tags");
    }
    for t in tags {
        if t.trim().is_empty() || t.chars().count() > MAX_TAG_CHARS {
            return Err("tags must be 1..=64 characters");
        }
    }
    Ok(())
}

/// The dataset as determined by the sequenced operation stream.
///
/// `label_tombstones` and `sample_tombstones` hold deletions that arrived for
/// ids this replica has never seen added; they keep a later add from
/// resurrecting the item.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProjectState {
    pub labels: BTreeMap<LabelId, Label>,
    pub samples: BTreeMap<SampleId, Sample>,
    pub label_tombstones: BTreeSet<LabelId>,
    pub sample_tombstones: BTreeSet<SampleId>,
    pub applied_seq: u64,
}

const CANONICAL_MAGIC: &[u8; 8] = b"COMLPRJ1";

impl ProjectState {
    pub fn live_labels(&self) -> impl Iterator<Item = &Label> {
        self.labels.values().filter(|l| !l.deleted)
    }

    pub fn live_samples(&self) -> impl Iterator<Item = &Sample> {
        self.samples
            .values()
            .filter(|s| !s.deleted && self.is_live_label(s.label))
    }

    pub fn is_live_label(&self, id: LabelId) -> bool {
        self.labels.get(&id).is_some_and(|l| !l.deleted)
    }

    pub fn is_live_sample(&self, id: SampleId) -> bool {
        self.samples
            .get(&id)
            .is_some_and(|s| !s.deleted && self.is_live_label(s.label))
    }

    /// Live label with exactly this (trimmed) name, if any.
    pub fn live_label_named(&self, name: &str) -> Option<&Label> {
        let name = name.trim();
        self.live_labels().find(|l| l.name == name)
    }

    /// Per live label: (training_count, testing_count) over live samples.
    pub fn live_counts(&self) -> BTreeMap<LabelId, (usize, usize)> {
        let mut counts: BTreeMap<LabelId, (usize, usize)> =
            self.live_labels().map(|l| (l.id, (0, 0))).collect();
        for s in self.live_samples() {
            let entry = counts.entry(s.label).or_default();
            match s.split {
                Split::Training => entry.0 += 1,
                Split::Testing => entry.1 += 1,
            }
        }
        counts
    }

    /// Names as shown to users. Live labels that share a name (possible only
    /// after a raced rename) are disambiguated: the earliest-stamped keeps the
    /// bare name, later ones get `#<short-id>` appended.
    pub fn display_names(&self) -> BTreeMap<LabelId, String> {
        let mut by_name: BTreeMap<&str, Vec<&Label>> = BTreeMap::new();
        for l in self.live_labels() {
            by_name.entry(l.name.as_str()).or_default().push(l);
        }
        let mut out = BTreeMap::new();
        for (name, mut group) in by_name {
            group.sort_by_key(|l| (l.name_stamp, l.id));
            for (i, l) in group.into_iter().enumerate() {
                let shown = if i == 0 {
                    name.to_string()
                } else {
                    format!("{name}#{}", l.id.short())
                };
                out.insert(l.id, shown);
            }
        }
        out
    }

    /// Deterministic byte encoding of the replicated state.
    ///
    /// Layout (integers big-endian, strings as u32 length + UTF-8):
    /// magic `COMLPRJ1`, applied_seq u64, then four sections each led by a
    /// u32 count: labels (id, name, stamp lamport, stamp device, deleted),
    /// label tombstones (id), samples (id, label, split, digest, created_by,
    /// created_at, seq, tags, deleted), sample tombstones (id). Maps are
    /// emitted in id order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.samples.len() * 160);
        out.extend_from_slice(CANONICAL_MAGIC);
        out.extend_from_slice(&self.applied_seq.to_be_bytes());

        put_u32(&mut out, self.labels.len());
        for l in self.labels.values() {
            out.extend_from_slice(l.id.as_bytes());
            put_str(&mut out, &l.name);
            out.extend_from_slice(&l.name_stamp.lamport.to_be_bytes());
            out.extend_from_slice(l.name_stamp.device.as_bytes());
            out.push(u8::from(l.deleted));
        }

        put_u32(&mut out, self.label_tombstones.len());
        for id in &self.label_tombstones {
            out.extend_from_slice(id.as_bytes());
        }

        put_u32(&mut out, self.samples.len());
        for s in self.samples.values() {
            out.extend_from_slice(s.id.as_bytes());
            out.extend_from_slice(s.label.as_bytes());
            out.push(s.split.tag());
            out.extend_from_slice(&s.blob.0);
            out.extend_from_slice(s.created_by.as_bytes());
            out.extend_from_slice(&s.created_at.to_be_bytes());
            out.extend_from_slice(&s.seq.to_be_bytes());
            put_u32(&mut out, s.tags.len());
            for t in &s.tags {
                put_str(&mut out, t);
            }
            out.push(u8::from(s.deleted));
        }

        put_u32(&mut out, self.sample_tombstones.len());
        for id in &self.sample_tombstones {
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    /// SHA-256 of [`canonical_bytes`](Self::canonical_bytes).
    pub fn canonical_digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_bytes()).into()
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&u32::try_from(n).expect("section too large").to_be_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}
