//! Wire messages. Every message is one frame (4-byte big-endian length,
//! then JSON with a `type` field). `BLOB_PUT` and `BLOB_DATA` are followed
//! by one more frame holding the raw PPM bytes.

use std::fmt;
use std::str::FromStr;

use coml_core::domain::{DeviceId, Digest, OpId, ProjectId};
use coml_core::replication::DatasetOp;
use rand::RngCore;
use serde::{Deserialize, Serialize};

/// A project's invite secret: 128 random bits, rendered as 32 hex digits.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Token([u8; 16]);

impl Token {
    pub fn generate() -> Self {
        let mut bytes = [0u8; 16];
        rand::rng().fill_bytes(&mut bytes);
        Token(bytes)
    }

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        Token(bytes)
    }

    /// Comparison whose running time does not depend on where the tokens differ.
    pub fn matches(&self, other: &Token) -> bool {
        self.0
            .iter()
            .zip(other.0.iter())
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

// Never print the secret in logs.
impl fmt::Debug for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Token(..)")
    }
}

impl FromStr for Token {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut bytes = [0u8; 16];
        hex::decode_to_slice(s, &mut bytes).map_err(|e| format!("bad token: {e}"))?;
        Ok(Token(bytes))
    }
}

impl TryFrom<String> for Token {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Token> for String {
    fn from(t: Token) -> String {
        t.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    UnknownProject,
    AuthFailure,
    /// A project-scoped request arrived before `HELLO`.
    NotJoined,
    MalformedOp,
    MissingBlob,
    MalformedImage,
    DigestMismatch,
    BlobTooLarge,
    UnknownDigest,
    SeqTooHigh,
    Storage,
    BadRequest,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variants serialize");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    CreateProject {
        name: String,
    },
    ProjectCreated {
        project_id: ProjectId,
        token: Token,
    },
    /// Joins the connection to a project and subscribes it to commits.
    /// Answered with `DELTA` holding every op after `last_seq`.
    Hello {
        project_id: ProjectId,
        token: Token,
        device_id: DeviceId,
        last_seq: u64,
    },
    Delta {
        ops: Vec<DatasetOp>,
        head: u64,
    },
    OpSubmit {
        token: Token,
        op: DatasetOp,
    },
    /// Reply to `OP_SUBMIT`. `duplicate` is set when the op had already
    /// been sequenced; `seq` is then the original sequence number.
    OpAck {
        op_id: OpId,
        seq: u64,
        duplicate: bool,
    },
    /// Broadcast of a newly sequenced op to every joined connection.
    OpCommit {
        op: DatasetOp,
    },
    BlobPut {
        token: Token,
        digest: Digest,
        len: u64,
    },
    BlobAck {
        digest: Digest,
    },
    BlobGet {
        token: Token,
        digest: Digest,
    },
    BlobData {
        digest: Digest,
        len: u64,
    },
    Ping,
    Pong {
        head: u64,
    },
    Error {
        code: ErrorCode,
        detail: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        op_id: Option<OpId>,
    },
}

impl Message {
    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        Message::Error {
            code,
            detail: detail.into(),
            op_id: None,
        }
    }
}
