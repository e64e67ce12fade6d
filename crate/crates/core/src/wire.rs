//! Length-prefixed framing: a 4-byte big-endian length, then the payload.
//!
//! The same framing carries JSON messages on the network, binary blob
//! payloads, and records in the server's append-only op log.

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Upper bound on any single frame; a full 4096x4096 PPM plus slack.
pub const MAX_FRAME_BYTES: usize = 3 * 4096 * 4096 + 1024;

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream (no bytes of
/// a new frame read).
pub fn read_frame<R: Read>(r: &mut R, max_len: usize) -> io::Result<Option<Vec<u8>>> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len_buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(len_buf) as usize;
    if len > max_len {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit {max_len}"),
        ));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(payload))
}

pub fn encode_json<T: Serialize>(msg: &T) -> Vec<u8> {
    let body = serde_json::to_vec(msg).expect("message types serialize infallibly");
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn write_json<W: Write, T: Serialize>(w: &mut W, msg: &T) -> io::Result<()> {
    w.write_all(&encode_json(msg))
}

pub fn read_json<R: Read, T: DeserializeOwned>(r: &mut R, max_len: usize) -> io::Result<Option<T>> {
    match read_frame(r, max_len)? {
        None => Ok(None),
        Some(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"{}").unwrap();
        assert_eq!(buf, [0, 0, 0, 2, b'{', b'}']);
        let mut cur = io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cur, 16).unwrap().unwrap(), b"{}");
        assert!(read_frame(&mut cur, 16).unwrap().is_none());
    }

    #[test]
    fn truncated_frame_is_an_error() {
        let mut cur = io::Cursor::new(vec![0, 0, 0, 5, 1, 2]);
        assert!(read_frame(&mut cur, 16).is_err());
        let mut cur = io::Cursor::new(vec![0, 0]);
        assert!(read_frame(&mut cur, 16).is_err());
    }

    #[test]
    fn oversized_frame_rejected() {
        let mut cur = io::Cursor::new(vec![0, 0, 1, 0]);
        assert_eq!(
            read_frame(&mut cur, 16).unwrap_err().kind(),
            io::ErrorKind::InvalidData
        );
    }
}
