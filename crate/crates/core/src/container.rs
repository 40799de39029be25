//! Self-describing binary container shared by datasets and checkpoints.
//!
//! ```text
//! magic[4] | version u32 | header_len u64 | header (JSON) | payload_len u64 | payload | sha256[32]
//! ```
//!
//! Integers are little-endian; the digest covers every preceding byte.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DIGEST_LEN: usize = 32;

pub(crate) fn encode(magic: [u8; 4], version: u32, header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(4 + 4 + 8 + header.len() + 8 + payload.len() + DIGEST_LEN);
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&version.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header);
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(payload);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub(crate) fn write(path: &Path, magic: [u8; 4], version: u32, header: &[u8], payload: &[u8]) -> Result<()> {
    let bytes = encode(magic, version, header, payload);
    fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub(crate) struct Decoded {
    pub header: Vec<u8>,
    pub payload: Vec<u8>,
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, path: &Path, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < *at + n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            reason: format!("{what} needs {n} bytes at offset {at}, file has {}", bytes.len()),
        });
    }
    let s = &bytes[*at..*at + n];
    *at += n;
    Ok(s)
}

fn read_u64(bytes: &[u8], at: &mut usize, path: &Path, what: &str) -> Result<usize> {
    let raw = take(bytes, at, 8, path, what)?;
    let v = u64::from_le_bytes(raw.try_into().expect("8 bytes"));
    usize::try_from(v).map_err(|_| Error::Truncated { path: path.to_path_buf(), reason: format!("{what} {v} is absurd") })
}

pub(crate) fn decode(bytes: &[u8], path: &Path, magic: [u8; 4], supported: u32, what: &'static str) -> Result<Decoded> {
    let mut at = 0;
    if take(bytes, &mut at, 4, path, "magic")? != magic {
        return Err(Error::Magic { path: path.to_path_buf(), what });
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, path, "version")?.try_into().expect("4 bytes"));
    if version != supported {
        return Err(Error::Version { path: path.to_path_buf(), found: version, supported });
    }
    let hlen = read_u64(bytes, &mut at, path, "header length")?;
    let header = take(bytes, &mut at, hlen, path, "header")?.to_vec();
    let plen = read_u64(bytes, &mut at, path, "payload length")?;
    let payload = take(bytes, &mut at, plen, path, "payload")?.to_vec();
    let body_end = at;
    let digest = take(bytes, &mut at, DIGEST_LEN, path, "checksum")?;
    if at != bytes.len() {
        return Err(Error::Header { path: path.to_path_buf(), reason: format!("{} trailing bytes", bytes.len() - at) });
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
        return Err(Error::Checksum { path: path.to_path_buf() });
    }
    Ok(Decoded { header, payload })
}

pub(crate) fn read(path: &Path, magic: [u8; 4], supported: u32, what: &'static str) -> Result<Decoded> {
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    decode(&bytes, path, magic, supported, what)
}

pub(crate) fn f32_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn f32_values(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Truncated { path: path.to_path_buf(), reason: "payload is not whole f32 values".into() });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}
