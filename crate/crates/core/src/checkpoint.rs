//! Versioned checkpoint container.
//!
//! Layout: two newline-terminated lines. The first is a JSON header
//! `{"format":"sfd-checkpoint","version":1,"sha256":"<hex>"}`, the second the
//! JSON payload whose bytes the digest covers. Floats are written in shortest
//! round-trip form, so load→save reproduces the file byte for byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SfdError};

pub const FORMAT: &str = "sfd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    sha256: String,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode<T: Serialize>(payload: &T) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(payload).map_err(|e| SfdError::Corrupted(format!("cannot serialize: {e}")))?;
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        sha256: hex_digest(&body),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(&body);
    out.push(b'\n');
    Ok(out)
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let text = std::str::from_utf8(bytes).map_err(|_| SfdError::Corrupted("not UTF-8".into()))?;
    let (head, rest) = text
        .split_once('\n')
        .ok_or_else(|| SfdError::Corrupted("missing header line".into()))?;
    let header: Header =
        serde_json::from_str(head).map_err(|e| SfdError::Corrupted(format!("unreadable header: {e}")))?;
    if header.format != FORMAT {
        return Err(SfdError::Corrupted(format!("unknown format {:?}", header.format)));
    }
    if header.version != VERSION {
        return Err(SfdError::VersionMismatch {
            found: header.version,
            expected: VERSION,
        });
    }
    let body = rest
        .strip_suffix('\n')
        .ok_or_else(|| SfdError::Corrupted("truncated payload".into()))?;
    if hex_digest(body.as_bytes()) != header.sha256 {
        return Err(SfdError::Corrupted("payload digest mismatch".into()));
    }
    serde_json::from_str(body).map_err(|e| SfdError::Corrupted(format!("unreadable payload: {e}")))
}

/// Writes through a temporary sibling and renames, so readers never observe a
/// half-written file.
pub fn save<T: Serialize>(payload: &T, path: &Path) -> Result<()> {
    let bytes = encode(payload)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    decode(&fs::read(path)?)
}
