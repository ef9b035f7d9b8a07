//! Self-describing binary container used for every weight file the toolkit
//! writes.
//!
//! ```text
//! magic        8 bytes  "STADA\0CK"
//! header_len   u64 LE
//! header       canonical JSON: {blob_len, blob_sha256, format_version, kind, payload}
//! blob         blob_len bytes
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"STADA\0CK";
pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a toolkit container (bad magic)")]
    NotAContainer { path: PathBuf },
    #[error("{path} is truncated or corrupt: {detail}")]
    Truncated { path: PathBuf, detail: String },
    #[error("{path} has format version {found}, this build reads version {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u64,
        expected: u64,
    },
    #[error(
        "{path} weight blob hash mismatch: header says {expected}, content hashes to {actual}"
    )]
    HashMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("{path} has a malformed header: {message}")]
    Header { path: PathBuf, message: String },
    #[error("{path} holds a `{found}` container, expected `{expected}`")]
    KindMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
}

/// Decoded container contents.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub payload: Value,
    pub blob: Vec<u8>,
    pub blob_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// JSON text with object keys sorted at every level and no whitespace.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable value");
    let mut out = String::new();
    write_canonical(&v, &mut out);
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string key"));
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, it) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(it, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

pub fn encode<T: Serialize + ?Sized>(kind: &str, payload: &T, blob: &[u8]) -> Vec<u8> {
    encode_with_version(kind, payload, blob, FORMAT_VERSION)
}

pub(crate) fn encode_with_version<T: Serialize + ?Sized>(
    kind: &str,
    payload: &T,
    blob: &[u8],
    version: u64,
) -> Vec<u8> {
    let header = serde_json::json!({
        "format_version": version,
        "kind": kind,
        "blob_len": blob.len() as u64,
        "blob_sha256": sha256_hex(blob),
        "payload": serde_json::to_value(payload).expect("serializable payload"),
    });
    let header = canonical_json(&header);
    let mut out = Vec::with_capacity(16 + header.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(blob);
    out
}

pub fn decode(path: &Path, bytes: &[u8], expected_kind: &str) -> Result<Container, ContainerError> {
    let truncated = |detail: &str| ContainerError::Truncated {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 16 {
        if bytes.len() >= MAGIC.len() && &bytes[..8] != MAGIC {
            return Err(ContainerError::NotAContainer {
                path: path.to_path_buf(),
            });
        }
        return Err(truncated("file shorter than the fixed preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(ContainerError::NotAContainer {
            path: path.to_path_buf(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[16..];
    if header_len > rest.len() {
        return Err(truncated("header extends past end of file"));
    }
    let header: Value =
        serde_json::from_slice(&rest[..header_len]).map_err(|e| ContainerError::Header {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let field = |name: &str| {
        header.get(name).ok_or_else(|| ContainerError::Header {
            path: path.to_path_buf(),
            message: format!("missing `{name}`"),
        })
    };
    let bad = |name: &str| ContainerError::Header {
        path: path.to_path_buf(),
        message: format!("field `{name}` has the wrong type"),
    };
    let version = field("format_version")?
        .as_u64()
        .ok_or_else(|| bad("format_version"))?;
    if version != FORMAT_VERSION {
        return Err(ContainerError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let kind = field("kind")?
        .as_str()
        .ok_or_else(|| bad("kind"))?
        .to_string();
    if kind != expected_kind {
        return Err(ContainerError::KindMismatch {
            path: path.to_path_buf(),
            expected: expected_kind.to_string(),
            found: kind,
        });
    }
    let blob_len = field("blob_len")?.as_u64().ok_or_else(|| bad("blob_len"))? as usize;
    let expected_hash = field("blob_sha256")?
        .as_str()
        .ok_or_else(|| bad("blob_sha256"))?
        .to_string();
    let blob = &rest[header_len..];
    if blob.len() < blob_len {
        return Err(truncated(&format!(
            "weight blob has {} of {blob_len} bytes",
            blob.len()
        )));
    }
    if blob.len() > blob_len {
        return Err(truncated(&format!(
            "{} unexpected trailing bytes",
            blob.len() - blob_len
        )));
    }
    let actual = sha256_hex(blob);
    if actual != expected_hash {
        return Err(ContainerError::HashMismatch {
            path: path.to_path_buf(),
            expected: expected_hash,
            actual,
        });
    }
    Ok(Container {
        kind,
        payload: field("payload")?.clone(),
        blob: blob.to_vec(),
        blob_sha256: actual,
    })
}

pub fn read(path: &Path, expected_kind: &str) -> Result<Container, ContainerError> {
    let bytes = std::fs::read(path).map_err(|source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(path, &bytes, expected_kind)
}

pub fn write<T: Serialize + ?Sized>(
    path: &Path,
    kind: &str,
    payload: &T,
    blob: &[u8],
) -> Result<(), ContainerError> {
    write_atomic(path, &encode(kind, payload, blob)).map_err(|source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}
