//! On-disk checkpoints: a directory holding `manifest.json` and
//! `weights.safetensors`, written atomically through a temporary sibling.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.safetensors";

pub fn write_checkpoint(dir: &Path, manifest: &impl Serialize, params: &ParamStore) -> Result<()> {
    let tmp = temp_sibling(dir);
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    params.save_safetensors(tmp.join(WEIGHTS))?;
    std::fs::write(tmp.join(MANIFEST), serde_json::to_vec_pretty(manifest)?)?;
    replace_dir(&tmp, dir)
}

/// Renames `tmp` over `dest`, removing any previous `dest`.
pub fn replace_dir(tmp: &Path, dest: &Path) -> Result<()> {
    if dest.exists() {
        std::fs::remove_dir_all(dest)?;
    }
    if let Some(parent) = dest.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::rename(tmp, dest)?;
    Ok(())
}

pub fn temp_sibling(dir: &Path) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ckpt".into());
    dir.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// Reads a manifest and checks that every key in `required` is present, so
/// a damaged manifest is reported by the name of the offending field.
pub fn read_manifest<T: DeserializeOwned>(dir: &Path, kind: &str, required: &[&str]) -> Result<T> {
    let path = dir.join(MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::load(&path, "manifest", e))?;
    let value: Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::load(&path, "manifest", e))?;
    match value.get("kind").and_then(Value::as_str) {
        Some(k) if k == kind => {}
        Some(k) => return Err(Error::load(&path, "kind", format!("expected `{kind}`, found `{k}`"))),
        None => return Err(Error::load(&path, "kind", "missing")),
    }
    for key in required {
        if value.get(*key).is_none() {
            return Err(Error::load(&path, *key, "missing"));
        }
    }
    serde_json::from_value(value).map_err(|e| Error::load(&path, "manifest", e))
}

pub fn verify_hash(dir: &Path, expected: &str, actual: &str) -> Result<()> {
    if expected != actual {
        return Err(Error::load(
            dir.join(WEIGHTS),
            "content_hash",
            format!("weights hash {actual} does not match manifest {expected}"),
        ));
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a JSON-serializable value via its canonical (sorted-key) form.
pub fn json_hash(value: &impl Serialize) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(sha256_hex(serde_json::to_string(&v)?.as_bytes()))
}
