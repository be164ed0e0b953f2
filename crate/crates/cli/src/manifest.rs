use std::path::Path;

use mlvtg::{Error, Result};
use serde_json::json;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json` listing `files` (relative to `out_dir`) with their
/// sizes and SHA-256 digests.
pub fn write_manifest(out_dir: &Path, command: &str, seed: u64, files: &[String]) -> Result<()> {
    let mut entries = Vec::with_capacity(files.len());
    for rel in files {
        let path = out_dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        entries.push(json!({
            "path": rel,
            "bytes": bytes.len(),
            "sha256": hex::encode(Sha256::digest(&bytes)),
        }));
    }
    let doc = json!({
        "command": command,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "files": entries,
    });
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&doc)?;
    mlvtg::data::write_bytes_atomic(&path, text.as_bytes())
}
