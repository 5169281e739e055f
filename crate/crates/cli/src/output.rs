use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use triport_core::fock::MAX_PHOTONS;

use crate::config::FormatChoice;
use crate::error::CliError;

pub fn sha_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of the fully resolved science configuration. Output location,
/// format, and thread count are deliberately excluded: they must never
/// change what is computed.
pub fn config_hash(kind: &str, resolved: &Value) -> String {
    let wrapper = serde_json::json!({ "config": resolved, "kind": kind });
    sha_hex(wrapper.to_string().as_bytes())
}

/// One command's output set: a JSON envelope, an optional CSV table, and an
/// optional plain-text artifact, all stamped with the same config hash.
pub struct Artifact {
    pub kind: &'static str,
    pub seed: u64,
    pub config_hash: String,
    pub results: Value,
    pub csv: Option<String>,
    pub text: Option<String>,
}

pub struct Sink {
    pub dir: PathBuf,
    pub format: FormatChoice,
}

impl Sink {
    pub fn write(&self, artifact: Artifact) -> Result<Vec<PathBuf>, CliError> {
        fs::create_dir_all(&self.dir)?;
        let mut written = Vec::new();

        if self.format.wants_json() {
            let mut envelope = Map::new();
            envelope.insert("kind".into(), artifact.kind.into());
            envelope.insert("version".into(), env!("CARGO_PKG_VERSION").into());
            envelope.insert("seed".into(), artifact.seed.into());
            envelope.insert("cutoff".into(), MAX_PHOTONS.into());
            envelope.insert("config_hash".into(), artifact.config_hash.clone().into());
            envelope.insert("results".into(), artifact.results.clone());
            let digest = sha_hex(Value::Object(envelope.clone()).to_string().as_bytes());
            envelope.insert("digest".into(), digest.into());
            let path = self.dir.join(format!("{}.json", artifact.kind));
            let mut text = serde_json::to_string_pretty(&Value::Object(envelope))?;
            text.push('\n');
            fs::write(&path, text)?;
            written.push(path);
        }

        if self.format.wants_csv() {
            if let Some(table) = &artifact.csv {
                let path = self.dir.join(format!("{}.csv", artifact.kind));
                fs::write(&path, stamped(&artifact, table))?;
                written.push(path);
            }
        }

        if let Some(body) = &artifact.text {
            let path = self.dir.join(format!("{}.txt", artifact.kind));
            fs::write(&path, stamped(&artifact, body))?;
            written.push(path);
        }

        Ok(written)
    }
}

/// Prepends the metadata comment block; the digest line covers every byte
/// after itself.
fn stamped(artifact: &Artifact, body: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!("# kind: {}\n", artifact.kind));
    out.push_str(&format!("# version: {}\n", env!("CARGO_PKG_VERSION")));
    out.push_str(&format!("# seed: {}\n", artifact.seed));
    out.push_str(&format!("# cutoff: {MAX_PHOTONS}\n"));
    out.push_str(&format!("# config_hash: {}\n", artifact.config_hash));
    out.push_str(&format!("# digest: {}\n", sha_hex(body.as_bytes())));
    out.push_str(body);
    out
}

/// Re-checks one result file against its embedded digest.
pub fn verify_file(path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path)?;
    let name = path.display();
    if path.extension().is_some_and(|e| e == "json") {
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Invariant(format!("{name}: not valid JSON: {e}")))?;
        let Value::Object(mut map) = value else {
            return Err(CliError::Invariant(format!(
                "{name}: not a result envelope"
            )));
        };
        let Some(Value::String(stored)) = map.remove("digest") else {
            return Err(CliError::Invariant(format!("{name}: missing digest")));
        };
        check_hash_field(&map, &name)?;
        let recomputed = sha_hex(Value::Object(map).to_string().as_bytes());
        if recomputed != stored {
            return Err(CliError::Invariant(format!("{name}: digest mismatch")));
        }
    } else {
        let marker = "# digest: ";
        let Some(pos) = text.find(marker) else {
            return Err(CliError::Invariant(format!("{name}: missing digest line")));
        };
        let after = &text[pos + marker.len()..];
        let Some((stored, body)) = after.split_once('\n') else {
            return Err(CliError::Invariant(format!(
                "{name}: truncated digest line"
            )));
        };
        if sha_hex(body.as_bytes()) != stored.trim() {
            return Err(CliError::Invariant(format!("{name}: digest mismatch")));
        }
        if !text.contains("# config_hash: ") {
            return Err(CliError::Invariant(format!("{name}: missing config hash")));
        }
    }
    Ok(())
}

fn check_hash_field(map: &Map<String, Value>, name: &std::path::Display) -> Result<(), CliError> {
    match map.get("config_hash") {
        Some(Value::String(hash))
            if hash.len() == 64 && hash.bytes().all(|b| b.is_ascii_hexdigit()) =>
        {
            Ok(())
        }
        _ => Err(CliError::Invariant(format!("{name}: missing config hash"))),
    }
}
